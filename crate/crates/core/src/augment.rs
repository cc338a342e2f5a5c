//! Training-time image augmentation on single `(1,h,w,c)` images in `[0,1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoutConfig {
    pub base_size: usize,
    /// Number of masks.
    pub alpha: usize,
    /// Largest size multiplier.
    pub beta: usize,
    /// Always use `beta` instead of sampling the multiplier from `1..=beta`.
    pub fixed_size: bool,
}

impl Default for CutoutConfig {
    fn default() -> Self {
        CutoutConfig {
            base_size: 4,
            alpha: 3,
            beta: 5,
            fixed_size: false,
        }
    }
}

impl CutoutConfig {
    /// Upper bound on the zeroed fraction of an `h x w` image.
    pub fn area_bound(&self, h: usize, w: usize) -> f64 {
        let side = (self.base_size * self.beta) as f64;
        self.alpha as f64 * side * side / (h * w) as f64
    }
}

/// Half-open pixel rectangle `rows y0..y1`, `cols x0..x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub translate_px: i64,
    pub zoom_rot_range: f64,
    pub horizontal_flip: bool,
    pub cutout: Option<CutoutConfig>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            translate_px: 2,
            zoom_rot_range: 0.2,
            horizontal_flip: true,
            cutout: Some(CutoutConfig::default()),
        }
    }
}

impl AugmentConfig {
    /// Every stage disabled: the pipeline reduces to rescaling.
    pub fn none() -> Self {
        AugmentConfig {
            translate_px: 0,
            zoom_rot_range: 0.0,
            horizontal_flip: false,
            cutout: None,
        }
    }
}

/// Independent stream for one sample of one epoch.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

pub fn rescale<T: Float>(pixels: &[u8], h: usize, w: usize, c: usize) -> Tensor<T> {
    let k = T::lit(255.0);
    Tensor::from_vec(Shape::new(1, h, w, c), pixels.iter().map(|&p| T::lit(p as f64) / k).collect())
        .expect("pixel count matches shape")
}

/// Zeroes `alpha` squares and returns the masks that were applied.
pub fn cutout_with_masks<T: Float, R: Rng>(img: &Tensor<T>, cfg: &CutoutConfig, rng: &mut R) -> (Tensor<T>, Vec<Rect>) {
    let s = img.shape();
    let mut out = img.clone();
    let mut masks = Vec::with_capacity(cfg.alpha);
    for _ in 0..cfg.alpha {
        let mult = if cfg.fixed_size { cfg.beta } else { rng.gen_range(1..=cfg.beta.max(1)) };
        let side = cfg.base_size * mult;
        let cy = rng.gen_range(0..s.h());
        let cx = rng.gen_range(0..s.w());
        let r = Rect {
            y0: cy.saturating_sub(side / 2),
            y1: (cy + side - side / 2).min(s.h()),
            x0: cx.saturating_sub(side / 2),
            x1: (cx + side - side / 2).min(s.w()),
        };
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                for ch in 0..s.c() {
                    out.set(0, y, x, ch, T::zero());
                }
            }
        }
        masks.push(r);
    }
    (out, masks)
}

pub fn cutout<T: Float, R: Rng>(img: &Tensor<T>, cfg: &CutoutConfig, rng: &mut R) -> Tensor<T> {
    cutout_with_masks(img, cfg, rng).0
}

/// Shifts content by `dx` columns and `dy` rows; vacated pixels copy the
/// nearest edge pixel.
pub fn translate<T: Float>(img: &Tensor<T>, dx: i64, dy: i64) -> Tensor<T> {
    let s = img.shape();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    Tensor::from_fn(s, |[n, y, x, c]| {
        img.get(n, clamp(y as i64 - dy, s.h()), clamp(x as i64 - dx, s.w()), c)
    })
}

pub fn random_translate<T: Float, R: Rng>(img: &Tensor<T>, range_px: i64, rng: &mut R) -> Tensor<T> {
    let dx = rng.gen_range(-range_px..=range_px);
    let dy = rng.gen_range(-range_px..=range_px);
    translate(img, dx, dy)
}

fn bilinear<T: Float>(img: &Tensor<T>, n: usize, y: f64, x: f64, c: usize) -> T {
    let s = img.shape();
    let y = y.clamp(0.0, (s.h() - 1) as f64);
    let x = x.clamp(0.0, (s.w() - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(s.h() - 1), (x0 + 1).min(s.w() - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let p = |yy, xx| img.get(n, yy, xx, c).to_f64().expect("finite pixel");
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    T::lit(top * (1.0 - fy) + bottom * fy)
}

/// Zoom by `1 + z` and rotate by `theta` radians about the image center,
/// bilinear sampling with edge clamping.
pub fn zoom_rotate<T: Float>(img: &Tensor<T>, z: f64, theta: f64) -> Tensor<T> {
    let s = img.shape();
    let (cy, cx) = ((s.h() as f64 - 1.0) / 2.0, (s.w() as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let k = 1.0 / (1.0 + z);
    Tensor::from_fn(s, |[n, y, x, c]| {
        let (u, v) = (x as f64 - cx, y as f64 - cy);
        let sx = (cos * u + sin * v) * k + cx;
        let sy = (-sin * u + cos * v) * k + cy;
        bilinear(img, n, sy, sx, c)
    })
}

pub fn random_zoom_rotate<T: Float, R: Rng>(img: &Tensor<T>, range: f64, rng: &mut R) -> Tensor<T> {
    if range <= 0.0 {
        return img.clone();
    }
    let z = rng.gen_range(-range..=range);
    let theta = rng.gen_range(-range..=range);
    zoom_rotate(img, z, theta)
}

pub fn horizontal_flip<T: Float>(img: &Tensor<T>) -> Tensor<T> {
    let s = img.shape();
    Tensor::from_fn(s, |[n, y, x, c]| img.get(n, y, s.w() - 1 - x, c))
}

/// rescale -> translate -> zoom/rotate -> flip (p = 0.5) -> cutout.
pub fn train_pipeline<T: Float, R: Rng>(
    pixels: &[u8],
    h: usize,
    w: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Tensor<T> {
    let mut img = rescale(pixels, h, w, 3);
    if cfg.translate_px > 0 {
        img = random_translate(&img, cfg.translate_px, rng);
    }
    if cfg.zoom_rot_range > 0.0 {
        img = random_zoom_rotate(&img, cfg.zoom_rot_range, rng);
    }
    if cfg.horizontal_flip && rng.gen_bool(0.5) {
        img = horizontal_flip(&img);
    }
    if let Some(c) = &cfg.cutout {
        img = cutout(&img, c, rng);
    }
    img
}

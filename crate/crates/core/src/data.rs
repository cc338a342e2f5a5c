//! Binary PPM codec, resizing, labeled datasets, the synthetic real/fake task
//! and stratified splitting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, Rect};
use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

pub const IMAGE_SIZE: usize = 64;
pub const REAL: u8 = 0;
pub const FAKE: u8 = 1;

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        augment::rescale(&self.pixels, self.height, self.width, 3)
    }

    /// Rounds `[0,1]` values to the nearest 8-bit level.
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.n() != 1 || s.c() != 3 {
            return Err(Error::Dimension(format!("expected one RGB image (1,h,w,3), got {s}")));
        }
        let pixels = t.data().iter().map(|&v| quantize(v.to_f64().unwrap_or(0.0))).collect();
        Image::new(s.w(), s.h(), pixels)
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses a binary P6 file with maxval 255. Comments and any whitespace are
/// accepted between header fields.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "not a binary PPM (expected magic P6)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, format!("missing header field {}", ["width", "height", "maxval"][i])));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(start, "header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(pos, format!("maxval {maxval} unsupported, expected 255")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "header must end with one whitespace byte")),
    }
    let need = width * height * 3;
    if bytes.len() - pos < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated pixel data: need {need} bytes, found {}", bytes.len() - pos),
        ));
    }
    Image::new(width, height, bytes[pos..pos + need].to_vec())
}

pub fn save_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

/// Separable bilinear resize with half-pixel centers, `(n,h,w,c)` in and out.
pub fn resize_bilinear<T: Float>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = img.shape();
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                (i0, (i0 + 1).min(n_in - 1), src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(s.h(), out_h);
    let xs = taps(s.w(), out_w);
    let p = |n, y, x, c| img.get(n, y, x, c).to_f64().unwrap_or(0.0);
    Tensor::from_fn(Shape::new(s.n(), out_h, out_w, s.c()), |[n, y, x, c]| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = p(n, y0, x0, c) * (1.0 - fx) + p(n, y0, x1, c) * fx;
        let bottom = p(n, y1, x0, c) * (1.0 - fx) + p(n, y1, x1, c) * fx;
        T::lit(top * (1.0 - fy) + bottom * fy)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Val,
    Test,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// `IMAGE_SIZE x IMAGE_SIZE` RGB bytes.
    pub pixels: Vec<u8>,
    pub label: u8,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub items: Vec<Sample>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `(real, fake)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let fake = self.items.iter().filter(|s| s.label == FAKE).count();
        (self.items.len() - fake, fake)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|s| s.label).collect()
    }

    /// Stacked `(k,64,64,3)` batch of the given items, rescaled only, or
    /// augmented with per-sample streams derived from `(seed, epoch, index)`.
    pub fn batch<T: Float>(&self, indices: &[usize], aug: Option<(&AugmentConfig, u64, u64)>) -> Result<Tensor<T>> {
        let imgs: Vec<Tensor<T>> = indices
            .iter()
            .map(|&i| {
                let px = &self.items[i].pixels;
                match aug {
                    Some((cfg, seed, epoch)) => {
                        let mut rng = augment::sample_rng(seed, epoch, i as u64);
                        augment::train_pipeline(px, IMAGE_SIZE, IMAGE_SIZE, cfg, &mut rng)
                    }
                    None => augment::rescale(px, IMAGE_SIZE, IMAGE_SIZE, 3),
                }
            })
            .collect();
        Tensor::stack(&imgs)
    }
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads `<root>/real/*.ppm` and `<root>/fake/*.ppm` in lexicographic order,
/// resizing any image that is not 64x64.
pub fn load_dataset_dir(root: impl AsRef<Path>) -> Result<LabeledDataset> {
    let root = root.as_ref();
    let mut items = Vec::new();
    for (sub, label) in [("real", REAL), ("fake", FAKE)] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing subdirectory {}", dir.display())));
        }
        let files = ppm_files(&dir)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!("no .ppm images in {}", dir.display())));
        }
        for f in files {
            let mut img = load_ppm(&f)?;
            if img.width != IMAGE_SIZE || img.height != IMAGE_SIZE {
                let t: Tensor<f64> = img.to_tensor();
                img = Image::from_tensor(&resize_bilinear(&t, IMAGE_SIZE, IMAGE_SIZE))?;
            }
            items.push(Sample {
                pixels: img.pixels,
                label,
                source: f.display().to_string(),
            });
        }
    }
    Ok(LabeledDataset { items, split: Split::All })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    pub n_per_class: usize,
    pub seed: u64,
    pub blob_count: usize,
    pub artifact_amplitude: f64,
    pub artifact_period: usize,
    pub artifact_region: f64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            n_per_class: 1000,
            seed: 42,
            blob_count: 6,
            artifact_amplitude: 0.25,
            artifact_period: 2,
            artifact_region: 0.5,
        }
    }
}

/// SplitMix64 finalizer, used to derive per-image seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0xA24B_AED4_963E_E407) ^ b.wrapping_mul(0x9FB2_1C65_1E98_DF25);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth "natural" image: a sum of Gaussian blobs, min-max normalized.
pub fn blob_image<R: Rng>(blobs: usize, rng: &mut R) -> Tensor<f64> {
    let n = IMAGE_SIZE;
    let mut img = Tensor::<f64>::zeros(Shape::new(1, n, n, 3));
    for _ in 0..blobs {
        let cy = rng.gen_range(0.0..n as f64);
        let cx = rng.gen_range(0.0..n as f64);
        let sigma: f64 = rng.gen_range(8.0..=24.0);
        let amp: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let k = 1.0 / (2.0 * sigma * sigma);
        for y in 0..n {
            for x in 0..n {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let e = (-d2 * k).exp();
                for (c, a) in amp.iter().enumerate() {
                    let v = img.get(0, y, x, c) + a * e;
                    img.set(0, y, x, c, v);
                }
            }
        }
    }
    let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return img.map(|_| 0.5);
    }
    img.map(|v| (v - lo) / (hi - lo))
}

/// Rectangle covering `region` of the image area at a random position.
fn artifact_rect<R: Rng>(region: f64, rng: &mut R) -> Rect {
    let n = IMAGE_SIZE;
    let area = (region.clamp(0.0, 1.0) * (n * n) as f64).round() as usize;
    let min_h = area.div_ceil(n).max(1);
    let rh = rng.gen_range(min_h..=n);
    let rw = (area as f64 / rh as f64).round().clamp(1.0, n as f64) as usize;
    let y0 = rng.gen_range(0..=n - rh);
    let x0 = rng.gen_range(0..=n - rw);
    Rect {
        y0,
        y1: y0 + rh,
        x0,
        x1: x0 + rw,
    }
}

/// `+1` or `-1` checkerboard sign with the given period in pixels.
pub fn checker_sign(y: usize, x: usize, period: usize) -> f64 {
    let cell = (period / 2).max(1);
    if (y / cell + x / cell) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// One generated image with its construction details.
#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub label: u8,
    pub seed: u64,
    /// The smooth image before any artifact.
    pub base: Tensor<f64>,
    pub artifact: Option<Rect>,
    pub image: Image,
}

pub fn synthesize(cfg: &SyntheticTaskConfig, label: u8, index: usize) -> SyntheticImage {
    let seed = mix_seed(cfg.seed, label as u64, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = blob_image(cfg.blob_count, &mut rng);
    let mut img = base.clone();
    let artifact = (label == FAKE).then(|| {
        let r = artifact_rect(cfg.artifact_region, &mut rng);
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let d = cfg.artifact_amplitude * checker_sign(y, x, cfg.artifact_period);
                for c in 0..3 {
                    img.set(0, y, x, c, (img.get(0, y, x, c) + d).clamp(0.0, 1.0));
                }
            }
        }
        r
    });
    SyntheticImage {
        label,
        seed,
        base,
        artifact,
        image: Image::from_tensor(&img).expect("generated image is RGB"),
    }
}

/// Generates `n_per_class` images per class. When `out_root` is given the
/// images are written as `real/NNNNN.ppm`, `fake/NNNNN.ppm` plus
/// `manifest.csv`.
pub fn generate_synthetic(cfg: &SyntheticTaskConfig, out_root: Option<&Path>) -> Result<LabeledDataset> {
    if let Some(root) = out_root {
        for sub in ["real", "fake"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let mut items = Vec::with_capacity(2 * cfg.n_per_class);
    let mut manifest = String::from("path,label,seed\n");
    for (sub, label) in [("real", REAL), ("fake", FAKE)] {
        for i in 0..cfg.n_per_class {
            let s = synthesize(cfg, label, i);
            let rel = format!("{sub}/{i:05}.ppm");
            if let Some(root) = out_root {
                save_ppm(&s.image, root.join(&rel))?;
            }
            writeln!(manifest, "{rel},{label},{}", s.seed).expect("string write");
            items.push(Sample {
                pixels: s.image.pixels,
                label,
                source: rel,
            });
        }
    }
    if let Some(root) = out_root {
        let p = root.join("manifest.csv");
        std::fs::write(&p, manifest).map_err(|e| Error::io(&p, e))?;
    }
    Ok(LabeledDataset { items, split: Split::All })
}

/// Integer counts proportional to `fractions` summing to `total`
/// (largest remainder, ties to the earlier split).
pub fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>().min(total);
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified split into train, validation, test and fine-tune sets.
pub fn split(data: &LabeledDataset, fractions: [f64; 4], seed: u64) -> Result<[LabeledDataset; 4]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split fractions must be in [0,1] and sum to 1, got {fractions:?}")));
    }
    let names = [Split::Train, Split::Val, Split::Test, Split::Finetune];
    let mut parts: [Vec<Sample>; 4] = Default::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in [REAL, FAKE] {
        let mut idx: Vec<usize> = (0..data.items.len()).filter(|&i| data.items[i].label == label).collect();
        idx.shuffle(&mut rng);
        let counts = apportion(idx.len(), &fractions);
        let mut it = idx.into_iter();
        for (part, &k) in parts.iter_mut().zip(&counts) {
            part.extend(it.by_ref().take(k).map(|i| data.items[i].clone()));
        }
    }
    for (p, name) in parts.iter().zip(names) {
        if p.is_empty() {
            return Err(Error::Dataset(format!("{name:?} split is empty for fractions {fractions:?}")));
        }
    }
    let [a, b, c, d] = parts;
    Ok([
        LabeledDataset { items: a, split: Split::Train },
        LabeledDataset { items: b, split: Split::Val },
        LabeledDataset { items: c, split: Split::Test },
        LabeledDataset { items: d, split: Split::Finetune },
    ])
}

//! Dense rank-4 tensors in channels-last layout.
//!
//! Every activation and weight in the crate is a [`Tensor`] of shape
//! `(n, h, w, c)` stored contiguously with linear index
//! `((n * H + h) * W + w) * C + c`. Matrices are carried as `(n, 1, rows, cols)`
//! so a batch of matrices shares the same storage rules.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float as NumFloat, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Float:
    NumFloat
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Weight-file dtype tag.
    const DTYPE: u8;
    const BYTES: usize;

    /// `c = alpha * a * b + beta * c` on strided row/column-major views.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. When `beta` is zero the
    /// previous contents of `c` are ignored.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Elementwise `exp` over a slice.
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in float type")
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_float {
    ($t:ty, $tag:expr, $gemm:path, $exp:path) => {
        impl Float for $t {
            const DTYPE: u8 = $tag;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: out too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn exp_in_place(xs: &mut [Self]) {
                $exp(xs)
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_float!(f32, 0, matrixmultiply::sgemm, exp_f32_slice);
impl_float!(f64, 1, matrixmultiply::dgemm, exp_f64_slice);

fn exp_f64_slice(xs: &mut [f64]) {
    for x in xs {
        *x = x.exp();
    }
}

/// Branch-free `exp` that the compiler can vectorize: range reduction by
/// `ln 2` and a degree-6 polynomial, within 2 ulp of `f32::exp` on
/// `[-87, 88]`. Inputs below `-87.3` return the smallest normal-ish value
/// instead of flushing to zero.
fn exp_f32_slice(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    for x in xs {
        let v = x.max(-87.3).min(88.7);
        let t = v * LOG2E + ROUND;
        let n = t - ROUND;
        let r = v - n * LN2_HI - n * LN2_LO;
        let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
            + 0.166_666_65)
            * r
            + 0.5;
        let p = p * r * r + r + 1.0;
        // the low mantissa bits of `t` hold `n` as a two's-complement integer
        let k = t.to_bits().wrapping_sub(ROUND.to_bits());
        let scale = f32::from_bits(k.wrapping_add(127) << 23);
        *x = p * scale;
    }
}

/// Row-major `(m x k) * (k x n)` into a fresh buffer.
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a, k, 1, b, n, 1, T::zero(), &mut out, n, 1);
    out
}

/// Shape `(n, h, w, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn h(&self) -> usize {
        self.0[1]
    }
    pub fn w(&self) -> usize {
        self.0[2]
    }
    pub fn c(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.h() * self.w() * self.c()
    }

    pub fn index(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.h() + h) * self.w() + w) * self.c() + c
    }

    pub fn coords(&self, mut idx: usize) -> [usize; 4] {
        let c = idx % self.c();
        idx /= self.c();
        let w = idx % self.w();
        idx /= self.w();
        let h = idx % self.h();
        [idx / self.h(), h, w, c]
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [n, h, w, c] = self.0;
        write!(f, "({n},{h},{w},{c})")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let data = (0..shape.numel()).map(|i| f(shape.coords(i))).collect();
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    /// Matrix `(rows, cols)` carried as shape `(1, 1, rows, cols)`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(Shape::new(1, 1, rows, cols), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, n: usize, h: usize, w: usize, c: usize) -> T {
        self.data[self.shape.index(n, h, w, c)]
    }

    pub fn set(&mut self, n: usize, h: usize, w: usize, c: usize, v: T) {
        let i = self.shape.index(n, h, w, c);
        self.data[i] = v;
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Batch item `i` as a `(1, h, w, c)` tensor.
    pub fn item(&self, i: usize) -> Tensor<T> {
        let len = self.shape.item_len();
        Tensor {
            shape: Shape::new(1, self.shape.h(), self.shape.w(), self.shape.c()),
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack an empty list".into()))?;
        let [_, h, w, c] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        for t in items {
            let [tn, th, tw, tc] = t.shape.0;
            if (th, tw, tc) != (h, w, c) {
                return Err(Error::Dimension(format!(
                    "stack: item shape {} differs from {}",
                    t.shape, first.shape
                )));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, h, w, c),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_has_matching_length() {
        let t = Tensor::<f32>::zeros(Shape::new(2, 3, 4, 5));
        assert_eq!(t.len(), 120);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 1), vec![0.0; 3]).is_err());
    }

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5],[6]] = [[17],[39]]
        let out = matmul(&[1.0f64, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1);
        assert_eq!(out, vec![17.0, 39.0]);
    }

    #[test]
    fn gemm_transposed_views() {
        // a^T * b with a stored 2x3 row-major -> (3x2)(2x2)
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 6];
        f64::gemm(3, 2, 2, 1.0, &a, 1, 3, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn stack_and_item() {
        let a = Tensor::<f32>::full(Shape::new(1, 2, 2, 1), 1.0);
        let b = Tensor::<f32>::full(Shape::new(1, 2, 2, 1), 2.0);
        let s = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 1));
        assert_eq!(s.item(0), a);
    }

    proptest! {
        #[test]
        fn index_coords_round_trip(n in 1usize..4, h in 1usize..6, w in 1usize..6, c in 1usize..6, seed in 0usize..10_000) {
            let shape = Shape::new(n, h, w, c);
            let idx = seed % shape.numel();
            let [a, b, d, e] = shape.coords(idx);
            prop_assert_eq!(shape.index(a, b, d, e), idx);
            prop_assert!(a < n && b < h && d < w && e < c);
        }
    }
}

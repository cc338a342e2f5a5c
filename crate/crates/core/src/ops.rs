//! Primitive tensor operations and their backward kernels.
//!
//! The public functions here are pure: they never mutate their inputs and are
//! safe to call from any thread. [`crate::autograd::Tape`] records them and
//! calls the matching `*_backward` kernels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

/// Output size and leading pad of a "same" padded window.
///
/// Padding is split with the smaller half first, so stride-2 windows over an
/// even extent pad only on the trailing edge.
pub fn same_padding(input: usize, stride: usize, kernel: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out.max(1) - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::Config(format!("stride must be 1 or 2, got {stride}")))
    }
}

/// Convolution weights. Pointwise kernels are `(1, 1, c_in, c_out)`,
/// depthwise kernels `(1, 3, 3, c)` and biases `(1, 1, 1, c_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T> {
    pub pointwise: Option<Tensor<T>>,
    pub depthwise: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Float> ConvWeights<T> {
    pub fn pointwise(w: Tensor<T>, bias: Option<Tensor<T>>) -> Self {
        ConvWeights {
            pointwise: Some(w),
            depthwise: None,
            bias,
        }
    }

    pub fn separable(depthwise: Tensor<T>, pointwise: Tensor<T>) -> Self {
        ConvWeights {
            pointwise: Some(pointwise),
            depthwise: Some(depthwise),
            bias: None,
        }
    }

    pub fn param_count(&self) -> usize {
        [&self.pointwise, &self.depthwise, &self.bias]
            .iter()
            .filter_map(|t| t.as_ref())
            .map(|t| t.len())
            .sum()
    }
}

// ---------------------------------------------------------------------------
// pointwise (1x1) convolution

fn pointwise_dims<T: Float>(x: Shape, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<usize> {
    let ws = w.shape();
    if ws.n() != 1 || ws.h() != 1 {
        return Err(Error::Dimension(format!(
            "pointwise kernel must be (1,1,c_in,c_out), got {ws}"
        )));
    }
    if ws.w() != x.c() {
        return Err(Error::Dimension(format!(
            "channel axis: input has {} channels but kernel expects {}",
            x.c(),
            ws.w()
        )));
    }
    if let Some(b) = bias {
        if b.len() != ws.c() {
            return Err(Error::Dimension(format!(
                "bias axis: bias has {} entries but kernel emits {} channels",
                b.len(),
                ws.c()
            )));
        }
    }
    Ok(ws.c())
}

/// Rows of the strided input used by a 1x1 convolution, gathered contiguously.
fn subsample<T: Float>(x: &Tensor<T>, stride: usize) -> (Shape, Vec<T>) {
    let s = x.shape();
    let (oh, ph) = same_padding(s.h(), stride, 1);
    let (ow, pw) = same_padding(s.w(), stride, 1);
    let c = s.c();
    let mut out = Vec::with_capacity(s.n() * oh * ow * c);
    for n in 0..s.n() {
        for oy in 0..oh {
            let iy = oy * stride - ph;
            for ox in 0..ow {
                let ix = ox * stride - pw;
                let base = s.index(n, iy, ix, 0);
                out.extend_from_slice(&x.data()[base..base + c]);
            }
        }
    }
    (Shape::new(s.n(), oh, ow, c), out)
}

pub(crate) fn pointwise_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    check_stride(stride)?;
    let c_out = pointwise_dims(x.shape(), w, bias)?;
    let c_in = x.shape().c();
    let gathered;
    let (in_shape, rows_data): (Shape, &[T]) = if stride == 1 {
        (x.shape(), x.data())
    } else {
        gathered = subsample(x, stride);
        (gathered.0, &gathered.1)
    };
    let rows = in_shape.n() * in_shape.h() * in_shape.w();
    let mut out = vec![T::zero(); rows * c_out];
    T::gemm(
        rows,
        c_in,
        c_out,
        T::one(),
        rows_data,
        c_in,
        1,
        w.data(),
        c_out,
        1,
        T::zero(),
        &mut out,
        c_out,
        1,
    );
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(c_out) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::from_vec(
        Shape::new(in_shape.n(), in_shape.h(), in_shape.w(), c_out),
        out,
    )
}

/// Gradients of a pointwise convolution: `(dx, dw, db)`.
pub(crate) fn pointwise_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let c_in = x.shape().c();
    let c_out = w.shape().c();
    let gathered;
    let rows_data: &[T] = if stride == 1 {
        x.data()
    } else {
        gathered = subsample(x, stride);
        &gathered.1
    };
    let rows = dy.len() / c_out;

    let mut dw = Tensor::zeros(w.shape());
    T::gemm(
        c_in,
        rows,
        c_out,
        T::one(),
        rows_data,
        1,
        c_in,
        dy.data(),
        c_out,
        1,
        T::zero(),
        dw.data_mut(),
        c_out,
        1,
    );

    let db = has_bias.then(|| {
        let mut db = Tensor::zeros(Shape::new(1, 1, 1, c_out));
        for row in dy.data().chunks_exact(c_out) {
            for (d, &g) in db.data_mut().iter_mut().zip(row) {
                *d += g;
            }
        }
        db
    });

    let dx = need_dx.then(|| {
        let mut drows = vec![T::zero(); rows * c_in];
        T::gemm(
            rows,
            c_out,
            c_in,
            T::one(),
            dy.data(),
            c_out,
            1,
            w.data(),
            1,
            c_out,
            T::zero(),
            &mut drows,
            c_in,
            1,
        );
        if stride == 1 {
            Tensor::from_vec(x.shape(), drows).expect("shape preserved")
        } else {
            let s = x.shape();
            let (oh, ph) = same_padding(s.h(), stride, 1);
            let (ow, pw) = same_padding(s.w(), stride, 1);
            let mut dx = Tensor::zeros(s);
            let mut src = drows.chunks_exact(c_in);
            for n in 0..s.n() {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = s.index(n, oy * stride - ph, ox * stride - pw, 0);
                        let chunk = src.next().expect("row count");
                        dx.data_mut()[base..base + c_in].copy_from_slice(chunk);
                    }
                }
            }
            dx
        }
    });
    (dx, dw, db)
}

/// 1x1 convolution with optional bias.
pub fn conv1x1<T: Float>(x: &Tensor<T>, w: &ConvWeights<T>, stride: usize) -> Result<Tensor<T>> {
    let pw = w
        .pointwise
        .as_ref()
        .ok_or_else(|| Error::Config("conv1x1 requires pointwise weights".into()))?;
    pointwise_forward(x, pw, w.bias.as_ref(), stride)
}

// ---------------------------------------------------------------------------
// depthwise 3x3 convolution

fn depthwise_dims<T: Float>(x: Shape, k: &Tensor<T>) -> Result<()> {
    let ks = k.shape();
    if ks != Shape::new(1, 3, 3, x.c()) {
        return Err(Error::Dimension(format!(
            "channel axis: depthwise kernel {ks} does not match input channels {}",
            x.c()
        )));
    }
    Ok(())
}

pub(crate) fn depthwise_forward<T: Float>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    check_stride(stride)?;
    depthwise_dims(x.shape(), k)?;
    let s = x.shape();
    let (c, ih, iw) = (s.c(), s.h(), s.w());
    let (oh, ph) = same_padding(ih, stride, 3);
    let (ow, pw) = same_padding(iw, stride, 3);
    let out_shape = Shape::new(s.n(), oh, ow, c);
    let mut out = Tensor::zeros(out_shape);
    let kd = k.data();
    out.data_mut()
        .par_chunks_mut(oh * ow * c)
        .zip(x.data().par_chunks(ih * iw * c))
        .for_each(|(o_item, x_item)| {
            for oy in 0..oh {
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let o = &mut o_item[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            let xi = (iy * iw + ix as usize) * c;
                            let xs = &x_item[xi..xi + c];
                            let ks = &kd[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                            for ((ov, &xv), &kv) in o.iter_mut().zip(xs).zip(ks) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of a depthwise convolution: `(dx, dk)`.
pub(crate) fn depthwise_backward<T: Float>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let s = x.shape();
    let (c, ih, iw) = (s.c(), s.h(), s.w());
    let (oh, ph) = same_padding(ih, stride, 3);
    let (ow, pw) = same_padding(iw, stride, 3);
    let mut dk = Tensor::zeros(k.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(s));
    let kd = k.data();
    for n in 0..s.n() {
        for oy in 0..oh {
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - ph as isize;
                if iy < 0 || iy >= ih as isize {
                    continue;
                }
                let iy = iy as usize;
                for ox in 0..ow {
                    let gi = ((n * oh + oy) * ow + ox) * c;
                    let g = &dy.data()[gi..gi + c];
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix < 0 || ix >= iw as isize {
                            continue;
                        }
                        let xi = s.index(n, iy, ix as usize, 0);
                        let ko = (ky * 3 + kx) * c;
                        let xs = &x.data()[xi..xi + c];
                        for ((d, &gv), &xv) in dk.data_mut()[ko..ko + c].iter_mut().zip(g).zip(xs) {
                            *d += gv * xv;
                        }
                        if let Some(dx) = dx.as_mut() {
                            let ks = &kd[ko..ko + c];
                            for ((d, &gv), &kv) in
                                dx.data_mut()[xi..xi + c].iter_mut().zip(g).zip(ks)
                            {
                                *d += gv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Depthwise 3x3 (same padding, no bias) followed by a pointwise projection.
pub fn depthwise_separable_conv3x3<T: Float>(
    x: &Tensor<T>,
    w: &ConvWeights<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let dw = w
        .depthwise
        .as_ref()
        .ok_or_else(|| Error::Config("separable conv requires depthwise weights".into()))?;
    let pw = w
        .pointwise
        .as_ref()
        .ok_or_else(|| Error::Config("separable conv requires pointwise weights".into()))?;
    let mid = depthwise_forward(x, dw, stride)?;
    pointwise_forward(&mid, pw, None, 1)
}

// ---------------------------------------------------------------------------
// batch normalization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub moving_mean: Vec<T>,
    pub moving_var: Vec<T>,
    pub eps: T,
}

impl<T: Float> BatchNormParams<T> {
    /// gamma 1, beta 0, moving mean 0, moving variance 1.
    pub fn identity(c: usize, eps: T) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            moving_mean: vec![T::zero(); c],
            moving_var: vec![T::one(); c],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Four values per channel, counting the moving statistics.
    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }

    pub fn update_moving(&mut self, stats: &BatchStats<T>, momentum: T) {
        update_moving(&mut self.moving_mean, &stats.mean, momentum);
        update_moving(&mut self.moving_var, &stats.var, momentum);
    }
}

pub(crate) fn update_moving<T: Float>(moving: &mut [T], batch: &[T], momentum: T) {
    for (m, &b) in moving.iter_mut().zip(batch) {
        *m = momentum * *m + (T::one() - momentum) * b;
    }
}

/// Per-channel batch mean and biased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) fn batch_stats<T: Float>(x: &Tensor<T>) -> BatchStats<T> {
    let c = x.shape().c();
    let rows = x.len() / c;
    let inv = T::one() / T::from_usize(rows.max(1)).unwrap();
    let mut mean = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv);
    BatchStats { mean, var }
}

/// `y = gamma * (x - mean) * inv_std + beta`, per channel.
pub(crate) fn normalize<T: Float>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Tensor<T> {
    let c = x.shape().c();
    let scale: Vec<T> = gamma.iter().zip(inv_std).map(|(&g, &s)| g * s).collect();
    let mut out = Tensor::zeros(x.shape());
    for (orow, xrow) in out
        .data_mut()
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(c))
    {
        for i in 0..c {
            orow[i] = (xrow[i] - mean[i]) * scale[i] + beta[i];
        }
    }
    out
}

pub(crate) fn inv_std<T: Float>(var: &[T], eps: T) -> Result<Vec<T>> {
    var.iter()
        .map(|&v| {
            let s = (v + eps).sqrt();
            let r = T::one() / s;
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::Numeric(format!(
                    "batch norm variance {v} with eps {eps} gives a non-finite scale"
                )))
            }
        })
        .collect()
}

fn bn_dims<T: Float>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<()> {
    let c = x.shape().c();
    for (name, len) in [
        ("gamma", p.gamma.len()),
        ("beta", p.beta.len()),
        ("moving_mean", p.moving_mean.len()),
        ("moving_var", p.moving_var.len()),
    ] {
        if len != c {
            return Err(Error::Dimension(format!(
                "channel axis: batch norm {name} has {len} entries for {c} channels"
            )));
        }
    }
    Ok(())
}

/// Batch normalization. In train mode the batch statistics are returned so
/// the caller can fold them into the moving averages.
pub fn batch_norm<T: Float>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchStats<T>>)> {
    bn_dims(x, p)?;
    match mode {
        Mode::Infer => {
            let s = inv_std(&p.moving_var, p.eps)?;
            Ok((normalize(x, &p.moving_mean, &s, &p.gamma, &p.beta), None))
        }
        Mode::Train => {
            let stats = batch_stats(x);
            if stats.mean.iter().chain(&stats.var).any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite batch statistics".into()));
            }
            let s = inv_std(&stats.var, p.eps)?;
            let y = normalize(x, &stats.mean, &s, &p.gamma, &p.beta);
            Ok((y, Some(stats)))
        }
    }
}

/// Gradients of batch norm: `(dx, dgamma, dbeta)`.
///
/// With `batch_stats` the mean and variance are treated as functions of `x`.
pub(crate) fn batch_norm_backward<T: Float>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &Tensor<T>,
    batch_stats: bool,
    need_dx: bool,
) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
    let c = x.shape().c();
    let rows = x.len() / c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (xrow, grow) in x.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        for i in 0..c {
            let xhat = (xrow[i] - mean[i]) * inv_std[i];
            dgamma[i] += grow[i] * xhat;
            dbeta[i] += grow[i];
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let scale: Vec<T> = gamma.iter().zip(inv_std).map(|(&g, &s)| g * s).collect();
        if batch_stats {
            let inv_n = T::one() / T::from_usize(rows).unwrap();
            for ((drow, xrow), grow) in dx
                .data_mut()
                .chunks_exact_mut(c)
                .zip(x.data().chunks_exact(c))
                .zip(dy.data().chunks_exact(c))
            {
                for i in 0..c {
                    let xhat = (xrow[i] - mean[i]) * inv_std[i];
                    drow[i] =
                        scale[i] * (grow[i] - dbeta[i] * inv_n - xhat * dgamma[i] * inv_n);
                }
            }
        } else {
            for (drow, grow) in dx
                .data_mut()
                .chunks_exact_mut(c)
                .zip(dy.data().chunks_exact(c))
            {
                for i in 0..c {
                    drow[i] = scale[i] * grow[i];
                }
            }
        }
        dx
    });
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// activations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Relu6,
    HSwish,
    HardSigmoid,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Float>(self, x: T) -> T {
        let six = T::lit(6.0);
        let three = T::lit(3.0);
        let relu6 = |v: T| v.max(T::zero()).min(six);
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Relu6 => relu6(x),
            Activation::HSwish => x * (relu6(x + three) / six),
            Activation::HardSigmoid => relu6(x + three) / six,
            Activation::Sigmoid => sigmoid_scalar(x),
        }
    }

    /// Derivative. At the kinks of h-swish and hard-sigmoid (`x = ±3`) the
    /// interior branch is used.
    pub fn derivative<T: Float>(self, x: T) -> T {
        let three = T::lit(3.0);
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Relu6 => {
                if x > T::zero() && x < T::lit(6.0) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::HSwish => {
                if x < -three {
                    T::zero()
                } else if x > three {
                    T::one()
                } else {
                    (x + x + three) / T::lit(6.0)
                }
            }
            Activation::HardSigmoid => {
                if x < -three || x > three {
                    T::zero()
                } else {
                    T::one() / T::lit(6.0)
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid_scalar(x);
                s * (T::one() - s)
            }
        }
    }
}

pub fn sigmoid_scalar<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activate<T: Float>(x: &Tensor<T>, act: Activation) -> Tensor<T> {
    x.map(|v| act.apply(v))
}

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    activate(x, Activation::Relu)
}

pub fn relu6<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    activate(x, Activation::Relu6)
}

pub fn h_swish<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    activate(x, Activation::HSwish)
}

pub fn hard_sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    activate(x, Activation::HardSigmoid)
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    activate(x, Activation::Sigmoid)
}

// ---------------------------------------------------------------------------
// attention primitives

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows<T: Float>(s: &Tensor<T>) -> Tensor<T> {
    let k = s.shape().c();
    let mut out = s.clone();
    if k == 0 {
        return out;
    }
    out.data_mut().par_chunks_mut(k).for_each(softmax_row);
    out
}

/// `dx = y * (dy - sum(y * dy))` per row.
pub(crate) fn softmax_rows_backward<T: Float>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let k = y.shape().c();
    let mut dx = Tensor::zeros(y.shape());
    dx.data_mut()
        .par_chunks_mut(k)
        .zip(y.data().par_chunks(k).zip(dy.data().par_chunks(k)))
        .for_each(|(d, (yr, gr))| {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for ((dv, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
                *dv = yv * (gv - dot);
            }
        });
    dx
}

fn matrix_batch<T: Float>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.h() != 1 {
        return Err(Error::Dimension(format!(
            "{what} must be a batch of matrices (n,1,rows,cols), got {s}"
        )));
    }
    Ok((s.n(), s.w(), s.c()))
}

/// Per-item `o = beta * h` for `beta: (n,1,L,L)` and `h: (n,1,L,c)`.
pub fn batchdot<T: Float>(beta: &Tensor<T>, hflat: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, q, k) = matrix_batch(beta, "attention map")?;
    let (hn, l, c) = matrix_batch(hflat, "value features")?;
    if hn != n || k != l {
        return Err(Error::Dimension(format!(
            "inner axis: attention map {} cannot multiply values {}",
            beta.shape(),
            hflat.shape()
        )));
    }
    let mut out = Tensor::zeros(Shape::new(n, 1, q, c));
    out.data_mut()
        .par_chunks_mut(q * c)
        .zip(beta.data().par_chunks(q * k).zip(hflat.data().par_chunks(l * c)))
        .for_each(|(o, (b, h))| {
            T::gemm(q, k, c, T::one(), b, k, 1, h, c, 1, T::zero(), o, c, 1);
        });
    Ok(out)
}

/// Gradients of [`batchdot`]: `(dbeta, dh)`.
pub(crate) fn batchdot_backward<T: Float>(
    beta: &Tensor<T>,
    hflat: &Tensor<T>,
    dout: &Tensor<T>,
    need: (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let s = beta.shape();
    let (n, q, k) = (s.n(), s.w(), s.c());
    let c = hflat.shape().c();
    let dbeta = need.0.then(|| {
        let mut d = Tensor::zeros(s);
        d.data_mut()
            .par_chunks_mut(q * k)
            .zip(dout.data().par_chunks(q * c).zip(hflat.data().par_chunks(k * c)))
            .for_each(|(db, (g, h))| {
                // dbeta = dout * h^T
                T::gemm(q, c, k, T::one(), g, c, 1, h, 1, c, T::zero(), db, k, 1);
            });
        d
    });
    let dh = need.1.then(|| {
        let mut d = Tensor::zeros(hflat.shape());
        d.data_mut()
            .par_chunks_mut(k * c)
            .zip(beta.data().par_chunks(q * k).zip(dout.data().par_chunks(q * c)))
            .for_each(|(dh, (b, g))| {
                // dh = beta^T * dout
                T::gemm(k, q, c, T::one(), b, 1, k, g, c, 1, T::zero(), dh, c, 1);
            });
        d
    });
    let _ = n;
    (dbeta, dh)
}

/// Attention energies `s[j, i] = g_j . f_i` for query features `g` and key
/// features `f`, both `(n,1,L,d)`.
pub fn energies<T: Float>(g: &Tensor<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, lq, d) = matrix_batch(g, "query features")?;
    let (fnn, lk, fd) = matrix_batch(f, "key features")?;
    if fnn != n || fd != d {
        return Err(Error::Dimension(format!(
            "feature axis: queries {} and keys {} disagree",
            g.shape(),
            f.shape()
        )));
    }
    let mut out = Tensor::zeros(Shape::new(n, 1, lq, lk));
    out.data_mut()
        .par_chunks_mut(lq * lk)
        .zip(g.data().par_chunks(lq * d).zip(f.data().par_chunks(lk * d)))
        .for_each(|(s, (gq, fk))| {
            let ft = transpose(fk, lk, d);
            energy_rows(gq, &ft, d, lk, s);
        });
    Ok(out)
}

/// Gradients of [`energies`]: `(dg, df)`.
pub(crate) fn energies_backward<T: Float>(
    g: &Tensor<T>,
    f: &Tensor<T>,
    ds: &Tensor<T>,
    need: (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (lq, d) = (g.shape().w(), g.shape().c());
    let lk = f.shape().w();
    let dg = need.0.then(|| {
        let mut out = Tensor::zeros(g.shape());
        out.data_mut()
            .par_chunks_mut(lq * d)
            .zip(ds.data().par_chunks(lq * lk).zip(f.data().par_chunks(lk * d)))
            .for_each(|(o, (s, fk))| {
                T::gemm(lq, lk, d, T::one(), s, lk, 1, fk, d, 1, T::zero(), o, d, 1);
            });
        out
    });
    let df = need.1.then(|| {
        let mut out = Tensor::zeros(f.shape());
        out.data_mut()
            .par_chunks_mut(lk * d)
            .zip(ds.data().par_chunks(lq * lk).zip(g.data().par_chunks(lq * d)))
            .for_each(|(o, (s, gq))| {
                T::gemm(lk, lq, d, T::one(), s, 1, lk, gq, d, 1, T::zero(), o, d, 1);
            });
        out
    });
    (dg, df)
}

/// Rows of the attention map processed together by the fused kernels.
const ROW_BLOCK: usize = 64;

/// Energies of query rows `gq` (`rows x d`) against transposed keys `ft`
/// (`d x lk`), written into `s` (`rows x lk`).
fn energy_rows<T: Float>(gq: &[T], ft: &[T], d: usize, lk: usize, s: &mut [T]) {
    if d > 16 {
        let rows = gq.len() / d;
        T::gemm(rows, d, lk, T::one(), gq, d, 1, ft, lk, 1, T::zero(), s, lk, 1);
        return;
    }
    for (row, q) in s.chunks_exact_mut(lk).zip(gq.chunks_exact(d)) {
        row.iter_mut().for_each(|v| *v = T::zero());
        for (k, &qk) in q.iter().enumerate() {
            for (o, &fv) in row.iter_mut().zip(&ft[k * lk..(k + 1) * lk]) {
                *o += qk * fv;
            }
        }
    }
}

fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for (i, row) in a.chunks_exact(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j * rows + i] = v;
        }
    }
    t
}

fn check_attention_inputs<T: Float>(g: &Tensor<T>, f: &Tensor<T>, h: &Tensor<T>) -> Result<()> {
    let (n, _, d) = matrix_batch(g, "query features")?;
    let (fnn, lk, fd) = matrix_batch(f, "key features")?;
    let (hn, hl, _) = matrix_batch(h, "value features")?;
    if fnn != n || fd != d || hn != n || hl != lk {
        return Err(Error::Dimension(format!(
            "attention inputs disagree: queries {}, keys {}, values {}",
            g.shape(),
            f.shape(),
            h.shape()
        )));
    }
    Ok(())
}

/// Attention map rows `start..start + rows` of one batch item into `buf`.
fn attention_rows<T: Float>(gq: &[T], ft: &[T], d: usize, lk: usize, buf: &mut [T]) {
    energy_rows(gq, ft, d, lk, buf);
    for row in buf.chunks_exact_mut(lk) {
        softmax_row(row);
    }
}

/// Fused `batchdot(softmax_rows(energies(g, f)), h)`.
///
/// The attention map is produced a block of rows at a time and never held
/// at full size; the backward pass recomputes it the same way.
pub fn attention_core<T: Float>(g: &Tensor<T>, f: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    check_attention_inputs(g, f, h)?;
    let s = g.shape();
    let (n, lq, d) = (s.n(), s.w(), s.c());
    let (lk, c) = (h.shape().w(), h.shape().c());
    let mut out = Tensor::zeros(Shape::new(n, 1, lq, c));
    out.data_mut()
        .par_chunks_mut(lq * c)
        .zip(g.data().par_chunks(lq * d).zip(f.data().par_chunks(lk * d)).zip(h.data().par_chunks(lk * c)))
        .for_each(|(o, ((gq, fk), hv))| {
            let ft = transpose(fk, lk, d);
            let mut buf = vec![T::zero(); ROW_BLOCK * lk];
            for (ob, qb) in o.chunks_mut(ROW_BLOCK * c).zip(gq.chunks(ROW_BLOCK * d)) {
                let rows = qb.len() / d;
                let b = &mut buf[..rows * lk];
                attention_rows(qb, &ft, d, lk, b);
                T::gemm(rows, lk, c, T::one(), b, lk, 1, hv, c, 1, T::zero(), ob, c, 1);
            }
        });
    Ok(out)
}

/// Exact maximum and sum with eight independent accumulators.
fn lane_max<T: Float>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a = if v > *a { v } else { *a };
        }
    }
    let m = acc.iter().copied().fold(T::neg_infinity(), T::max);
    tail.iter().copied().fold(m, T::max)
}

fn lane_sum<T: Float>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += v;
        }
    }
    acc.iter().copied().sum::<T>() + tail.iter().copied().sum::<T>()
}

fn lane_dot<T: Float>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = xs.chunks_exact(8);
    let yc = ys.chunks_exact(8);
    let tail: T = xc.remainder().iter().zip(yc.remainder()).map(|(&a, &b)| a * b).sum();
    for (cx, cy) in xc.zip(yc) {
        for ((a, &u), &v) in acc.iter_mut().zip(cx).zip(cy) {
            *a += u * v;
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

fn softmax_row<T: Float>(row: &mut [T]) {
    let max = lane_max(row);
    row.iter_mut().for_each(|v| *v -= max);
    T::exp_in_place(row);
    let inv = T::one() / lane_sum(row);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Gradients of [`attention_core`]: `(dg, df, dh)`.
pub(crate) fn attention_core_backward<T: Float>(
    g: &Tensor<T>,
    f: &Tensor<T>,
    h: &Tensor<T>,
    dout: &Tensor<T>,
    need: (bool, bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (lq, d) = (g.shape().w(), g.shape().c());
    let (lk, c) = (h.shape().w(), h.shape().c());
    let mut dg = Tensor::zeros(g.shape());
    let mut df = Tensor::zeros(f.shape());
    let mut dh = Tensor::zeros(h.shape());
    if !(need.0 || need.1 || need.2) {
        return (None, None, None);
    }
    dg.data_mut()
        .par_chunks_mut(lq * d)
        .zip(df.data_mut().par_chunks_mut(lk * d))
        .zip(dh.data_mut().par_chunks_mut(lk * c))
        .zip(
            dout.data()
                .par_chunks(lq * c)
                .zip(g.data().par_chunks(lq * d).zip(f.data().par_chunks(lk * d)))
                .zip(h.data().par_chunks(lk * c)),
        )
        .for_each(|(((dgi, dfi), dhi), ((go, (gq, fk)), hv))| {
            let ft = transpose(fk, lk, d);
            let mut beta = vec![T::zero(); ROW_BLOCK * lk];
            let mut ds = vec![T::zero(); ROW_BLOCK * lk];
            for start in (0..lq).step_by(ROW_BLOCK) {
                let rows = ROW_BLOCK.min(lq - start);
                let b = &mut beta[..rows * lk];
                let ds = &mut ds[..rows * lk];
                let gob = &go[start * c..(start + rows) * c];
                let gqb = &gq[start * d..(start + rows) * d];
                attention_rows(gqb, &ft, d, lk, b);
                if need.2 {
                    // dh += beta^T * dout
                    T::gemm(lk, rows, c, T::one(), b, 1, lk, gob, c, 1, T::one(), dhi, c, 1);
                }
                if !(need.0 || need.1) {
                    continue;
                }
                // dbeta = dout * h^T, then the softmax Jacobian row by row
                T::gemm(rows, c, lk, T::one(), gob, c, 1, hv, 1, c, T::zero(), ds, lk, 1);
                for (drow, brow) in ds.chunks_exact_mut(lk).zip(b.chunks_exact(lk)) {
                    let dot = lane_dot(drow, brow);
                    for (dv, &p) in drow.iter_mut().zip(brow.iter()) {
                        *dv = p * (*dv - dot);
                    }
                }
                if need.0 {
                    let dgb = &mut dgi[start * d..(start + rows) * d];
                    T::gemm(rows, lk, d, T::one(), ds, lk, 1, fk, d, 1, T::zero(), dgb, d, 1);
                }
                if need.1 {
                    T::gemm(lk, rows, d, T::one(), ds, 1, lk, gqb, d, 1, T::one(), dfi, d, 1);
                }
            }
        });
    (need.0.then_some(dg), need.1.then_some(df), need.2.then_some(dh))
}

// ---------------------------------------------------------------------------
// pooling, dense, broadcasting helpers

pub fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let c = s.c();
    let hw = s.h() * s.w();
    let inv = T::one() / T::from_usize(hw.max(1)).unwrap();
    let mut out = Tensor::zeros(Shape::new(s.n(), 1, 1, c));
    for (o, item) in out
        .data_mut()
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(hw * c))
    {
        for row in item.chunks_exact(c) {
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov += v;
            }
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub(crate) fn global_avg_pool_backward<T: Float>(x_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let c = x_shape.c();
    let hw = x_shape.h() * x_shape.w();
    let inv = T::one() / T::from_usize(hw.max(1)).unwrap();
    let mut dx = Tensor::zeros(x_shape);
    for (item, g) in dx
        .data_mut()
        .chunks_exact_mut(hw * c)
        .zip(dy.data().chunks_exact(c))
    {
        for row in item.chunks_exact_mut(c) {
            for (d, &gv) in row.iter_mut().zip(g) {
                *d = gv * inv;
            }
        }
    }
    dx
}

/// Affine map on pooled features: `x: (n,1,1,c)`, `w: (1,1,c,k)`, `b: (1,1,1,k)`.
pub fn dense<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h() != 1 || s.w() != 1 {
        return Err(Error::Dimension(format!(
            "dense expects pooled input (n,1,1,c), got {s}"
        )));
    }
    pointwise_forward(x, w, Some(b), 1)
}

/// `u * s` with `s: (n,1,1,c)` broadcast over spatial positions.
pub(crate) fn channel_gate<T: Float>(u: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let us = u.shape();
    let ss = s.shape();
    if ss != Shape::new(us.n(), 1, 1, us.c()) {
        return Err(Error::Dimension(format!(
            "channel axis: gate {ss} does not broadcast over {us}"
        )));
    }
    let c = us.c();
    let hw = us.h() * us.w();
    let mut out = u.clone();
    for (item, g) in out
        .data_mut()
        .chunks_exact_mut(hw * c)
        .zip(s.data().chunks_exact(c))
    {
        for row in item.chunks_exact_mut(c) {
            for (v, &gv) in row.iter_mut().zip(g) {
                *v *= gv;
            }
        }
    }
    Ok(out)
}

pub(crate) fn channel_gate_backward<T: Float>(
    u: &Tensor<T>,
    s: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let us = u.shape();
    let c = us.c();
    let hw = us.h() * us.w();
    let du = channel_gate(dy, s).expect("shapes checked on forward");
    let mut ds = Tensor::zeros(s.shape());
    for ((d, ui), gi) in ds
        .data_mut()
        .chunks_exact_mut(c)
        .zip(u.data().chunks_exact(hw * c))
        .zip(dy.data().chunks_exact(hw * c))
    {
        for (ur, gr) in ui.chunks_exact(c).zip(gi.chunks_exact(c)) {
            for ((dv, &uv), &gv) in d.iter_mut().zip(ur).zip(gr) {
                *dv += uv * gv;
            }
        }
    }
    (du, ds)
}

/// Concatenation along the channel axis.
pub(crate) fn concat_channels<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n(), sa.h(), sa.w()) != (sb.n(), sb.h(), sb.w()) {
        return Err(Error::Dimension(format!(
            "concat: leading axes of {sa} and {sb} differ"
        )));
    }
    let (ca, cb) = (sa.c(), sb.c());
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks_exact(ca.max(1)).zip(b.data().chunks_exact(cb.max(1))) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Tensor::from_vec(Shape::new(sa.n(), sa.h(), sa.w(), ca + cb), data)
}

pub(crate) fn split_channels<T: Float>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let s = d.shape();
    let cb = s.c() - ca;
    let mut a = Vec::with_capacity(d.len() / s.c() * ca);
    let mut b = Vec::with_capacity(d.len() / s.c() * cb);
    for row in d.data().chunks_exact(s.c()) {
        a.extend_from_slice(&row[..ca]);
        b.extend_from_slice(&row[ca..]);
    }
    (
        Tensor::from_vec(Shape::new(s.n(), s.h(), s.w(), ca), a).unwrap(),
        Tensor::from_vec(Shape::new(s.n(), s.h(), s.w(), cb), b).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn same_padding_shape_law() {
        for (input, out) in [(64, 32), (32, 16), (16, 8), (7, 4), (1, 1)] {
            assert_eq!(same_padding(input, 2, 3).0, out);
            assert_eq!(same_padding(input, 1, 3), (input, 1));
        }
        assert_eq!(same_padding(64, 2, 3).1, 0);
    }

    #[test]
    fn conv1x1_table_shape_and_count() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 8, 8, 128));
        let w = ConvWeights::pointwise(Tensor::zeros(Shape::new(1, 1, 128, 576)), None);
        let y = conv1x1(&x, &w, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 8, 8, 576));
        assert_eq!(w.param_count(), 73_728);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1x1_identity_kernel() {
        let x = t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]);
        let w = ConvWeights::pointwise(t(Shape::new(1, 1, 2, 2), &[1.0, 0.0, 0.0, 1.0]), None);
        assert_eq!(conv1x1(&x, &w, 1).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn conv1x1_stride_two_subsamples() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 4, 4, 1), |[_, h, w, _]| (h * 4 + w) as f64);
        let w = ConvWeights::pointwise(t(Shape::new(1, 1, 1, 1), &[1.0]), None);
        let y = conv1x1(&x, &w, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 2, 1));
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn conv1x1_channel_mismatch_names_axis() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 3));
        let w = ConvWeights::pointwise(Tensor::zeros(Shape::new(1, 1, 4, 2)), None);
        let err = conv1x1(&x, &w, 1).unwrap_err().to_string();
        assert!(err.contains("channel axis"), "{err}");
    }

    #[test]
    fn separable_conv_shapes_and_counts() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 64, 64, 3));
        let w = ConvWeights::separable(
            Tensor::zeros(Shape::new(1, 3, 3, 3)),
            Tensor::zeros(Shape::new(1, 1, 3, 32)),
        );
        assert_eq!(w.param_count(), 123);
        let y = depthwise_separable_conv3x3(&x, &w, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 32, 32, 32));

        let w2 = ConvWeights::<f32>::separable(
            Tensor::zeros(Shape::new(1, 3, 3, 32)),
            Tensor::zeros(Shape::new(1, 1, 32, 64)),
        );
        assert_eq!(w2.param_count(), 2_336);
    }

    #[test]
    fn separable_conv_rejects_stride_three() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 4, 1));
        let w = ConvWeights::separable(
            Tensor::zeros(Shape::new(1, 3, 3, 1)),
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
        );
        assert!(matches!(
            depthwise_separable_conv3x3(&x, &w, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn separable_conv_delta_identity() {
        let c = 3;
        let x = Tensor::<f64>::from_fn(Shape::new(2, 5, 4, c), |[n, h, w, ch]| {
            (n * 7 + h * 3 + w * 5 + ch) as f64 * 0.1 - 1.0
        });
        let mut dk = Tensor::zeros(Shape::new(1, 3, 3, c));
        for ch in 0..c {
            dk.set(0, 1, 1, ch, 1.0);
        }
        let pw = Tensor::from_fn(Shape::new(1, 1, c, c), |[_, _, i, o]| (i == o) as u8 as f64);
        let y = depthwise_separable_conv3x3(&x, &ConvWeights::separable(dk, pw), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn batch_norm_identity_params() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 3, 4), |[n, h, w, c]| {
            (n + h * 2 + w * 3 + c) as f64 - 4.5
        });
        let mut p = BatchNormParams::identity(4, 0.0);
        p.eps = 0.0;
        let (y, stats) = batch_norm(&x, &p, Mode::Infer).unwrap();
        assert!(stats.is_none());
        assert_eq!(y, x);
    }

    #[test]
    fn batch_norm_hand_values() {
        let x = t(Shape::new(1, 1, 2, 1), &[1.0, 3.0]);
        let p = BatchNormParams {
            gamma: vec![2.0],
            beta: vec![1.0],
            moving_mean: vec![2.0],
            moving_var: vec![1.0],
            eps: 0.0,
        };
        let (y, _) = batch_norm(&x, &p, Mode::Infer).unwrap();
        assert_eq!(y.data(), &[-1.0, 3.0]);
        // train mode on the same data: batch mean 2, variance 1
        let (y, stats) = batch_norm(&x, &p, Mode::Train).unwrap();
        assert_eq!(y.data(), &[-1.0, 3.0]);
        assert_eq!(stats.unwrap().var, vec![1.0]);
    }

    #[test]
    fn batch_norm_param_count() {
        assert_eq!(BatchNormParams::<f32>::identity(576, 1e-3).param_count(), 2_304);
        assert_eq!(BatchNormParams::<f32>::identity(32, 1e-3).param_count(), 128);
    }

    #[test]
    fn batch_norm_moving_update() {
        let mut p = BatchNormParams::<f64>::identity(1, 1e-3);
        p.update_moving(
            &BatchStats {
                mean: vec![1.0],
                var: vec![3.0],
            },
            0.99,
        );
        assert!((p.moving_mean[0] - 0.01).abs() < 1e-15);
        assert!((p.moving_var[0] - 1.02).abs() < 1e-15);
    }

    #[test]
    fn activation_values() {
        let a = Activation::HSwish;
        assert_eq!(a.apply(0.0f64), 0.0);
        assert_eq!(a.apply(-3.0f64), 0.0);
        assert_eq!(a.apply(3.0f64), 3.0);
        assert!((a.apply(1.0f64) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(Activation::Relu6.apply(7.0f64), 6.0);
        assert_eq!(Activation::Relu6.apply(-1.0f64), 0.0);
        assert_eq!(Activation::HardSigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert!((Activation::HSwish.derivative(1.0f64) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn activation_ranges() {
        for i in -100..=100 {
            let x = i as f64 * 0.13;
            let r6 = Activation::Relu6.apply(x);
            assert!((0.0..=6.0).contains(&r6));
            let hs = Activation::HardSigmoid.apply(x);
            assert!((0.0..=1.0).contains(&hs));
            let sw = Activation::HSwish.apply(x);
            if x >= 3.0 {
                assert_eq!(sw, x);
            }
            if x <= -3.0 {
                assert_eq!(sw, 0.0);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let s = t(Shape::new(1, 1, 2, 3), &[0.0, 0.0, 0.0, 0.0, 2f64.ln(), 3f64.ln()]);
        let y = softmax_rows(&s);
        for v in &y.data()[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for (v, e) in y.data()[3..].iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let s = t(Shape::new(1, 1, 1, 4), &[0.5, -1.25, 2.0, 0.75]);
        let shifted = s.map(|v| v + 8.0);
        assert_eq!(softmax_rows(&s), softmax_rows(&shifted));
    }

    #[test]
    fn batchdot_examples() {
        let beta = t(Shape::new(1, 1, 2, 2), &[1.0, 0.0, 0.5, 0.5]);
        let h = t(Shape::new(1, 1, 2, 1), &[2.0, 4.0]);
        assert_eq!(batchdot(&beta, &h).unwrap().data(), &[2.0, 3.0]);

        let hflat = t(Shape::new(1, 1, 3, 2), &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let eye = t(
            Shape::new(1, 1, 3, 3),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        assert_eq!(batchdot(&eye, &hflat).unwrap(), hflat);
        let uniform = Tensor::full(Shape::new(1, 1, 3, 3), 1.0 / 3.0);
        let o = batchdot(&uniform, &hflat).unwrap();
        for row in o.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!((row[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batchdot_inner_mismatch() {
        let beta = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 3));
        let h = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 1));
        assert!(matches!(batchdot(&beta, &h), Err(Error::Dimension(_))));
    }

    #[test]
    fn gap_examples() {
        let x = t(Shape::new(1, 2, 2, 1), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
        let c = Tensor::<f32>::full(Shape::new(1, 8, 8, 576), 0.25);
        let p = global_avg_pool(&c);
        assert_eq!(p.shape(), Shape::new(1, 1, 1, 576));
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn dense_examples() {
        let x = t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]);
        let w = t(Shape::new(1, 1, 2, 1), &[1.0, 1.0]);
        let b = t(Shape::new(1, 1, 1, 1), &[0.5]);
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[3.5]);
        let eye = t(Shape::new(1, 1, 2, 2), &[1.0, 0.0, 0.0, 1.0]);
        let zero = Tensor::zeros(Shape::new(1, 1, 1, 2));
        assert_eq!(dense(&x, &eye, &zero).unwrap(), x);
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::<f32>::from_fn(Shape::new(2, 1, 1, 3), |[n, _, _, c]| (n * 3 + c) as f32);
        let b = Tensor::<f32>::from_fn(Shape::new(2, 1, 1, 2), |[n, _, _, c]| -((n * 2 + c) as f32));
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape().c(), 5);
        let (a2, b2) = split_channels(&ab, 3);
        assert_eq!((a2, b2), (a, b));
    }
}

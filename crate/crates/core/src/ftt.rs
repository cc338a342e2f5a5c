//! Self-attention feature extractor over the raw image.
//!
//! Each stage downsamples with a stride-2 depthwise-separable convolution,
//! normalizes, applies ReLU and then a single-head dot-product self-attention
//! module with a learnable residual scale `gamma` (initialized to zero). After
//! the last stage a bias-free 1x1 convolution widens the features to
//! `out_width`, followed by batch norm, ReLU and global average pooling.

use crate::autograd::{BnIds, ParamId, ParamRole, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ParamBreakdown};
use crate::ops::{self, ConvWeights, Mode};
use crate::tensor::{Float, Shape, Tensor};

/// Parameters of one attention module in plain-tensor form.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionParams<T> {
    pub w_f: ConvWeights<T>,
    pub w_g: ConvWeights<T>,
    pub w_h: ConvWeights<T>,
    pub gamma: T,
    pub bottleneck: usize,
}

impl<T: Float> SelfAttentionParams<T> {
    /// Zero weights and biases, `gamma = 0`.
    pub fn zeros(channels: usize, bottleneck: usize) -> Result<Self> {
        check_bottleneck(channels, bottleneck)?;
        let d = channels / bottleneck;
        let conv = |out: usize| {
            ConvWeights::pointwise(
                Tensor::zeros(Shape::new(1, 1, channels, out)),
                Some(Tensor::zeros(Shape::new(1, 1, 1, out))),
            )
        };
        Ok(SelfAttentionParams {
            w_f: conv(d),
            w_g: conv(d),
            w_h: conv(channels),
            gamma: T::zero(),
            bottleneck,
        })
    }

    pub fn param_count(&self) -> usize {
        self.w_f.param_count() + self.w_g.param_count() + self.w_h.param_count() + 1
    }

    /// Attention map `beta: (n,1,L,L)`, rows indexed by output position.
    pub fn attention_map(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (f, g, _) = self.projections(x)?;
        Ok(ops::softmax_rows(&ops::energies(&g, &f)?))
    }

    fn projections(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let s = x.shape();
        check_bottleneck(s.c(), self.bottleneck)?;
        let l = s.h() * s.w();
        let flat = |t: Tensor<T>| {
            let c = t.shape().c();
            t.reshape(Shape::new(s.n(), 1, l, c))
        };
        let f = flat(ops::conv1x1(x, &self.w_f, 1)?)?;
        let g = flat(ops::conv1x1(x, &self.w_g, 1)?)?;
        let h = flat(ops::conv1x1(x, &self.w_h, 1)?)?;
        Ok((f, g, h))
    }

    /// `y = gamma * batchdot(softmax(g f^T), h) + x`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (f, g, h) = self.projections(x)?;
        let beta = ops::softmax_rows(&ops::energies(&g, &f)?);
        let o = ops::batchdot(&beta, &h)?.reshape(s)?;
        let mut y = o.map(|v| self.gamma * v);
        y.add_assign(x);
        Ok(y)
    }
}

/// Free-function form of [`SelfAttentionParams::forward`].
pub fn self_attention_forward<T: Float>(x: &Tensor<T>, p: &SelfAttentionParams<T>) -> Result<Tensor<T>> {
    p.forward(x)
}

fn check_bottleneck(channels: usize, bottleneck: usize) -> Result<()> {
    if bottleneck == 0 || channels % bottleneck != 0 || channels < bottleneck {
        return Err(Error::Config(format!(
            "channel count {channels} is not divisible by bottleneck ratio {bottleneck}"
        )));
    }
    Ok(())
}

/// `2 (c c/b + c/b) + (c^2 + c) + 1`.
pub fn attention_param_count(channels: usize, bottleneck: usize) -> usize {
    let d = channels / bottleneck;
    2 * (channels * d + d) + channels * channels + channels + 1
}

/// Attention module registered in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub channels: usize,
    pub bottleneck: usize,
    pub f_w: ParamId,
    pub f_b: ParamId,
    pub g_w: ParamId,
    pub g_b: ParamId,
    pub h_w: ParamId,
    pub h_b: ParamId,
    pub gamma: ParamId,
}

impl SelfAttention {
    pub fn register<T: Float>(store: &mut ParamStore<T>, prefix: &str, channels: usize, bottleneck: usize) -> Result<Self> {
        check_bottleneck(channels, bottleneck)?;
        let d = channels / bottleneck;
        Ok(SelfAttention {
            channels,
            bottleneck,
            f_w: nn::pointwise(store, format!("{prefix}.f.w"), channels, d)?,
            f_b: nn::bias(store, format!("{prefix}.f.b"), d)?,
            g_w: nn::pointwise(store, format!("{prefix}.g.w"), channels, d)?,
            g_b: nn::bias(store, format!("{prefix}.g.b"), d)?,
            h_w: nn::pointwise(store, format!("{prefix}.h.w"), channels, channels)?,
            h_b: nn::bias(store, format!("{prefix}.h.b"), channels)?,
            gamma: store.add(format!("{prefix}.gamma"), Tensor::scalar(T::zero()), ParamRole::AttentionGamma)?,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.c() != self.channels {
            return Err(Error::Dimension(format!(
                "channel axis: attention expects {} channels, got {}",
                self.channels,
                s.c()
            )));
        }
        let l = s.h() * s.w();
        let d = self.channels / self.bottleneck;
        let project = |tape: &mut Tape<'_, T>, w: ParamId, b: ParamId, width: usize| -> Result<Var> {
            let wv = tape.param(w);
            let bv = tape.param(b);
            let y = tape.conv1x1(x, wv, Some(bv), 1)?;
            tape.reshape(y, Shape::new(s.n(), 1, l, width))
        };
        let f = project(tape, self.f_w, self.f_b, d)?;
        let g = project(tape, self.g_w, self.g_b, d)?;
        let h = project(tape, self.h_w, self.h_b, self.channels)?;
        let o = tape.attention_core(g, f, h)?;
        let o = tape.reshape(o, s)?;
        let gamma = tape.param(self.gamma);
        let scaled = tape.scale(o, gamma)?;
        tape.add(scaled, x)
    }

    /// Copies the registered values into plain-tensor form.
    pub fn params<T: Float>(&self, store: &ParamStore<T>) -> SelfAttentionParams<T> {
        let conv = |w: ParamId, b: ParamId| {
            ConvWeights::pointwise(store.value(w).clone(), Some(store.value(b).clone()))
        };
        SelfAttentionParams {
            w_f: conv(self.f_w, self.f_b),
            w_g: conv(self.g_w, self.g_b),
            w_h: conv(self.h_w, self.h_b),
            gamma: store.value(self.gamma).data()[0],
            bottleneck: self.bottleneck,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FttConfig {
    pub m: usize,
    pub bottleneck: usize,
    pub stage_widths: Vec<usize>,
    pub out_width: usize,
    pub in_channels: usize,
}

impl Default for FttConfig {
    fn default() -> Self {
        FttConfig::with_stages(3)
    }
}

impl FttConfig {
    /// `m` stages with widths `32, 64, 128, ...`.
    pub fn with_stages(m: usize) -> Self {
        FttConfig {
            m,
            bottleneck: 8,
            stage_widths: (0..m).map(|k| 32 << k).collect(),
            out_width: 576,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Config("transformer stage count must be at least 1".into()));
        }
        if self.stage_widths.len() != self.m {
            return Err(Error::Config(format!(
                "{} stage widths given for {} stages",
                self.stage_widths.len(),
                self.m
            )));
        }
        for pair in self.stage_widths.windows(2) {
            if pair[1] != 2 * pair[0] {
                return Err(Error::Config(format!(
                    "stage widths must double per stage, got {:?}",
                    self.stage_widths
                )));
            }
        }
        for &w in &self.stage_widths {
            check_bottleneck(w, self.bottleneck)?;
        }
        Ok(())
    }

    pub fn last_width(&self) -> usize {
        *self.stage_widths.last().expect("validated config has stages")
    }
}

/// Per-layer counts and the total, following the tabular convention of four
/// values per batch-norm channel.
pub fn ftt_param_count(cfg: &FttConfig) -> ParamBreakdown {
    let mut t = ParamBreakdown::new(format!("Fine-tune transformer (M={}, b={})", cfg.m, cfg.bottleneck));
    let mut c_in = cfg.in_channels;
    for (i, &w) in cfg.stage_widths.iter().enumerate() {
        let s = i + 1;
        t.push(format!("ftt.stage{s}.dconv"), "3x3 DConv s2", 9 * c_in + c_in * w, w);
        t.push(format!("ftt.stage{s}.bn"), "BN", 4 * w, w);
        t.push(format!("ftt.stage{s}.relu"), "ReLU", 0, w);
        t.push(format!("ftt.stage{s}.attn"), "self-attention", attention_param_count(w, cfg.bottleneck), w);
        c_in = w;
    }
    t.push("ftt.head.conv", "1x1 Conv", c_in * cfg.out_width, cfg.out_width);
    t.push("ftt.head.bn", "BN", 4 * cfg.out_width, cfg.out_width);
    t.push("ftt.head.relu", "ReLU", 0, cfg.out_width);
    t.push("ftt.head.gap", "GAP", 0, cfg.out_width);
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct FttStage {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bn: BnIds,
    pub attention: SelfAttention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ftt {
    pub cfg: FttConfig,
    pub stages: Vec<FttStage>,
    pub head_conv: ParamId,
    pub head_bn: BnIds,
}

impl Ftt {
    pub fn register<T: Float>(store: &mut ParamStore<T>, prefix: &str, cfg: FttConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.m);
        let mut c_in = cfg.in_channels;
        for (i, &w) in cfg.stage_widths.iter().enumerate() {
            let p = format!("{prefix}.stage{}", i + 1);
            stages.push(FttStage {
                depthwise: nn::depthwise(store, format!("{p}.dconv.depthwise"), c_in)?,
                pointwise: nn::pointwise(store, format!("{p}.dconv.pointwise"), c_in, w)?,
                bn: BnIds::register(store, &format!("{p}.bn"), w)?,
                attention: SelfAttention::register(store, &format!("{p}.attn"), w, cfg.bottleneck)?,
            });
            c_in = w;
        }
        let head_conv = nn::pointwise(store, format!("{prefix}.head.conv.w"), c_in, cfg.out_width)?;
        let head_bn = BnIds::register(store, &format!("{prefix}.head.bn"), cfg.out_width)?;
        Ok(Ftt {
            cfg,
            stages,
            head_conv,
            head_bn,
        })
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if s.c() != self.cfg.in_channels {
            return Err(Error::Dimension(format!(
                "channel axis: transformer expects {} input channels, got {}",
                self.cfg.in_channels,
                s.c()
            )));
        }
        let div = 1usize << self.cfg.m;
        if s.h() % div != 0 || s.w() % div != 0 || s.h() == 0 || s.w() == 0 {
            return Err(Error::Dimension(format!(
                "spatial axes: input {}x{} is not divisible by {div}",
                s.h(),
                s.w()
            )));
        }
        Ok(())
    }

    /// Pooled `(n,1,1,out_width)` features. `trace` receives the shape after
    /// every layer when given.
    pub fn forward_traced<T: Float>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        mode: Mode,
        mut trace: Option<&mut Vec<(String, Shape)>>,
    ) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let mut record = |name: String, v: Var, tape: &Tape<'_, T>| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name, tape.shape(v)));
            }
        };
        let mut h = x;
        for (i, st) in self.stages.iter().enumerate() {
            let s = i + 1;
            let dw = tape.param(st.depthwise);
            let pw = tape.param(st.pointwise);
            h = tape.separable3x3(h, dw, pw, 2)?;
            record(format!("stage{s}.dconv"), h, tape);
            h = tape.batch_norm(h, st.bn, mode)?;
            h = tape.relu(h);
            h = st.attention.forward(tape, h)?;
            record(format!("stage{s}.attn"), h, tape);
        }
        let w = tape.param(self.head_conv);
        h = tape.conv1x1(h, w, None, 1)?;
        record("head.conv".into(), h, tape);
        h = tape.batch_norm(h, self.head_bn, mode)?;
        h = tape.relu(h);
        h = tape.global_avg_pool(h);
        record("head.gap".into(), h, tape);
        Ok(h)
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        self.forward_traced(tape, x, mode, None)
    }
}

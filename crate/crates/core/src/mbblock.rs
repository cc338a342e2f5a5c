//! Inverted-residual block with squeeze-and-excitation gating.
//!
//! expand 1x1 -> BN -> h-swish -> depthwise 3x3 -> BN -> SE gate -> h-swish
//! -> project 1x1 -> BN (linear) -> residual add when the shapes allow it.

use crate::autograd::{BnIds, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ParamBreakdown};
use crate::ops::{self, Activation, ConvWeights, Mode};
use crate::tensor::{Float, Tensor};

/// Squeeze-and-excitation weights in plain-tensor form.
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlockParams<T> {
    pub w_reduce: ConvWeights<T>,
    pub w_expand: ConvWeights<T>,
}

impl<T: Float> SeBlockParams<T> {
    pub fn param_count(&self) -> usize {
        self.w_reduce.param_count() + self.w_expand.param_count()
    }

    /// Channel gate `s = hard_sigmoid(expand(relu(reduce(gap(u)))))`, `(n,1,1,c)`.
    pub fn gate(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = ops::global_avg_pool(u);
        let z = ops::relu(&ops::conv1x1(&pooled, &self.w_reduce, 1)?);
        let e = ops::conv1x1(&z, &self.w_expand, 1)?;
        if e.shape().c() != u.shape().c() {
            return Err(Error::Dimension(format!(
                "channel axis: excitation emits {} channels for a {}-channel input",
                e.shape().c(),
                u.shape().c()
            )));
        }
        Ok(ops::hard_sigmoid(&e))
    }
}

/// `u * gate(u)` broadcast over spatial positions.
pub fn se_block_forward<T: Float>(u: &Tensor<T>, p: &SeBlockParams<T>) -> Result<Tensor<T>> {
    let s = p.gate(u)?;
    ops::channel_gate(u, &s)
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MbBlockConfig {
    pub c_in: usize,
    pub expand_width: usize,
    pub se_width: usize,
    pub out_width: usize,
    pub stride: usize,
    pub residual: bool,
}

impl MbBlockConfig {
    /// Expansion to 576, SE bottleneck 144, projection to 128.
    pub fn new(c_in: usize, stride: usize) -> Self {
        MbBlockConfig {
            c_in,
            expand_width: 576,
            se_width: 144,
            out_width: 128,
            stride,
            residual: stride == 1 && c_in == 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!("block stride must be 1 or 2, got {}", self.stride)));
        }
        if self.residual && (self.stride != 1 || self.c_in != self.out_width) {
            return Err(Error::Config(format!(
                "residual add needs stride 1 and matching widths, got stride {} and {} -> {}",
                self.stride, self.c_in, self.out_width
            )));
        }
        if [self.c_in, self.expand_width, self.se_width, self.out_width].contains(&0) {
            return Err(Error::Config("block widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer counts, four values per batch-norm channel.
pub fn mbblock_param_count(cfg: &MbBlockConfig) -> ParamBreakdown {
    let (e, s, o) = (cfg.expand_width, cfg.se_width, cfg.out_width);
    let mut t = ParamBreakdown::new(format!("MBblockV3 (c_in={}, stride={})", cfg.c_in, cfg.stride));
    t.push("mb.expand", "1x1 Conv", cfg.c_in * e, e);
    t.push("mb.bn1", "BN", 4 * e, e);
    t.push("mb.hswish1", "h-swish", 0, e);
    t.push("mb.dw", "3x3 DConv", 9 * e, e);
    t.push("mb.bn2", "BN", 4 * e, e);
    t.push("mb.se.gap", "GAP", 0, e);
    t.push("mb.se.reduce", "1x1 Conv", e * s, s);
    t.push("mb.se.relu", "ReLU", 0, s);
    t.push("mb.se.expand", "1x1 Conv", s * e, e);
    t.push("mb.se.gate", "hard-sigmoid", 0, e);
    t.push("mb.se.mul", "Multiply", 0, e);
    t.push("mb.hswish2", "h-swish", 0, e);
    t.push("mb.project", "1x1 Conv", e * o, o);
    t.push("mb.linear", "Linear", 0, o);
    t.push("mb.bn3", "BN", 4 * o, o);
    if cfg.residual {
        t.push("mb.add", "Add", 0, o);
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub reduce: ParamId,
    pub expand: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbBlock {
    pub cfg: MbBlockConfig,
    pub expand: ParamId,
    pub bn1: BnIds,
    pub depthwise: ParamId,
    pub bn2: BnIds,
    pub se: SeBlock,
    pub project: ParamId,
    pub bn3: BnIds,
}

impl MbBlock {
    pub fn register<T: Float>(store: &mut ParamStore<T>, prefix: &str, cfg: MbBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let (e, s, o) = (cfg.expand_width, cfg.se_width, cfg.out_width);
        Ok(MbBlock {
            expand: nn::pointwise(store, format!("{prefix}.expand.w"), cfg.c_in, e)?,
            bn1: BnIds::register(store, &format!("{prefix}.bn1"), e)?,
            depthwise: nn::depthwise(store, format!("{prefix}.dw.w"), e)?,
            bn2: BnIds::register(store, &format!("{prefix}.bn2"), e)?,
            se: SeBlock {
                reduce: nn::pointwise(store, format!("{prefix}.se.reduce.w"), e, s)?,
                expand: nn::pointwise(store, format!("{prefix}.se.expand.w"), s, e)?,
            },
            project: nn::pointwise(store, format!("{prefix}.project.w"), e, o)?,
            bn3: BnIds::register(store, &format!("{prefix}.bn3"), o)?,
            cfg,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(x);
        if s.c() != self.cfg.c_in {
            return Err(Error::Dimension(format!(
                "channel axis: block expects {} channels, got {}",
                self.cfg.c_in,
                s.c()
            )));
        }
        let w = tape.param(self.expand);
        let mut h = tape.conv1x1(x, w, None, 1)?;
        h = tape.batch_norm(h, self.bn1, mode)?;
        h = tape.h_swish(h);
        let k = tape.param(self.depthwise);
        h = tape.depthwise3x3(h, k, self.cfg.stride)?;
        h = tape.batch_norm(h, self.bn2, mode)?;

        let pooled = tape.global_avg_pool(h);
        let wr = tape.param(self.se.reduce);
        let z = tape.conv1x1(pooled, wr, None, 1)?;
        let z = tape.relu(z);
        let we = tape.param(self.se.expand);
        let z = tape.conv1x1(z, we, None, 1)?;
        let gate = tape.activation(z, Activation::HardSigmoid);
        h = tape.channel_gate(h, gate)?;

        h = tape.h_swish(h);
        let wp = tape.param(self.project);
        h = tape.conv1x1(h, wp, None, 1)?;
        h = tape.batch_norm(h, self.bn3, mode)?;
        if self.cfg.residual {
            h = tape.add(h, x)?;
        }
        Ok(h)
    }

    pub fn se_params<T: Float>(&self, store: &ParamStore<T>) -> SeBlockParams<T> {
        SeBlockParams {
            w_reduce: ConvWeights::pointwise(store.value(self.se.reduce).clone(), None),
            w_expand: ConvWeights::pointwise(store.value(self.se.expand).clone(), None),
        }
    }
}

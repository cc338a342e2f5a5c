//! Toy backbone, detector assembly and the pretraining classifier.
//!
//! The detector runs two branches on the same image: the transformer on the
//! raw pixels, and the (frozen) backbone followed by `N` inverted-residual
//! blocks. Both branches are pooled, concatenated and fed to a one-logit head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BnIds, ParamId, ParamRole, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::ftt::{ftt_param_count, Ftt, FttConfig};
use crate::mbblock::{mbblock_param_count, MbBlock, MbBlockConfig};
use crate::nn::{self, ParamBreakdown};
use crate::ops::{self, Mode};
use crate::tensor::{Float, Shape, Tensor};

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: String,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    /// Four stages ending at `(n,8,8,128)` for 64x64 input.
    fn default() -> Self {
        BackboneConfig {
            kind: "toy".into(),
            widths: vec![16, 32, 64, 128],
            strides: vec![2, 2, 2, 1],
            in_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "backbone needs one stride per stage, got {} widths and {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if let Some(s) = self.strides.iter().find(|&&s| s != 1 && s != 2) {
            return Err(Error::Config(format!("backbone stride must be 1 or 2, got {s}")));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_channels)
    }

    pub fn out_spatial(&self, input: usize) -> usize {
        self.strides.iter().fold(input, |s, &st| s.div_ceil(st))
    }
}

pub fn backbone_param_count(cfg: &BackboneConfig) -> ParamBreakdown {
    let mut t = ParamBreakdown::new(format!("Toy backbone ({} stages)", cfg.widths.len()));
    let mut c_in = cfg.in_channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        let s = i + 1;
        t.push(format!("backbone.stage{s}.dconv"), "3x3 DConv", 9 * c_in + c_in * w, w);
        t.push(format!("backbone.stage{s}.bn"), "BN", 4 * w, w);
        t.push(format!("backbone.stage{s}.relu"), "ReLU", 0, w);
        c_in = w;
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneStage {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bn: BnIds,
    pub stride: usize,
}

/// Stack of `[separable 3x3 -> BN -> ReLU]` stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub cfg: BackboneConfig,
    pub stages: Vec<BackboneStage>,
}

impl ToyBackbone {
    pub fn register<T: Float>(store: &mut ParamStore<T>, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, (&w, &stride)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
            let p = format!("backbone.stage{}", i + 1);
            stages.push(BackboneStage {
                depthwise: nn::depthwise(store, format!("{p}.dconv.depthwise"), c_in)?,
                pointwise: nn::pointwise(store, format!("{p}.dconv.pointwise"), c_in, w)?,
                bn: BnIds::register(store, &format!("{p}.bn"), w)?,
                stride,
            });
            c_in = w;
        }
        Ok(ToyBackbone { cfg, stages })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let c = tape.shape(x).c();
        if c != self.cfg.in_channels {
            return Err(Error::Dimension(format!(
                "channel axis: backbone expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let mut h = x;
        for st in &self.stages {
            let dw = tape.param(st.depthwise);
            let pw = tape.param(st.pointwise);
            h = tape.separable3x3(h, dw, pw, st.stride)?;
            h = tape.batch_norm(h, st.bn, mode)?;
            h = tape.relu(h);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    Zeros,
    HeUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub m: usize,
    pub n_blocks: usize,
    pub ftt: FttConfig,
    pub backbone: BackboneConfig,
    pub expand_width: usize,
    pub se_width: usize,
    pub block_width: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub ftt_enabled: bool,
    pub head_init: HeadInit,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(3, 4)
    }
}

impl ModelConfig {
    pub fn new(m: usize, n_blocks: usize) -> Self {
        ModelConfig {
            m,
            n_blocks,
            ftt: FttConfig::with_stages(m),
            backbone: BackboneConfig::default(),
            expand_width: 576,
            se_width: 144,
            block_width: 128,
            bn_eps: 1e-3,
            bn_momentum: 0.99,
            ftt_enabled: true,
            head_init: HeadInit::Zeros,
            input_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n_blocks < 1 {
            return Err(Error::Config(format!(
                "stage and block counts must be at least 1, got m={} n={}",
                self.m, self.n_blocks
            )));
        }
        if self.ftt.m != self.m {
            return Err(Error::Config(format!(
                "transformer config has {} stages but m={}",
                self.ftt.m, self.m
            )));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "bad batch-norm settings eps={} momentum={}",
                self.bn_eps, self.bn_momentum
            )));
        }
        self.ftt.validate()?;
        self.backbone.validate()
    }

    pub fn block_config(&self, index: usize) -> MbBlockConfig {
        let c_in = if index == 0 { self.backbone.out_channels() } else { self.block_width };
        MbBlockConfig {
            c_in,
            expand_width: self.expand_width,
            se_width: self.se_width,
            out_width: self.block_width,
            stride: 1,
            residual: c_in == self.block_width,
        }
    }

    pub fn head_inputs(&self) -> usize {
        self.ftt.out_width + self.block_width
    }
}

/// He-uniform fan-in initialization for weight tensors, deterministic in
/// store order. Other roles keep their registered values.
pub fn he_uniform_init<T: Float>(store: &mut ParamStore<T>, seed: u64, skip: &[ParamId]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.role != ParamRole::Weight || skip.contains(&id) {
            continue;
        }
        let s = p.value.shape();
        // depthwise kernels are (1,3,3,c), matrices (1,1,cin,cout)
        let fan_in = if s.h() == 3 { 9 } else { s.w() };
        let limit = (6.0 / fan_in as f64).sqrt();
        for v in p.value.data_mut() {
            *v = T::lit(rng.gen_range(-limit..limit));
        }
    }
}

/// Anything `train_loop` can fit: a parameter store plus a logit graph.
pub trait Classifier<T: Float> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    fn bn_eps(&self) -> f64;
    fn bn_momentum(&self) -> f64;
    /// `(n,1,1,1)` logits.
    fn logits(&self, tape: &mut Tape<'_, T>, x: Var, mode: Mode) -> Result<Var>;

    /// Inference-mode logits of a batch.
    fn infer_logits(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new(self.store()).with_bn_eps(T::lit(self.bn_eps()));
        let v = tape.input(x.clone());
        let out = self.logits(&mut tape, v, Mode::Infer)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Sigmoid probabilities that each image is fake.
    fn predict_proba(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.infer_logits(x)?.into_iter().map(ops::sigmoid_scalar).collect())
    }
}

/// The assembled detector.
#[derive(Debug, Clone)]
pub struct DetectorModel<T: Float> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: ToyBackbone,
    pub ftt: Ftt,
    pub blocks: Vec<MbBlock>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    backbone_frozen: bool,
}

impl<T: Float> DetectorModel<T> {
    /// Registers every parameter, initializes from `seed` and freezes the
    /// backbone.
    pub fn assemble(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::build(cfg)?;
        let skip = match model.cfg.head_init {
            HeadInit::Zeros => vec![model.head_w],
            HeadInit::HeUniform => vec![],
        };
        he_uniform_init(&mut model.store, seed, &skip);
        Ok(model)
    }

    /// Registers parameters with their structural defaults only (all
    /// weights zero).
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = ToyBackbone::register(&mut store, cfg.backbone.clone())?;
        let ftt = Ftt::register(&mut store, "ftt", cfg.ftt.clone())?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| MbBlock::register(&mut store, &format!("mbblock{}", i + 1), cfg.block_config(i)))
            .collect::<Result<Vec<_>>>()?;
        let head_w = nn::pointwise(&mut store, "head.w".into(), cfg.head_inputs(), 1)?;
        let head_b = nn::bias(&mut store, "head.b".into(), 1)?;
        let mut model = DetectorModel {
            cfg,
            store,
            backbone,
            ftt,
            blocks,
            head_w,
            head_b,
            backbone_frozen: false,
        };
        model.freeze_backbone(true);
        model.set_ftt_enabled(model.cfg.ftt_enabled);
        Ok(model)
    }

    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.store.set_trainable(BACKBONE_PREFIX, !frozen);
        self.backbone_frozen = frozen;
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone_frozen
    }

    /// With the transformer disabled its features are replaced by zeros and
    /// its parameters stop training.
    pub fn set_ftt_enabled(&mut self, enabled: bool) {
        self.cfg.ftt_enabled = enabled;
        self.store.set_trainable("ftt.", enabled);
    }

    fn module_prefixes(&self) -> [(&'static str, bool); 4] {
        [
            (BACKBONE_PREFIX, !self.backbone_frozen),
            ("ftt.", self.cfg.ftt_enabled),
            ("mbblock", true),
            ("head.", true),
        ]
    }

    /// Parameters of trainable modules, counting four per batch-norm channel.
    pub fn trainable_count(&self) -> usize {
        self.module_prefixes()
            .iter()
            .filter(|(_, on)| *on)
            .map(|(p, _)| self.store.count(p))
            .sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.store.count("") - self.trainable_count()
    }

    pub fn backbone_checksum(&self) -> u32 {
        self.store.checksum(BACKBONE_PREFIX)
    }

    /// Per-module tables computed from the configuration alone.
    pub fn breakdowns(&self) -> Vec<ParamBreakdown> {
        let mut out = vec![backbone_param_count(&self.cfg.backbone), ftt_param_count(&self.cfg.ftt)];
        for (i, b) in self.blocks.iter().enumerate() {
            let mut t = mbblock_param_count(&b.cfg);
            t.title = format!("mbblock{} {}", i + 1, t.title);
            out.push(t);
        }
        let mut head = ParamBreakdown::new("Classification head");
        head.push("head.concat", "Concat", 0, self.cfg.head_inputs());
        head.push("head.dense", "Dense", self.cfg.head_inputs() + 1, 1);
        out.push(head);
        out
    }

    /// Copies every `backbone.*` tensor of `other` by name.
    pub fn load_backbone_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            if !name.starts_with(BACKBONE_PREFIX) {
                continue;
            }
            let src = other
                .id(&name)
                .ok_or_else(|| Error::Config(format!("backbone weights lack tensor {name}")))?;
            let v = other.value(src);
            if v.shape() != self.store.value(id).shape() {
                return Err(Error::Dimension(format!(
                    "tensor {name}: backbone file has shape {}, model expects {}",
                    v.shape(),
                    self.store.value(id).shape()
                )));
            }
            self.store.get_mut(id).value = v.clone();
        }
        Ok(())
    }

    /// Pooled backbone-branch features `(n,1,1,block_width)`.
    fn block_branch(&self, tape: &mut Tape<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let bb_mode = if self.backbone_frozen { Mode::Infer } else { mode };
        let mut h = self.backbone.forward(tape, x, bb_mode)?;
        for b in &self.blocks {
            h = b.forward(tape, h, mode)?;
        }
        Ok(tape.global_avg_pool(h))
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if s.c() != self.cfg.backbone.in_channels || s.h() == 0 || s.w() == 0 {
            return Err(Error::Dimension(format!(
                "input must be (n,h,w,{}) images, got {s}",
                self.cfg.backbone.in_channels
            )));
        }
        Ok(())
    }
}

impl<T: Float> Classifier<T> for DetectorModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn bn_eps(&self) -> f64 {
        self.cfg.bn_eps
    }

    fn bn_momentum(&self) -> f64 {
        self.cfg.bn_momentum
    }

    fn logits(&self, tape: &mut Tape<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(x);
        self.check_input(s)?;
        let v1 = if self.cfg.ftt_enabled {
            self.ftt.forward(tape, x, mode)?
        } else {
            tape.input(Tensor::zeros(Shape::new(s.n(), 1, 1, self.cfg.ftt.out_width)))
        };
        let v2 = self.block_branch(tape, x, mode)?;
        let feats = tape.concat_channels(v1, v2)?;
        let w = tape.param(self.head_w);
        let b = tape.param(self.head_b);
        tape.dense(feats, w, b)
    }
}

/// Backbone with a temporary GAP + dense head, used to produce the frozen
/// feature extractor.
#[derive(Debug, Clone)]
pub struct PretrainModel<T: Float> {
    pub store: ParamStore<T>,
    pub backbone: ToyBackbone,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl<T: Float> PretrainModel<T> {
    pub fn assemble(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = ToyBackbone::register(&mut store, cfg)?;
        let c = backbone.cfg.out_channels();
        let head_w = nn::pointwise(&mut store, "pretrain_head.w".into(), c, 1)?;
        let head_b = nn::bias(&mut store, "pretrain_head.b".into(), 1)?;
        he_uniform_init(&mut store, seed, &[]);
        Ok(PretrainModel {
            store,
            backbone,
            head_w,
            head_b,
            bn_eps: 1e-3,
            bn_momentum: 0.99,
        })
    }
}

impl<T: Float> Classifier<T> for PretrainModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn bn_eps(&self) -> f64 {
        self.bn_eps
    }

    fn bn_momentum(&self) -> f64 {
        self.bn_momentum
    }

    fn logits(&self, tape: &mut Tape<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.backbone.forward(tape, x, mode)?;
        let pooled = tape.global_avg_pool(h);
        let w = tape.param(self.head_w);
        let b = tape.param(self.head_b);
        tape.dense(pooled, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_trainable_total() {
        let m = DetectorModel::<f32>::build(ModelConfig::default()).unwrap();
        assert_eq!(m.trainable_count(), 115_318 + 4 * 323_648 + 705);
        assert_eq!(m.trainable_count(), 1_410_615);
        assert_eq!(m.frozen_count(), m.store.count(BACKBONE_PREFIX));
        assert_eq!(m.frozen_count(), backbone_param_count(&m.cfg.backbone).total());
        let table_sum: usize = m.breakdowns().iter().map(|t| t.total()).sum();
        assert_eq!(table_sum, m.store.count(""));
    }

    #[test]
    fn two_blocks_remove_two_block_counts() {
        let four = DetectorModel::<f32>::build(ModelConfig::new(3, 4)).unwrap();
        let two = DetectorModel::<f32>::build(ModelConfig::new(3, 2)).unwrap();
        assert_eq!(four.trainable_count() - two.trainable_count(), 2 * 323_648);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(DetectorModel::<f32>::build(ModelConfig::new(3, 0)), Err(Error::Config(_))));
        let mut cfg = ModelConfig::new(1, 1);
        cfg.m = 0;
        cfg.ftt = FttConfig::with_stages(0);
        assert!(matches!(DetectorModel::<f32>::build(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn toy_backbone_shape() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.out_spatial(64), 8);
        let mut store = ParamStore::<f32>::new();
        let bb = ToyBackbone::register(&mut store, cfg).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(Shape::new(2, 64, 64, 3)));
        let y = bb.forward(&mut tape, x, Mode::Infer).unwrap();
        assert_eq!(tape.shape(y), Shape::new(2, 8, 8, 128));
    }

    #[test]
    fn freeze_is_idempotent() {
        let mut m = DetectorModel::<f32>::build(ModelConfig::new(1, 1)).unwrap();
        m.freeze_backbone(true);
        let once: Vec<bool> = m.store.iter().map(|(_, p)| p.trainable).collect();
        m.freeze_backbone(true);
        let twice: Vec<bool> = m.store.iter().map(|(_, p)| p.trainable).collect();
        assert_eq!(once, twice);
        m.freeze_backbone(false);
        assert!(m.store.iter().any(|(_, p)| p.name.starts_with(BACKBONE_PREFIX) && p.trainable));
    }
}

//! Optimizer, schedule, loss, metrics and the early-stopping training loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::autograd::{BnUpdate, Gradients, ParamStore, Tape};
use crate::data::{LabeledDataset, FAKE};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, Classifier, DetectorModel, ModelConfig, PretrainModel};
use crate::ops::{self, Mode};
use crate::tensor::{Float, Shape, Tensor};
use crate::weights;

/// `lr0 * (1 + cos(pi * epoch / max_epochs)) / 2`.
pub fn cosine_lr(epoch: usize, max_epochs: usize, lr0: f64) -> f64 {
    if max_epochs == 0 {
        return lr0;
    }
    let t = epoch.min(max_epochs) as f64 / max_epochs as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// `v <- momentum * v - lr * g; p <- p + v` on raw slices.
pub fn sgd_momentum_step<T: Float>(p: &mut [T], g: &[T], v: &mut [T], lr: T, momentum: T) -> Result<()> {
    if p.len() != g.len() || p.len() != v.len() {
        return Err(Error::Dimension(format!(
            "optimizer step: parameter {}, gradient {}, velocity {}",
            p.len(),
            g.len(),
            v.len()
        )));
    }
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Momentum SGD over the trainable parameters of a store.
#[derive(Debug, Clone, Default)]
pub struct SgdMomentum<T> {
    pub momentum: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Float> SgdMomentum<T> {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (lr, mu) = (T::lit(lr), T::lit(self.momentum));
        for (id, g) in grads.trainable() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); g.len()]);
            sgd_momentum_step(p.value.data_mut(), g.data(), v, lr, mu)?;
        }
        Ok(())
    }
}

const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of sigmoid probabilities clamped to
/// `[1e-7, 1 - 1e-7]`, and its gradient with respect to each logit.
///
/// Where the clamp is active the loss is flat, so the gradient is zero.
pub fn bce_loss<T: Float>(logits: &[T], labels: &[u8]) -> (f64, Vec<T>) {
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let z = z.to_f64().unwrap_or(f64::NAN);
        let raw = ops::sigmoid_scalar(z);
        let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let y = y as f64;
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        let g = if p == raw { (raw - y) / n } else { 0.0 };
        grad.push(T::lit(g));
    }
    (loss / n, grad)
}

/// Probability that a random fake outscores a random real, ties counting
/// one half. Computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_fake = labels.iter().filter(|&&l| l == FAKE).count();
    let n_real = labels.len() - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {n_real} real and {n_fake} fake"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of doubled average ranks of the fake items keeps everything integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let fakes = order[i..=j].iter().filter(|&&k| labels[k] == FAKE).count() as u128;
        rank_sum2 += fakes * (i + j + 2) as u128;
        i = j + 1;
    }
    let nf = n_fake as u128;
    let u2 = rank_sum2 - nf * (nf + 1);
    Ok(u2 as f64 / (2.0 * n_fake as f64 * n_real as f64))
}

/// Fraction of items where `prob >= 0.5` agrees with a fake label.
pub fn accuracy(probs: &[f64], labels: &[u8]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= 0.5) == (l == FAKE))
        .count();
    hits as f64 / probs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    /// `None` when the set holds a single class.
    pub auroc: Option<f64>,
    pub loss: f64,
}

impl Metrics {
    pub fn auroc(&self) -> Result<f64> {
        self.auroc
            .ok_or_else(|| Error::UndefinedMetric("AUROC needs both classes".into()))
    }
}

/// Raw outputs of a pass over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub logits: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Scores {
    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| ops::sigmoid_scalar(z)).collect()
    }

    /// Ranking uses the logits, which keep their order where the sigmoid
    /// saturates.
    pub fn metrics(&self) -> Metrics {
        let (loss, _) = bce_loss(&self.logits, &self.labels);
        Metrics {
            acc: accuracy(&self.probs(), &self.labels),
            auroc: auroc(&self.logits, &self.labels).ok(),
            loss,
        }
    }
}

/// Inference-mode logits over a whole dataset, rescale-only preprocessing.
pub fn score<T: Float, M: Classifier<T>>(model: &M, data: &LabeledDataset, batch_size: usize) -> Result<Scores> {
    let mut logits = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = data.batch::<T>(chunk, None)?;
        logits.extend(model.infer_logits(&x)?.into_iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(Scores {
        logits,
        labels: data.labels(),
    })
}

pub fn evaluate<T: Float, M: Classifier<T>>(model: &M, data: &LabeledDataset, batch_size: usize) -> Result<Metrics> {
    Ok(score(model, data, batch_size)?.metrics())
}

pub const PRETRAIN_LR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Smallest validation-loss decrease that counts as improvement.
    pub min_delta: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lr0: 0.3,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 60,
            patience: 20,
            min_delta: 1e-6,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }

    /// Gentler start for training a backbone from scratch.
    pub fn pretraining(self) -> Self {
        TrainConfig { lr0: PRETRAIN_LR, ..self }
    }

    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 128,
            max_epochs: 300,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.patience < 1 || self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::Config(format!(
                "need lr0 > 0, patience >= 1, batch >= 1 and epochs >= 1, got lr0={} patience={} batch={} epochs={}",
                self.lr0, self.patience, self.batch_size, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.records.get(self.best_epoch.checked_sub(1)?).map(|r| r.val_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss,val_acc,val_auroc\n");
        for r in &self.records {
            let auc = r.val_auroc.map_or(String::new(), |a| a.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.lr, r.train_loss, r.val_loss, r.val_acc, auc
            )
            .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One SGD step on a batch. Returns the batch loss.
pub fn train_step<T: Float, M: Classifier<T>>(
    model: &mut M,
    opt: &mut SgdMomentum<T>,
    x: Tensor<T>,
    labels: &[u8],
    lr: f64,
) -> Result<f64> {
    let n = x.shape().n();
    let (loss, grads, updates): (f64, Gradients<T>, Vec<BnUpdate<T>>) = {
        let mut tape = Tape::new(model.store()).with_bn_eps(T::lit(model.bn_eps()));
        let xv = tape.input(x);
        let out = model.logits(&mut tape, xv, Mode::Train)?;
        let (loss, dlogits) = bce_loss(tape.value(out).data(), labels);
        let seed = Tensor::from_vec(Shape::new(n, 1, 1, 1), dlogits)?;
        let grads = tape.backward(out, seed)?;
        (loss, grads, tape.bn_updates().to_vec())
    };
    if !loss.is_finite() {
        return Ok(loss);
    }
    let momentum = T::lit(model.bn_momentum());
    opt.step(model.store_mut(), &grads, lr)?;
    model.store_mut().apply_bn_updates(&updates, momentum);
    Ok(loss)
}

fn snapshot<T: Float>(store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore<T: Float>(store: &mut ParamStore<T>, values: Vec<Tensor<T>>) {
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        store.get_mut(id).value = v;
    }
}

/// Trains with per-epoch cosine annealing and early stopping on the
/// validation loss, then restores the best epoch's weights.
///
/// `on_epoch` sees each record as it is produced.
pub fn train_loop<T: Float, M: Classifier<T>>(
    model: &mut M,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    let mut opt = SgdMomentum::new(cfg.momentum);
    let mut history = History::default();
    let mut best = (f64::INFINITY, snapshot(model.store()));
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for e in 0..cfg.max_epochs {
        let epoch = e + 1;
        let lr = cosine_lr(e, cfg.max_epochs, cfg.lr0);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0000_0000);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.batch::<T>(chunk, Some((&cfg.augment, cfg.seed, epoch as u64)))?;
            let labels: Vec<u8> = chunk.iter().map(|&i| train.items[i].label).collect();
            let loss = train_step(model, &mut opt, x, &labels, lr).map_err(|e| numeric_to_diverged(e, model.store(), epoch))?;
            if !loss.is_finite() {
                return Err(diverged(model.store(), epoch, "training loss is not finite"));
            }
            total += loss * chunk.len() as f64;
        }
        if let Some(name) = model.store().first_non_finite() {
            return Err(diverged(model.store(), epoch, &format!("parameter {name} is not finite")));
        }
        let m = evaluate(model, val, cfg.batch_size).map_err(|e| numeric_to_diverged(e, model.store(), epoch))?;
        if !m.loss.is_finite() {
            return Err(diverged(model.store(), epoch, "validation loss is not finite"));
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_loss: m.loss,
            val_acc: m.acc,
            val_auroc: m.auroc,
        };
        on_epoch(&rec);
        history.records.push(rec);
        if m.loss < best.0 - cfg.min_delta {
            best = (m.loss, snapshot(model.store()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if history.best_epoch > 0 {
        restore(model.store_mut(), best.1);
    }
    Ok(history)
}

fn numeric_to_diverged<T: Float>(e: Error, store: &ParamStore<T>, epoch: usize) -> Error {
    match e {
        Error::Numeric(m) => diverged(store, epoch, &m),
        e => e,
    }
}

fn diverged<T: Float>(store: &ParamStore<T>, epoch: usize, what: &str) -> Error {
    let culprit = store
        .first_non_finite()
        .map_or("no parameter is non-finite yet".to_string(), |n| format!("first non-finite parameter: {n}"));
    Error::Diverged {
        epoch,
        message: format!("{what}; {culprit}"),
    }
}

/// Trains the toy backbone with a temporary pooled head.
pub fn pretrain<T: Float>(
    backbone: BackboneConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(PretrainModel<T>, History)> {
    let mut model = PretrainModel::assemble(backbone, cfg.seed)?;
    let history = train_loop(&mut model, train, val, cfg, on_epoch)?;
    Ok((model, history))
}

/// Assembles a detector around the saved backbone, freezes it, and trains
/// the transformer, blocks and head.
pub fn fine_tune<T: Float>(
    backbone_path: impl AsRef<Path>,
    finetune_set: &LabeledDataset,
    val_set: &LabeledDataset,
    mut model_cfg: ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(DetectorModel<T>, History)> {
    let (bb_cfg, bb_store) = weights::load_backbone::<T>(backbone_path)?;
    model_cfg.backbone = bb_cfg;
    let mut model = DetectorModel::assemble(model_cfg, cfg.seed)?;
    model.load_backbone_from(&bb_store)?;
    model.freeze_backbone(true);
    let history = train_loop(&mut model, finetune_set, val_set, cfg, on_epoch)?;
    Ok((model, history))
}

//! Reverse-mode differentiation by per-step taping.
//!
//! A [`Tape`] borrows a [`ParamStore`], records every primitive applied during
//! a forward pass and replays the records in reverse in [`Tape::backward`].
//! Frozen parameters enter the tape as constants, so no gradient work is
//! spent on subgraphs that only depend on them.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::ops::{self, Activation, BatchStats, Mode};
use crate::tensor::{Float, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is used for. Moving statistics are never trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnMovingMean,
    BnMovingVar,
    AttentionGamma,
}

impl ParamRole {
    pub fn is_statistic(self) -> bool {
        matches!(self, ParamRole::BnMovingMean | ParamRole::BnMovingVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub role: ParamRole,
}

/// Named parameters in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, role: ParamRole) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(value.shape()),
            value,
            trainable: !role.is_statistic(),
            role,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Sets the trainable flag on every parameter whose name starts with
    /// `prefix`. Moving statistics stay frozen.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable && !p.role.is_statistic();
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds tape gradients into the stored `grad` buffers of trainable
    /// parameters.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in &grads.params {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }

    /// Total element count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// CRC-32 over names and little-endian values of parameters under `prefix`.
    pub fn checksum(&self, prefix: &str) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize()
    }

    /// Folds train-mode batch statistics into the moving averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: T) {
        for u in updates {
            ops::update_moving(self.params[u.layer.mean.0].value.data_mut(), &u.stats.mean, momentum);
            ops::update_moving(self.params[u.layer.var.0].value.data_mut(), &u.stats.var, momentum);
        }
    }

    /// Name of the first parameter holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| !p.value.is_finite())
            .map(|p| p.name.as_str())
    }
}

/// Ids of one batch norm layer's four parameter tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BnIds {
    pub fn register<T: Float>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<Self> {
        let v = |x: f64| Tensor::full(Shape::new(1, 1, 1, c), T::lit(x));
        Ok(BnIds {
            gamma: store.add(format!("{prefix}.gamma"), v(1.0), ParamRole::BnGamma)?,
            beta: store.add(format!("{prefix}.beta"), v(0.0), ParamRole::BnBeta)?,
            mean: store.add(format!("{prefix}.moving_mean"), v(0.0), ParamRole::BnMovingMean)?,
            var: store.add(format!("{prefix}.moving_var"), v(1.0), ParamRole::BnMovingVar)?,
        })
    }
}

/// Batch statistics produced by a train-mode batch norm, pending folding into
/// the moving averages.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub layer: BnIds,
    pub stats: BatchStats<T>,
}

/// Handle to a recorded tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Pointwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Depthwise {
        x: Var,
        k: Var,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Act {
        x: Var,
        act: Activation,
    },
    Gap {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Energies {
        g: Var,
        f: Var,
    },
    Softmax {
        x: Var,
    },
    Attention {
        g: Var,
        f: Var,
        h: Var,
    },
    BatchDot {
        beta: Var,
        h: Var,
    },
    Scale {
        x: Var,
        s: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Gate {
        u: Var,
        s: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<'a, T: Float> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Forward recording for one step.
#[derive(Debug)]
pub struct Tape<'a, T: Float> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<'a, T>>,
    param_vars: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate<T>>,
    bn_eps: T,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a trainable parameter that took part in the forward pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient reaching an input created with [`Tape::input_with_grad`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&id, g)| (id, g))
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    /// Squared L2 norm over all parameter gradients.
    pub fn norm_sq(&self) -> T {
        self.params
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum()
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'a, T: Float> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            bn_updates: Vec::new(),
            bn_eps: T::lit(1e-3),
        }
    }

    /// Sets the epsilon used by subsequent batch norm nodes.
    pub fn with_bn_eps(mut self, eps: T) -> Self {
        self.bn_eps = eps;
        self
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Cow::Owned(value), op, requires_grad)
    }

    fn push_node(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_node(Cow::Owned(t), Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push_node(Cow::Owned(t), Op::Leaf, true)
    }

    /// Parameter leaf. Repeated uses share one node so gradients add up.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store;
        let p = store.get(id);
        let v = self.push_node(Cow::Borrowed(&p.value), Op::Param(id), p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let y = ops::pointwise_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Pointwise { x, w, b, stride }, &inputs))
    }

    pub fn depthwise3x3(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let y = ops::depthwise_forward(self.value(x), self.value(k), stride)?;
        Ok(self.push(y, Op::Depthwise { x, k, stride }, &[x, k]))
    }

    /// Depthwise 3x3 followed by a bias-free pointwise projection.
    pub fn separable3x3(&mut self, x: Var, depthwise: Var, pointwise: Var, stride: usize) -> Result<Var> {
        let mid = self.depthwise3x3(x, depthwise, stride)?;
        self.conv1x1(mid, pointwise, None, 1)
    }

    pub fn batch_norm(&mut self, x: Var, layer: BnIds, mode: Mode) -> Result<Var> {
        let c = self.shape(x).c();
        let store = self.store;
        for id in [layer.gamma, layer.beta, layer.mean, layer.var] {
            let len = store.value(id).len();
            if len != c {
                return Err(Error::Dimension(format!(
                    "channel axis: batch norm {} has {len} entries for {c} channels",
                    store.get(id).name
                )));
            }
        }
        let gamma = self.param(layer.gamma);
        let beta = self.param(layer.beta);
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                let stats = ops::batch_stats(self.value(x));
                if stats.mean.iter().chain(&stats.var).any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite batch statistics in {}",
                        store.get(layer.gamma).name
                    )));
                }
                let out = (stats.mean.clone(), stats.var.clone(), true);
                self.bn_updates.push(BnUpdate { layer, stats });
                out
            }
            Mode::Infer => (
                store.value(layer.mean).data().to_vec(),
                store.value(layer.var).data().to_vec(),
                false,
            ),
        };
        let inv_std = ops::inv_std(&var, self.bn_eps)?;
        let y = ops::normalize(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let y = ops::activate(self.value(x), act);
        self.push(y, Op::Act { x, act }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn h_swish(&mut self, x: Var) -> Var {
        self.activation(x, Activation::HSwish)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = ops::global_avg_pool(self.value(x));
        self.push(y, Op::Gap { x }, &[x])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h() != 1 || s.w() != 1 {
            return Err(Error::Dimension(format!(
                "dense expects pooled input (n,1,1,c), got {s}"
            )));
        }
        self.conv1x1(x, w, Some(b), 1)
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    pub fn energies(&mut self, g: Var, f: Var) -> Result<Var> {
        let y = ops::energies(self.value(g), self.value(f))?;
        Ok(self.push(y, Op::Energies { g, f }, &[g, f]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let y = ops::softmax_rows(self.value(x));
        self.push(y, Op::Softmax { x }, &[x])
    }

    /// Fused `batchdot(softmax_rows(energies(g, f)), h)`.
    pub fn attention_core(&mut self, g: Var, f: Var, h: Var) -> Result<Var> {
        let o = ops::attention_core(self.value(g), self.value(f), self.value(h))?;
        Ok(self.push(o, Op::Attention { g, f, h }, &[g, f, h]))
    }

    pub fn batchdot(&mut self, beta: Var, h: Var) -> Result<Var> {
        let y = ops::batchdot(self.value(beta), self.value(h))?;
        Ok(self.push(y, Op::BatchDot { beta, h }, &[beta, h]))
    }

    /// `s * x` for a single-element `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension(format!(
                "scale factor must have one element, got {}",
                self.shape(s)
            )));
        }
        let k = self.value(s).data()[0];
        let y = self.value(x).map(|v| k * v);
        Ok(self.push(y, Op::Scale { x, s }, &[x, s]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut y = self.value(a).clone();
        for (v, &w) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= w;
        }
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    /// `u * s` with `s: (n,1,1,c)` broadcast over spatial positions.
    pub fn channel_gate(&mut self, u: Var, s: Var) -> Result<Var> {
        let y = ops::channel_gate(self.value(u), self.value(s))?;
        Ok(self.push(y, Op::Gate { u, s }, &[u, s]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }, &[a, b]))
    }

    /// Sum of all elements as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {} and {} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Propagates `seed` (the gradient of the loss with respect to `output`)
    /// back through the tape.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "output {} was not recorded on this tape",
                output.0
            )));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::Dimension(format!(
                "loss gradient {} does not match output {}",
                seed.shape(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut params = BTreeMap::new();
        for (&id, &v) in &self.param_vars {
            if self.needs(v) {
                params.insert(id, Tensor::zeros(self.shape(v)));
            }
        }
        if self.needs(output) {
            grads[output.0] = Some(seed);
        }

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        params.insert(*id, g);
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(&node.op, &node.value, g, &mut grads);
        }

        Ok(Gradients { params, nodes: grads })
    }

    fn backward_node(&self, op: &Op<T>, out: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| self.value(v);
        let send = |v: Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if self.needs(v) {
                accumulate(&mut grads[v.0], t);
            }
        };
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::Pointwise { x, w, b, stride } => {
                let (dx, dw, db) =
                    ops::pointwise_backward(val(x), val(w), b.is_some(), stride, &g, self.needs(x));
                if let Some(dx) = dx {
                    send(x, dx, grads);
                }
                send(w, dw, grads);
                if let (Some(b), Some(db)) = (b, db) {
                    send(b, db, grads);
                }
            }
            Op::Depthwise { x, k, stride } => {
                let (dx, dk) = ops::depthwise_backward(val(x), val(k), stride, &g, self.needs(x));
                if let Some(dx) = dx {
                    send(x, dx, grads);
                }
                send(k, dk, grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref mean,
                ref inv_std,
                batch_stats,
            } => {
                let (dx, dgamma, dbeta) = ops::batch_norm_backward(
                    val(x),
                    mean,
                    inv_std,
                    val(gamma).data(),
                    &g,
                    batch_stats,
                    self.needs(x),
                );
                if let Some(dx) = dx {
                    send(x, dx, grads);
                }
                let shape = val(gamma).shape();
                send(gamma, Tensor::from_vec(shape, dgamma).unwrap(), grads);
                send(beta, Tensor::from_vec(shape, dbeta).unwrap(), grads);
            }
            Op::Act { x, act } => {
                let mut dx = g;
                for (d, &xv) in dx.data_mut().iter_mut().zip(val(x).data()) {
                    *d *= act.derivative(xv);
                }
                send(x, dx, grads);
            }
            Op::Gap { x } => {
                let dx = ops::global_avg_pool_backward(val(x).shape(), &g);
                send(x, dx, grads);
            }
            Op::Reshape { x } => {
                let dx = g.reshape(val(x).shape()).expect("reshape preserves size");
                send(x, dx, grads);
            }
            Op::Energies { g: q, f } => {
                let (dq, df) = ops::energies_backward(val(q), val(f), &g, (self.needs(q), self.needs(f)));
                if let Some(dq) = dq {
                    send(q, dq, grads);
                }
                if let Some(df) = df {
                    send(f, df, grads);
                }
            }
            Op::Attention { g: q, f, h } => {
                let need = (self.needs(q), self.needs(f), self.needs(h));
                let (dq, df, dh) = ops::attention_core_backward(val(q), val(f), val(h), &g, need);
                for (v, d) in [(q, dq), (f, df), (h, dh)] {
                    if let Some(d) = d {
                        send(v, d, grads);
                    }
                }
            }
            Op::Softmax { x } => {
                let dx = ops::softmax_rows_backward(out, &g);
                send(x, dx, grads);
            }
            Op::BatchDot { beta, h } => {
                let (db, dh) =
                    ops::batchdot_backward(val(beta), val(h), &g, (self.needs(beta), self.needs(h)));
                if let Some(db) = db {
                    send(beta, db, grads);
                }
                if let Some(dh) = dh {
                    send(h, dh, grads);
                }
            }
            Op::Scale { x, s } => {
                let k = val(s).data()[0];
                if self.needs(s) {
                    let ds: T = g.data().iter().zip(val(x).data()).map(|(&a, &b)| a * b).sum();
                    send(s, Tensor::from_vec(val(s).shape(), vec![ds]).unwrap(), grads);
                }
                if self.needs(x) {
                    send(x, g.map(|v| k * v), grads);
                }
            }
            Op::Add { a, b } => {
                if self.needs(a) && self.needs(b) {
                    send(a, g.clone(), grads);
                    send(b, g, grads);
                } else if self.needs(a) {
                    send(a, g, grads);
                } else {
                    send(b, g, grads);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let mut da = g.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(val(b).data()) {
                        *d *= v;
                    }
                    send(a, da, grads);
                }
                if self.needs(b) {
                    let mut db = g;
                    for (d, &v) in db.data_mut().iter_mut().zip(val(a).data()) {
                        *d *= v;
                    }
                    send(b, db, grads);
                }
            }
            Op::Gate { u, s } => {
                let (du, ds) = ops::channel_gate_backward(val(u), val(s), &g);
                send(u, du, grads);
                send(s, ds, grads);
            }
            Op::Concat { a, b } => {
                let (da, db) = ops::split_channels(&g, val(a).shape().c());
                send(a, da, grads);
                send(b, db, grads);
            }
            Op::Sum { x } => {
                let k = g.data()[0];
                send(x, Tensor::full(val(x).shape(), k), grads);
            }
        }
    }
}

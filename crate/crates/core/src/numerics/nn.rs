//! Parameter storage, a forward-pass context, and small layer types.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::batchnorm::{self, ScaleBounds};
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Feasible set enforced after every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Constraint {
    Free,
    Range { lo: f64, hi: f64 },
    /// Bounded batch-norm scale; the paired offset lives in `[-s, s]`.
    BnScale { bounds: ScaleBounds, offset: ParamId },
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub constraint: Constraint,
}

/// Named tensors: trainable weights plus non-trainable state such as
/// batch-norm running statistics. Insertion order is stable and defines
/// checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_state(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
            constraint: Constraint::Free,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn set_constraint(&mut self, id: ParamId, c: Constraint) {
        self.entries[id.0].constraint = c;
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Applies every constraint in place.
    pub fn project(&mut self) {
        for i in 0..self.entries.len() {
            match self.entries[i].constraint {
                Constraint::Free => {}
                Constraint::Range { lo, hi } => {
                    for v in self.entries[i].value.data_mut() {
                        *v = v.clamp(lo, hi);
                    }
                }
                Constraint::BnScale { bounds, offset } => {
                    let scale = self.entries[i].value.data().to_vec();
                    let mut scale = scale;
                    let mut off = self.entries[offset.0].value.data().to_vec();
                    batchnorm::project_scale_offset(&mut scale, &mut off, bounds);
                    self.entries[i].value.data_mut().copy_from_slice(&scale);
                    self.entries[offset.0].value.data_mut().copy_from_slice(&off);
                }
            }
        }
    }
}

/// Gradients indexed by [`ParamId`]; `None` for parameters that did not
/// influence the loss.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, g: Tensor) {
        self.grads[id.0] = Some(g);
    }

    /// Adds `g` to the gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Running-statistics update collected during a training-mode pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub mad_id: ParamId,
    pub mean: Tensor,
    pub mad: Tensor,
}

/// Stop-gradient constants: recorded on a first pass, replayed on later
/// passes so that finite differences see the same constants as the tape.
#[derive(Clone, Debug)]
pub enum Frozen {
    Record(Vec<Tensor>),
    Replay { values: Vec<Tensor>, cursor: usize },
}

/// State of one forward pass: the tape, parameter bindings, mode flags.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub train: bool,
    bn_updates: Vec<BnUpdate>,
    frozen: Frozen,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train,
            bn_updates: Vec::new(),
            frozen: Frozen::Record(Vec::new()),
        }
    }

    /// A context that replays previously recorded stop-gradient constants.
    pub fn replaying(store: &'a ParamStore, train: bool, values: Vec<Tensor>) -> Self {
        let mut c = Self::new(store, train);
        c.frozen = Frozen::Replay { values, cursor: 0 };
        c
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Tape variable for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let value = self.store.get(id).clone();
        let v = if self.store.is_trainable(id) {
            self.tape.leaf(value)?
        } else {
            self.tape.constant(value)?
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Passes a stop-gradient value through the record/replay log.
    pub fn freeze(&mut self, value: Tensor) -> Result<Tensor> {
        match &mut self.frozen {
            Frozen::Record(log) => {
                log.push(value.clone());
                Ok(value)
            }
            Frozen::Replay { values, cursor } => {
                let v = values.get(*cursor).cloned().ok_or_else(|| {
                    Error::contract("replay log exhausted: forward pass differs from recording")
                })?;
                if v.shape() != value.shape() {
                    return Err(Error::Dimension {
                        op: "freeze replay",
                        left: v.shape(),
                        right: value.shape(),
                    });
                }
                *cursor += 1;
                Ok(v)
            }
        }
    }

    pub fn frozen_values(&self) -> Vec<Tensor> {
        match &self.frozen {
            Frozen::Record(v) => v.clone(),
            Frozen::Replay { values, .. } => values.clone(),
        }
    }

    pub fn record_bn(&mut self, u: BnUpdate) {
        self.bn_updates.push(u);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Runs the reverse pass and maps leaf gradients back to parameters.
    pub fn backward(self, loss: Var) -> Result<ParamGrads> {
        let Ctx { tape, bound, .. } = self;
        let grads: Gradients = tape.backward(loss)?;
        let mut out = ParamGrads {
            grads: vec![None; bound.len()],
        };
        for (i, b) in bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = grads.get(*v) {
                    out.grads[i] = Some(g.clone());
                }
            }
        }
        Ok(out)
    }
}

/// Applies collected running-statistics updates.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        batchnorm::update_running(store.get_mut(u.mean_id), &u.mean);
        batchnorm::update_running(store.get_mut(u.mad_id), &u.mad);
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Gaussian initialization with standard deviation `gain / sqrt(inputs)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (inputs.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = Tensor::from_fn(inputs, outputs, |_, _| normal.sample(rng));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, outputs));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = ctx.param(self.bias)?;
        let h = ctx.tape.matmul(x, w)?;
        ctx.tape.add(h, b)
    }
}

/// L1 batch-norm layer with learned scale/offset and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub offset: ParamId,
    pub running_mean: ParamId,
    pub running_mad: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, eps: f64, bounds: Option<ScaleBounds>) -> Self {
        let s0 = bounds.map_or(1.0, |b| b.min);
        let scale = store.add(format!("{name}.scale"), Tensor::filled(1, width, s0));
        let offset = store.add(format!("{name}.offset"), Tensor::zeros(1, width));
        let running_mean = store.add_state(format!("{name}.running_mean"), Tensor::zeros(1, width));
        let running_mad = store.add_state(format!("{name}.running_mad"), Tensor::filled(1, width, 1.0));
        if let Some(bounds) = bounds {
            store.set_constraint(scale, Constraint::BnScale { bounds, offset });
        }
        Self {
            scale,
            offset,
            running_mean,
            running_mad,
            eps,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = ctx.param(self.scale)?;
        let o = ctx.param(self.offset)?;
        if ctx.train {
            let (y, mean, mad) = batchnorm::l1_batch_norm_tape(&mut ctx.tape, x, s, o, self.eps)?;
            ctx.record_bn(BnUpdate {
                mean_id: self.running_mean,
                mad_id: self.running_mad,
                mean,
                mad,
            });
            Ok(y)
        } else {
            let store = ctx.store();
            batchnorm::l1_batch_norm_inference_tape(
                &mut ctx.tape,
                x,
                s,
                o,
                store.get(self.running_mean),
                store.get(self.running_mad),
                self.eps,
            )
        }
    }
}

/// Batch-norm epsilon used by every layer.
pub const BN_EPS: f64 = 1e-4;

/// Stack of `Linear -> [BatchNorm] -> ReLU` hidden layers followed by a
/// linear output layer with optional batch norm.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Vec<(Linear, Option<BatchNorm>)>,
    output: Linear,
    output_bn: Option<BatchNorm>,
}

/// Shape and normalization choices for an [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpSpec<'s> {
    pub inputs: usize,
    pub hidden: &'s [usize],
    pub outputs: usize,
    pub hidden_bn: bool,
    pub output_bn: Option<Option<ScaleBounds>>,
    pub output_gain: f64,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: &MlpSpec<'_>, rng: &mut R) -> Self {
        let mut width = spec.inputs;
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        for (i, &h) in spec.hidden.iter().enumerate() {
            let lin = Linear::new(store, &format!("{name}.h{i}"), width, h, std::f64::consts::SQRT_2, rng);
            let bn = spec
                .hidden_bn
                .then(|| BatchNorm::new(store, &format!("{name}.h{i}.bn"), h, BN_EPS, None));
            hidden.push((lin, bn));
            width = h;
        }
        let output = Linear::new(store, &format!("{name}.out"), width, spec.outputs, spec.output_gain, rng);
        let output_bn = spec
            .output_bn
            .map(|bounds| BatchNorm::new(store, &format!("{name}.out.bn"), spec.outputs, BN_EPS, bounds));
        Self {
            hidden,
            output,
            output_bn,
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.first().map_or(self.output.inputs, |(l, _)| l.inputs)
    }

    pub fn outputs(&self) -> usize {
        self.output.outputs
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (lin, bn) in &self.hidden {
            h = lin.forward(ctx, h)?;
            if let Some(bn) = bn {
                h = bn.forward(ctx, h)?;
            }
            h = ctx.tape.relu(h)?;
        }
        let mut out = self.output.forward(ctx, h)?;
        if let Some(bn) = &self.output_bn {
            out = bn.forward(ctx, out)?;
        }
        Ok(out)
    }
}

//! Parameter storage, forward context and the basic layers every block is
//! assembled from.
//!
//! Layers only hold [`ParamId`]s. Values live in a [`ParamStore`], so one
//! model structure can run against an `f32` store for training and an `f64`
//! copy for gradient checks.

use std::cell::RefCell;

use hiper_tensor::{Activation, ConvSpec, Gradients, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable; receives gradients and optimizer updates.
    Weight,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±sqrt(6 / fan_in).
    KaimingUniform {
        fan_in: usize,
    },
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal {
        std: f64,
    },
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Empty when the store was built in shape-only mode.
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<Entry<T>>,
    materialized: bool,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            materialized: true,
        }
    }

    /// Records names and shapes only; used for parameter counting.
    pub fn shape_only() -> Self {
        Self {
            entries: Vec::new(),
            materialized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn weight_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|&id| self.entries[id.0].kind == ParamKind::Weight)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    kind: e.kind,
                    shape: e.shape.clone(),
                    value: e.value.cast(),
                })
                .collect(),
            materialized: self.materialized,
        }
    }

    fn push(
        &mut self,
        name: String,
        kind: ParamKind,
        shape: Vec<usize>,
        value: Tensor<T>,
    ) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            kind,
            shape,
            value,
        });
        ParamId(self.entries.len() - 1)
    }
}

/// Registers parameters under a hierarchical dotted name.
pub struct ParamBuilder<'s, T: Scalar> {
    store: &'s mut ParamStore<T>,
    rng: &'s mut ChaCha8Rng,
    prefix: String,
}

/// Owns the RNG for a top-level [`ParamBuilder`].
pub struct InitRng(ChaCha8Rng);

impl InitRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl<'s, T: Scalar> ParamBuilder<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, rng: &'s mut InitRng) -> Self {
        Self {
            store,
            rng: &mut rng.0,
            prefix: String::new(),
        }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = self.init_value(shape, init);
        let name = self.full_name(name);
        self.store
            .push(name, ParamKind::Weight, shape.to_vec(), value)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = self.init_value(shape, init);
        let name = self.full_name(name);
        self.store
            .push(name, ParamKind::Buffer, shape.to_vec(), value)
    }

    fn init_value(&mut self, shape: &[usize], init: Init) -> Tensor<T> {
        if !self.store.materialized {
            return Tensor::zeros(vec![0]);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| self.rng.random_range(-bound..bound))
                    .collect()
            }
            Init::TruncNormal { std } => {
                let normal = Normal::new(0.0, std).expect("std must be finite and >= 0");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        };
        Tensor::from_f64(shape.to_vec(), &data).expect("init shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is recorded for the optimizer.
    Eval,
}

/// Per-forward binding of store parameters onto a tape.
pub struct Ctx<'t, 's, T: Scalar> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    track_params: bool,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'t, 's, T: Scalar> Ctx<'t, 's, T> {
    /// Training forward: parameters are differentiable leaves.
    pub fn train(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_mode(tape, store, Mode::Train, true)
    }

    /// Inference forward: parameters are constants.
    pub fn eval(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::with_mode(tape, store, Mode::Eval, false)
    }

    pub fn with_mode(
        tape: &'t Tape<T>,
        store: &'s ParamStore<T>,
        mode: Mode,
        track_params: bool,
    ) -> Self {
        Self {
            tape,
            store,
            mode,
            track_params,
            vars: RefCell::new(vec![None; store.len()]),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.track_params && self.store.entry(id).kind == ParamKind::Weight {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Uses `var` in place of the stored value of `id` for this forward.
    pub fn bind(&self, id: ParamId, var: Var<'t, T>) {
        self.vars.borrow_mut()[id.0] = Some(var);
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }

    pub(crate) fn push_update(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Buffer updates (running statistics) recorded during the forward.
    pub fn take_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Gradients of all learnable parameters, in id order (zeros for unused ones).
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let vars = self.vars.borrow();
        self.store
            .weight_ids()
            .map(|id| {
                let shape = &self.store.entry(id).shape;
                let g = match vars[id.0] {
                    Some(v) => grads.take_or_zeros(v, shape),
                    None => Tensor::zeros(shape.clone()),
                };
                (id, g)
            })
            .collect()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, v) in updates {
            self.entries[id.0].value = v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let mut b = b.sub(name);
        let fan_in = in_ch / spec.groups * kernel * kernel;
        let weight = b.param(
            "weight",
            &[out_ch, in_ch / spec.groups, kernel, kernel],
            Init::KaimingUniform { fan_in },
        );
        let bias = bias.then(|| b.param("bias", &[out_ch], Init::Zeros));
        Self { weight, bias, spec }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        Ok(x.conv2d(w, b, self.spec)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            gamma: b.param("weight", &[channels], Init::Ones),
            beta: b.param("bias", &[channels], Init::Zeros),
            running_mean: b.buffer("running_mean", &[channels], Init::Zeros),
            running_var: b.buffer("running_var", &[channels], Init::Ones),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta, BN_EPS)?;
                let m = T::from_f64(BN_MOMENTUM);
                let keep = T::ONE - m;
                let store = ctx.store();
                let mean = store.value(self.running_mean);
                let var = store.value(self.running_var);
                let new_mean = Tensor::new(
                    mean.shape().to_vec(),
                    mean.data()
                        .iter()
                        .zip(&stats.mean)
                        .map(|(&r, &b)| keep * r + m * b)
                        .collect(),
                )?;
                let new_var = Tensor::new(
                    var.shape().to_vec(),
                    var.data()
                        .iter()
                        .zip(&stats.var)
                        .map(|(&r, &b)| keep * r + m * b)
                        .collect(),
                )?;
                ctx.push_update(self.running_mean, new_mean);
                ctx.push_update(self.running_var, new_var);
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store();
                Ok(x.batch_norm_eval(
                    gamma,
                    beta,
                    store.value(self.running_mean).data(),
                    store.value(self.running_var).data(),
                    BN_EPS,
                )?)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            gamma: b.param("weight", &[dim], Init::Ones),
            beta: b.param("bias", &[dim], Init::Zeros),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), LN_EPS)?)
    }
}

/// Affine map over the last axis; the weight is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let mut b = b.sub(name);
        let weight = b.param("weight", &[d_in, d_out], Init::TruncNormal { std: 0.02 });
        let bias = bias.then(|| b.param("bias", &[d_out], Init::Zeros));
        Self { weight, bias }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = x.matmul(ctx.param(self.weight))?;
        match self.bias {
            Some(b) => Ok(y.add(ctx.param(b))?),
            None => Ok(y),
        }
    }
}

/// Convolution → batch norm → optional activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Option<Activation>,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        act: Option<Activation>,
    ) -> Self {
        let mut b = b.sub(name);
        Self {
            conv: Conv2d::new(&mut b, "conv", in_ch, out_ch, kernel, spec, false),
            bn: BatchNorm2d::new(&mut b, "bn", out_ch),
            act,
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = self.bn.forward(ctx, self.conv.forward(ctx, x)?)?;
        match self.act {
            Some(a) => Ok(y.activation(a)?),
            None => Ok(y),
        }
    }
}

/// Sets every learnable parameter whose name matches `pred` to zero.
pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>, pred: impl Fn(&str) -> bool) {
    for e in &mut store.entries {
        if e.kind == ParamKind::Weight && pred(&e.name) {
            e.value = Tensor::zeros(e.shape.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_hierarchical_and_counted() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = InitRng::new(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let mut enc = b.sub("enc");
        let c = Conv2d::new(&mut enc, "c1", 4, 8, 3, ConvSpec::same(3, 1), true);
        let _bn = BatchNorm2d::new(&mut enc, "bn", 8);
        assert_eq!(store.entry(c.weight).name, "enc.c1.weight");
        assert_eq!(store.learnable_count(), 8 * 4 * 9 + 8 + 8 + 8);
        assert_eq!(store.len(), 6);
    }

    #[test]
    fn shape_only_store_counts_without_values() {
        let mut store = ParamStore::<f32>::shape_only();
        let mut rng = InitRng::new(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        Linear::new(&mut b, "fc", 10, 20, true);
        assert_eq!(store.learnable_count(), 220);
        assert_eq!(store.entries()[0].value.numel(), 0);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let build = |seed| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = InitRng::new(seed);
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            let c = Conv2d::new(&mut b, "c", 2, 2, 3, ConvSpec::same(3, 1), false);
            let l = Linear::new(&mut b, "l", 64, 64, false);
            (store.value(c.weight).clone(), store.value(l.weight).clone())
        };
        let (a, la) = build(3);
        let (b, _) = build(3);
        let (c, _) = build(4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f64 / 18.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        assert!(la.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = InitRng::new(0);
        let bn = BatchNorm2d::new(&mut ParamBuilder::new(&mut store, &mut rng), "bn", 1);
        let tape = Tape::new();
        let ctx = Ctx::train(&tape, &store);
        let x = tape.constant(Tensor::from_f64([2, 1, 1, 1], &[1.0, 3.0]).unwrap());
        let y = bn.forward(&ctx, x).unwrap().value();
        assert!(y.data()[0] < 0.0 && y.data()[1] > 0.0);
        let updates = ctx.take_updates();
        drop(ctx);
        store.apply_updates(updates);
        assert!((store.value(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance = 2
        assert!((store.value(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}

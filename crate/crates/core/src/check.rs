//! Finite-difference gradient checks of the composite modules, in `f64`.
//!
//! Each check differentiates `sum(w ⊙ module(inputs))` for fixed random
//! probe weights `w`, with respect to every input and every learnable
//! parameter of the module.

use std::rc::Rc;

use hiper_tensor::{
    gradcheck_at, Activation, ConvSpec, PoolKind, ResizeMode, Tape, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::fusion::{aci, Irmlp, Lgff, Spe};
use crate::global::SwinBlock;
use crate::local::DuChResBlock;
use crate::loss::{combined_loss, LossConfig};
use crate::nn::{Ctx, InitRng, ParamBuilder, ParamKind, ParamStore};
use crate::ppa::{Eag, Pga, Pmi, Psa};

pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub module: String,
    /// Max relative error per checked tensor (`input0`, …, then parameter names).
    pub wrt: Vec<(String, f64)>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.wrt.iter().map(|w| w.1).fold(0.0, f64::max)
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(Var<'t, f64>) -> hiper_tensor::Result<Var<'t, f64>>,
{
    f
}

fn wrap(e: crate::error::Error) -> TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "module",
            detail: other.to_string(),
        },
    }
}

/// Checks `forward` against central differences. Parameter tensors with more
/// than `max_entries` elements are checked on an evenly spaced subset.
pub fn check_module<F>(
    name: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    max_entries: usize,
    seed: u64,
    forward: F,
) -> Result<GradReport>
where
    F: for<'t> Fn(&Ctx<'t, '_, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let out_shape = {
        let tape = Tape::new();
        let ctx = Ctx::train(&tape, store);
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        forward(&ctx, &vars)?.shape()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = random_tensor(&out_shape, &mut rng);
    let subset = |n: usize| -> Option<Vec<usize>> {
        (n > max_entries).then(|| (0..max_entries).map(|k| k * n / max_entries).collect())
    };
    let mut wrt = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let f = scalar_fn(|v: Var<'_, f64>| {
            let tape = v.tape();
            let ctx = Ctx::train(tape, store);
            let vars: Vec<_> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| if j == i { v } else { tape.constant(t.clone()) })
                .collect();
            let out = forward(&ctx, &vars).map_err(wrap)?;
            out.mul(tape.constant(probe.clone()))?.sum()
        });
        let idx = subset(x.numel());
        wrt.push((
            format!("input{i}"),
            gradcheck_at(f, x, STEP, idx.as_deref())?,
        ));
    }
    for id in store.weight_ids() {
        let entry = store.entry(id);
        debug_assert_eq!(entry.kind, ParamKind::Weight);
        let f = scalar_fn(|v: Var<'_, f64>| {
            let tape = v.tape();
            let ctx = Ctx::train(tape, store);
            ctx.bind(id, v);
            let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = forward(&ctx, &vars).map_err(wrap)?;
            out.mul(tape.constant(probe.clone()))?.sum()
        });
        let idx = subset(entry.value.numel());
        wrt.push((
            entry.name.clone(),
            gradcheck_at(f, &entry.value, STEP, idx.as_deref())?,
        ));
    }
    Ok(GradReport {
        module: name.to_string(),
        wrt,
    })
}

fn build<M>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> M) -> (M, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = InitRng::new(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng));
    (m, store)
}

/// Every composite module at ≤ 4 channels and ≤ 8×8 extent.
pub fn composite_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |s: &[usize]| random_tensor(s, &mut rng);
    let cap = 32;
    let mut out = Vec::new();

    let (m, st) = build(seed, |b| DuChResBlock::new(b, "duch", 2, 2));
    out.push(check_module(
        "DuChResBlock",
        &st,
        &[t(&[2, 2, 8, 8])],
        cap,
        seed,
        |c, x| m.forward(c, x[0]),
    )?);

    let cfg = ModelConfig::desk();
    let (pair, st) = build(seed, |b| {
        [
            SwinBlock::new(b, "w", 4, 2, 4, 0, &cfg),
            SwinBlock::new(b, "sw", 4, 2, 4, 2, &cfg),
        ]
    });
    out.push(check_module(
        "SwinBlockPair",
        &st,
        &[t(&[1, 8, 8, 4])],
        cap,
        seed,
        |c, x| pair[1].forward(c, pair[0].forward(c, x[0])?),
    )?);

    let st = ParamStore::<f64>::new();
    out.push(check_module(
        "ACI",
        &st,
        &[t(&[2, 3, 4, 4])],
        cap,
        seed,
        |_, x| aci(x[0]),
    )?);

    let (m, st) = build(seed, |b| Spe::new(b, "spe", 4, 4));
    out.push(check_module(
        "SPE",
        &st,
        &[t(&[2, 4, 8, 8])],
        cap,
        seed,
        |c, x| m.forward(c, x[0]),
    )?);

    let (m, st) = build(seed, |b| Irmlp::new(b, "irmlp", 4, 2, 4));
    out.push(check_module(
        "IRMLP",
        &st,
        &[t(&[2, 4, 6, 6])],
        cap,
        seed,
        |c, x| m.forward(c, x[0]),
    )?);

    let (m, st) = build(seed, |b| Lgff::new(b, "lgff", 2, Some(2), 2, 4));
    let ins = [t(&[2, 2, 4, 4]), t(&[2, 2, 4, 4]), t(&[2, 2, 8, 8])];
    out.push(check_module("LGFF", &st, &ins, cap, seed, |c, x| {
        m.forward(c, x[0], x[1], Some(x[2]))
    })?);

    let (m, st) = build(seed, |b| Lgff::new(b, "lgff1", 2, None, 2, 4));
    let ins = [t(&[2, 2, 4, 4]), t(&[2, 2, 4, 4])];
    out.push(check_module(
        "LGFF(stage 1)",
        &st,
        &ins,
        cap,
        seed,
        |c, x| m.forward(c, x[0], x[1], None),
    )?);

    let (m, st) = build(seed, |b| Pmi::new(b, &[2, 2, 4, 4]));
    let ins = [
        t(&[2, 2, 8, 8]),
        t(&[2, 2, 4, 4]),
        t(&[2, 4, 2, 2]),
        t(&[2, 4, 1, 1]),
    ];
    out.push(check_module("PMI", &st, &ins, cap, seed, |c, x| {
        let ys = m.forward(c, x)?;
        Ok(Var::concat(
            &[
                ys[0].reshape(&[2, 2 * 64])?,
                ys[1].reshape(&[2, 2 * 16])?,
                ys[2].reshape(&[2, 16])?,
            ],
            1,
        )?)
    })?);

    let (m, st) = build(seed, |b| Eag::new(b, "eag", 4, 4, 4));
    let ins = [t(&[2, 4, 4, 4]), t(&[2, 4, 4, 4])];
    out.push(check_module("EAG", &st, &ins, cap, seed, |c, x| {
        m.forward(c, x[0], x[1])
    })?);

    let (m, st) = build(seed, |b| {
        Psa::new(b, "psa", 4, &[3, 5, 7, 9], &[1, 4, 8, 16], 4)
    });
    out.push(check_module(
        "PSA",
        &st,
        &[t(&[2, 4, 8, 8])],
        cap,
        seed,
        |c, x| m.forward(c, x[0]),
    )?);

    let (m, st) = build(seed, |b| {
        Pga::new(b, "pga", 4, 4, 4, &[3, 5, 7, 9], &[1, 4, 8, 16], 4)
    });
    let ins = [t(&[2, 4, 4, 4]), t(&[2, 4, 4, 4])];
    out.push(check_module("PGA", &st, &ins, cap, seed, |c, x| {
        m.forward(c, x[0], x[1])
    })?);

    let target: Vec<u8> = (0..2 * 16)
        .map(|i| ((i * 7 + seed as usize) % 3) as u8)
        .collect();
    let st = ParamStore::<f64>::new();
    let lc = LossConfig::default();
    out.push(check_module(
        "CombinedLoss",
        &st,
        &[t(&[2, 3, 4, 4])],
        cap,
        seed,
        |_, x| combined_loss(x[0], &target, &lc),
    )?);

    Ok(out)
}

fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Every differentiable tensor op, each w.r.t. its differentiable operands.
pub fn op_suite(seed: u64) -> Result<Vec<GradReport>> {
    type OpFn = Box<dyn for<'t> Fn(&[Var<'t, f64>]) -> hiper_tensor::Result<Var<'t, f64>>>;
    let pos = |t: Tensor<f64>| t.map(|x| x.abs() + 0.5);
    let x3 = seeded(&[2, 3, 4], seed);
    let x4 = seeded(&[2, 4, 5, 5], seed + 1);
    let mut cases: Vec<(&str, Vec<Tensor<f64>>, OpFn)> = vec![
        (
            "add",
            vec![x3.clone(), seeded(&[3, 4], 2)],
            Box::new(|x| x[0].add(x[1])),
        ),
        (
            "sub",
            vec![x3.clone(), seeded(&[4], 3)],
            Box::new(|x| x[0].sub(x[1])),
        ),
        (
            "mul",
            vec![seeded(&[3, 1], 4), x3.clone()],
            Box::new(|x| x[0].mul(x[1])),
        ),
        (
            "div",
            vec![x3.clone(), pos(seeded(&[2, 3, 4], 5))],
            Box::new(|x| x[0].div(x[1])),
        ),
        ("exp", vec![x3.clone()], Box::new(|x| x[0].exp())),
        ("ln", vec![pos(x3.clone())], Box::new(|x| x[0].ln())),
        ("neg", vec![x3.clone()], Box::new(|x| x[0].neg())),
        (
            "scale",
            vec![x3.clone()],
            Box::new(|x| x[0].scale(-2.5)?.add_scalar(0.3)),
        ),
        (
            "relu",
            vec![x3.clone()],
            Box::new(|x| x[0].activation(Activation::Relu)),
        ),
        ("sigmoid", vec![x3.clone()], Box::new(|x| x[0].sigmoid())),
        ("gelu", vec![x3.clone()], Box::new(|x| x[0].gelu())),
        (
            "reshape",
            vec![x3.clone()],
            Box::new(|x| x[0].reshape(&[6, 4])),
        ),
        (
            "permute",
            vec![x3.clone()],
            Box::new(|x| x[0].permute(&[2, 0, 1])),
        ),
        (
            "transpose_last",
            vec![x3.clone()],
            Box::new(|x| x[0].transpose_last()),
        ),
        (
            "narrow",
            vec![x3.clone()],
            Box::new(|x| x[0].narrow(1, 1, 2)),
        ),
        (
            "concat",
            vec![x3.clone(), seeded(&[2, 2, 4], 6)],
            Box::new(|x| Var::concat(&[x[0], x[1], x[0]], 1)),
        ),
        (
            "take",
            vec![x3.clone()],
            Box::new(|x| x[0].take(Rc::new(vec![0, 5, 5, 23, 7, 1]), &[2, 3])),
        ),
        ("sum", vec![x3.clone()], Box::new(|x| x[0].mul(x[0])?.sum())),
        (
            "mean",
            vec![x3.clone()],
            Box::new(|x| x[0].mul(x[0])?.mean()),
        ),
        ("sum_axis", vec![x3.clone()], Box::new(|x| x[0].sum_axis(1))),
        (
            "mean_axis",
            vec![x3.clone()],
            Box::new(|x| x[0].mean_axis(2)),
        ),
        (
            "matmul",
            vec![x3.clone(), seeded(&[4, 5], 7)],
            Box::new(|x| x[0].matmul(x[1])),
        ),
        (
            "softmax",
            vec![x3.map(|v| 3.0 * v)],
            Box::new(|x| x[0].softmax(2)),
        ),
        (
            "log_softmax",
            vec![x3.map(|v| 3.0 * v)],
            Box::new(|x| x[0].log_softmax(1)),
        ),
        (
            "layer_norm",
            vec![x3.clone(), seeded(&[4], 8), seeded(&[4], 9)],
            Box::new(|x| x[0].layer_norm(x[1], x[2], 1e-5)),
        ),
        (
            "batch_norm_train",
            vec![
                seeded(&[2, 3, 2, 2], 10),
                seeded(&[3], 11),
                seeded(&[3], 12),
            ],
            Box::new(|x| Ok(x[0].batch_norm_train(x[1], x[2], 1e-5)?.0)),
        ),
        (
            "batch_norm_eval",
            vec![
                seeded(&[2, 3, 2, 2], 13),
                seeded(&[3], 14),
                seeded(&[3], 15),
            ],
            Box::new(|x| {
                x[0].batch_norm_eval(x[1], x[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
            }),
        ),
        (
            "max_pool",
            vec![seeded(&[1, 2, 4, 4], 16)],
            Box::new(|x| x[0].pool2d(PoolKind::Max, 2, 2)),
        ),
        (
            "avg_pool",
            vec![seeded(&[1, 2, 4, 4], 17)],
            Box::new(|x| x[0].pool2d(PoolKind::Avg, 2, 2)),
        ),
        (
            "resize_nearest",
            vec![seeded(&[1, 2, 3, 3], 18)],
            Box::new(|x| x[0].resize2d(2, ResizeMode::Nearest)),
        ),
        (
            "resize_bilinear",
            vec![seeded(&[1, 2, 3, 3], 19)],
            Box::new(|x| x[0].resize2d(2, ResizeMode::Bilinear)),
        ),
    ];
    let convs = [
        ("conv2d", [4, 4, 3, 3], ConvSpec::new(1, 1, 1, 1)),
        ("conv2d_strided", [2, 4, 3, 3], ConvSpec::new(2, 1, 1, 1)),
        ("conv2d_dilated", [3, 4, 3, 3], ConvSpec::new(1, 2, 2, 1)),
        ("conv2d_grouped", [4, 2, 3, 3], ConvSpec::new(1, 1, 1, 2)),
        ("conv2d_depthwise", [4, 1, 3, 3], ConvSpec::new(1, 1, 1, 4)),
    ];
    for (k, (name, ws, spec)) in convs.into_iter().enumerate() {
        let ins = vec![
            x4.clone(),
            seeded(&ws, 20 + k as u64),
            seeded(&[ws[0]], 30 + k as u64),
        ];
        cases.push((
            name,
            ins,
            Box::new(move |x| x[0].conv2d(x[1], Some(x[2]), spec)),
        ));
    }
    let empty = ParamStore::<f64>::new();
    cases
        .iter()
        .map(|(name, ins, f)| check_module(name, &empty, ins, usize::MAX, seed, |_, x| Ok(f(x)?)))
        .collect()
}

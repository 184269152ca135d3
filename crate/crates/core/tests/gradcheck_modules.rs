use std::time::Instant;

use hiper_tensor::{gradcheck_at, Tensor, Var};
use hiperformer::check::{composite_suite, op_suite, random_tensor};
use hiperformer::loss::{combined_loss, LossConfig};
use hiperformer::nn::Ctx;
use hiperformer::{HiPerformer, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    for r in op_suite(1).unwrap() {
        assert!(r.max_error() < TOL, "{}: {:?}", r.module, r.wrt);
    }
}

#[test]
fn every_composite_matches_finite_differences() {
    let t0 = Instant::now();
    let reports = composite_suite(2).unwrap();
    assert_eq!(reports.len(), 12);
    for r in &reports {
        assert!(r.max_error() < TOL, "{}: {:?}", r.module, r.wrt);
        assert!(r.wrt.len() > 1 || r.module == "ACI" || r.module == "CombinedLoss");
    }
    assert!(t0.elapsed().as_secs() < 120);
}

#[test]
fn full_model_loss_gradient_on_sampled_kernel_entries() {
    let cfg = ModelConfig {
        input_size: 32,
        ..ModelConfig::desk()
    };
    let (model, store) = HiPerformer::init::<f64>(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let image = random_tensor(&[2, 3, 32, 32], &mut rng);
    let target: Vec<u8> = (0..2 * 32 * 32).map(|i| ((i / 7) % 4) as u8).collect();
    let id = store.find("lgff.stage2.mid.weight").unwrap();
    let w: Tensor<f64> = store.value(id).clone();
    let idx: Vec<usize> = (0..12).map(|k| k * w.numel() / 12).collect();
    let err = gradcheck_at(
        |v: Var<'_, f64>| {
            let tape = v.tape();
            let ctx = Ctx::train(tape, &store);
            ctx.bind(id, v);
            let logits =
                model
                    .forward(&ctx, tape.constant(image.clone()))
                    .map_err(|e| match e {
                        hiperformer::Error::Tensor(t) => t,
                        other => panic!("{other}"),
                    })?;
            combined_loss(logits, &target, &LossConfig::default()).map_err(|e| match e {
                hiperformer::Error::Tensor(t) => t,
                other => panic!("{other}"),
            })
        },
        &w,
        1e-6,
        Some(&idx),
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err:e}");
}

mod common;

use common::{rand_tensor, rng};
use hiper_tensor::{Tape, Tensor};
use hiperformer::config::{ModelConfig, Switches};
use hiperformer::nn::Ctx;
use hiperformer::{param_count, HiPerformer};

fn conv(ci: usize, co: usize, k: usize, g: usize, bias: bool) -> usize {
    co * (ci / g) * k * k + if bias { co } else { 0 }
}

fn cba(ci: usize, co: usize, k: usize, g: usize) -> usize {
    conv(ci, co, k, g, false) + 2 * co
}

/// Layer-by-layer count written independently of the builders.
fn oracle(cfg: &ModelConfig) -> usize {
    let w = cfg.widths;
    let s = cfg.switches;
    let mut total = 0;
    if s.use_local {
        total += cba(cfg.in_channels, cfg.stem_channels, 7, 1);
        let mut prev = cfg.stem_channels;
        for &c in &w {
            if prev != c {
                total += cba(prev, c, 1, 1);
            }
            total += 4 * cba(c, c, 3, 1) + conv(2 * c, c, 1, 1, true);
            prev = c;
        }
    }
    if s.use_global {
        total += conv(cfg.in_channels, w[0], cfg.patch_size, 1, true) + 2 * w[0];
        for st in 0..4 {
            let c = w[st];
            if st > 0 {
                total += 8 * w[st - 1] + 4 * w[st - 1] * c;
            }
            let m = cfg.window_at(st);
            let h = cfg.heads_at(st);
            let block = 4 * c
                + 3 * c * c
                + 3 * c
                + c * c
                + c
                + (2 * m - 1) * (2 * m - 1) * h
                + 2 * cfg.mlp_ratio * c * c
                + cfg.mlp_ratio * c
                + c;
            total += cfg.depths[st] * block;
        }
    }
    if s.use_lgff {
        for st in 0..4 {
            let c = w[st];
            let r = c / cfg.spe_reduction;
            let e = cfg.irmlp_expansion;
            if st > 0 {
                total += conv(w[st - 1], c, 1, 1, true);
            }
            total += conv(3 * c, c, 1, 1, true);
            total += conv(c, r, 7, 1, true) + conv(r, c, 7, 1, true);
            total += conv(3 * c, 3 * c, 3, 3 * c, true)
                + conv(3 * c, 3 * e * c, 1, 1, true)
                + conv(3 * e * c, c, 1, 1, true);
        }
    }
    if s.use_pmi {
        for i in 0..3 {
            total += cba(w[i], w[i], 3, 1) + conv(w[i], w[i], 1, 1, true);
            total += cba(w[i + 1], w[i], 3, 1) + conv(w[i], w[i], 1, 1, true);
        }
    }
    total += 2 * cba(w[3], w[3], 3, 1);
    for i in 0..3 {
        let (ce, cd) = (w[i], w[i + 1]);
        if s.use_pga {
            let g = cfg.eag_groups;
            total += cba(ce, ce, 1, g) + cba(cd, ce, 1, g) + conv(ce, 1, 1, 1, true);
            let q = cd / 4;
            for (&k, &pg) in cfg.psa_kernels.iter().zip(&cfg.psa_groups) {
                let pg = (1..=pg).rev().find(|d| pg % d == 0 && q % d == 0).unwrap();
                total += conv(cd, q, k, pg, true);
            }
            let hid = (q / cfg.psa_se_reduction).max(1);
            total += conv(q, hid, 1, 1, true) + conv(hid, q, 1, 1, true);
        }
        total += conv(ce + cd, ce, 1, 1, true) + 2 * cba(ce, ce, 3, 1);
    }
    total
        + w.iter()
            .map(|&c| conv(c, cfg.num_classes, 1, 1, true))
            .sum::<usize>()
}

#[test]
fn param_count_matches_layer_oracle() {
    let desk = ModelConfig::desk();
    assert_eq!(param_count(&desk).unwrap(), oracle(&desk));
    for row in Switches::ablation_rows() {
        let cfg = desk.clone().with_switches(row);
        assert_eq!(param_count(&cfg).unwrap(), oracle(&cfg), "{}", row.label());
    }
    let paper = ModelConfig::paper();
    assert_eq!(param_count(&paper).unwrap(), oracle(&paper));
}

#[test]
fn param_count_grows_with_width() {
    let a = ModelConfig::desk();
    let b = ModelConfig {
        widths: [16, 32, 64, 128],
        ..ModelConfig::desk()
    };
    assert!(param_count(&b).unwrap() > param_count(&a).unwrap());
}

#[test]
fn logits_shape_across_input_sizes() {
    for n in [32, 64, 96] {
        let cfg = ModelConfig {
            input_size: n,
            ..ModelConfig::desk()
        };
        let (model, store) = HiPerformer::init::<f32>(&cfg, 0).unwrap();
        let tape = Tape::new();
        let y = model
            .forward(
                &Ctx::train(&tape, &store),
                tape.constant(rand_tensor(&[2, 3, n, n], &mut rng(n as u64))),
            )
            .unwrap();
        assert_eq!(y.shape(), [2, 4, n, n]);
        assert!(y.value().data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn every_ablation_row_produces_finite_logits() {
    for row in Switches::ablation_rows() {
        let cfg = ModelConfig::desk().with_switches(row);
        let (model, store) = HiPerformer::init::<f32>(&cfg, 1).unwrap();
        let tape = Tape::new();
        let y = model
            .forward(
                &Ctx::eval(&tape, &store),
                tape.constant(rand_tensor(&[1, 3, 64, 64], &mut rng(2))),
            )
            .unwrap();
        assert_eq!(y.shape(), [1, 4, 64, 64], "{}", row.label());
        assert!(y.value().data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn wrong_input_is_rejected() {
    let (model, store) = HiPerformer::init::<f32>(&ModelConfig::desk(), 0).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    assert!(model
        .forward(&ctx, tape.constant(Tensor::zeros(vec![1, 3, 32, 32])))
        .is_err());
    assert!(model
        .forward(&ctx, tape.constant(Tensor::zeros(vec![1, 1, 64, 64])))
        .is_err());
    let bad = ModelConfig {
        switches: Switches {
            use_local: false,
            ..Switches::FULL
        },
        ..ModelConfig::desk()
    };
    assert!(HiPerformer::init::<f32>(&bad, 0).is_err());
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = ModelConfig::desk();
    let (_, a) = HiPerformer::init::<f32>(&cfg, 11).unwrap();
    let (_, b) = HiPerformer::init::<f32>(&cfg, 11).unwrap();
    let (_, c) = HiPerformer::init::<f32>(&cfg, 12).unwrap();
    let same = a
        .entries()
        .iter()
        .zip(b.entries())
        .all(|(x, y)| x.value.data() == y.value.data());
    let differ = a
        .entries()
        .iter()
        .zip(c.entries())
        .any(|(x, y)| x.value.data() != y.value.data());
    assert!(same && differ);
}

#[test]
fn eval_forward_is_batch_independent() {
    let cfg = ModelConfig::desk();
    let (model, store) = HiPerformer::init::<f64>(&cfg, 3).unwrap();
    let x = rand_tensor::<f64>(&[2, 3, 64, 64], &mut rng(4));
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let both = model.forward(&ctx, tape.constant(x.clone())).unwrap();
    let first = Tensor::new(vec![1, 3, 64, 64], x.data()[..3 * 64 * 64].to_vec()).unwrap();
    let one = model.forward(&ctx, tape.constant(first)).unwrap();
    let k = 4 * 64 * 64;
    for (a, b) in both.value().data()[..k].iter().zip(one.value().data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

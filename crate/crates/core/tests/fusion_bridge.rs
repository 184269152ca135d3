mod common;

use common::{assert_close, build, rand_tensor, rng};
use hiper_tensor::{Tape, Tensor};
use hiperformer::fusion::{aci, Irmlp, Lgff, Spe};
use hiperformer::nn::{zero_params, Ctx};
use hiperformer::ppa::{Eag, Pga, Pmi, Psa};

fn naive_aci(x: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = x.data();
    let mut out = d.to_vec();
    for b in 0..n {
        let row = |i: usize| &d[(b * c + i) * hw..(b * c + i + 1) * hw];
        for i in 0..c {
            let logits: Vec<f64> = (0..c)
                .map(|j| row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum())
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for p in 0..hw {
                out[(b * c + i) * hw + p] += (0..c).map(|j| e[j] / z * row(j)[p]).sum::<f64>();
            }
        }
    }
    out
}

#[test]
fn aci_matches_naive_loops() {
    let x = rand_tensor::<f64>(&[2, 3, 4, 5], &mut rng(1));
    let tape = Tape::new();
    let y = aci(tape.constant(x.clone())).unwrap();
    assert_close(y.value().data(), &naive_aci(&x), 1e-12);
}

#[test]
fn aci_single_channel_and_identical_channels_double() {
    let tape = Tape::new();
    let one = rand_tensor::<f64>(&[1, 1, 3, 3], &mut rng(2));
    let y = aci(tape.constant(one.clone())).unwrap();
    let twice: Vec<f64> = one.data().iter().map(|v| 2.0 * v).collect();
    assert_close(y.value().data(), &twice, 1e-15);
    let plane: Vec<f64> = one.data().to_vec();
    let same = Tensor::new(vec![1, 3, 3, 3], plane.repeat(3)).unwrap();
    let y = aci(tape.constant(same.clone())).unwrap();
    let twice: Vec<f64> = same.data().iter().map(|v| 2.0 * v).collect();
    assert_close(y.value().data(), &twice, 1e-14);
}

#[test]
fn spe_zero_weights_halve_input_and_gate_is_open_interval() {
    let (spe, mut store) = build::<f64, _>(0, |b| Spe::new(b, "spe", 4, 2));
    let x = rand_tensor::<f64>(&[2, 4, 5, 5], &mut rng(3));
    let tape = Tape::new();
    let g = spe
        .gate(&Ctx::train(&tape, &store), tape.constant(x.clone()))
        .unwrap();
    assert!(g.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    zero_params(&mut store, |_| true);
    let tape = Tape::new();
    let y = spe
        .forward(&Ctx::train(&tape, &store), tape.constant(x.clone()))
        .unwrap();
    let half: Vec<f64> = x.data().iter().map(|v| 0.5 * v).collect();
    assert_eq!(y.value().data(), &half[..]);
}

#[test]
fn irmlp_shape_and_zero_depthwise() {
    let (m, mut store) = build::<f64, _>(0, |b| Irmlp::new(b, "m", 6, 2, 4));
    let x = rand_tensor::<f64>(&[1, 6, 4, 4], &mut rng(4));
    zero_params(&mut store, |n| n.contains(".dw."));
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, &store);
    let xv = tape.constant(x);
    let y = m.forward(&ctx, xv).unwrap();
    assert_eq!(y.shape(), [1, 2, 4, 4]);
    let expect = m
        .project
        .forward(&ctx, m.expand.forward(&ctx, xv).unwrap().gelu().unwrap())
        .unwrap();
    assert_eq!(y.value().data(), expect.value().data());
}

#[test]
fn lgff_shapes_and_zero_weights() {
    let (f, mut store) = build::<f64, _>(0, |b| Lgff::new(b, "f", 4, Some(2), 2, 4));
    let mut r = rng(5);
    let (l, g, p) = (
        rand_tensor::<f64>(&[2, 4, 4, 4], &mut r),
        rand_tensor(&[2, 4, 4, 4], &mut r),
        rand_tensor(&[2, 2, 8, 8], &mut r),
    );
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, &store);
    let y = f
        .forward(
            &ctx,
            tape.constant(l.clone()),
            tape.constant(g.clone()),
            Some(tape.constant(p.clone())),
        )
        .unwrap();
    assert_eq!(y.shape(), [2, 4, 4, 4]);
    assert!(f
        .forward(
            &ctx,
            tape.constant(l.clone()),
            tape.constant(g.clone()),
            None
        )
        .is_err());
    zero_params(&mut store, |_| true);
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, &store);
    let y = f
        .forward(
            &ctx,
            tape.constant(l),
            tape.constant(g),
            Some(tape.constant(p)),
        )
        .unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn lgff_rejects_misaligned_inputs() {
    let (f, store) = build::<f64, _>(0, |b| Lgff::new(b, "f", 4, None, 2, 4));
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, &store);
    let a = tape.constant(Tensor::zeros(vec![1, 4, 4, 4]));
    let b = tape.constant(Tensor::zeros(vec![1, 4, 2, 2]));
    assert!(f.forward(&ctx, a, b, None).is_err());
    assert_eq!(f.forward(&ctx, a, a, None).unwrap().shape(), [1, 4, 4, 4]);
}

fn pyramid(widths: [usize; 4], base: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    (0..4)
        .map(|i| rand_tensor(&[2, widths[i], base >> i, base >> i], &mut r))
        .collect()
}

#[test]
fn pmi_passes_deepest_level_and_keeps_shapes() {
    let w = [2, 4, 4, 8];
    let (pmi, store) = build::<f64, _>(0, |b| Pmi::new(b, &w));
    let xs = pyramid(w, 16, 6);
    let tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
    let ys = pmi.forward(&Ctx::train(&tape, &store), &vars).unwrap();
    assert_eq!(ys[3].value().data(), xs[3].data());
    for (y, x) in ys.iter().zip(&xs) {
        assert_eq!(y.shape(), x.shape());
    }
}

#[test]
fn pmi_zero_deepest_level_annihilates() {
    let w = [2, 2, 4, 4];
    let (pmi, mut store) = build::<f64, _>(0, |b| Pmi::new(b, &w));
    zero_params(&mut store, |n| n.contains("fy") && n.contains("conv1.bias"));
    let mut xs = pyramid(w, 8, 7);
    xs[3] = Tensor::zeros(xs[3].shape().to_vec());
    let tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
    let ys = pmi.forward(&Ctx::eval(&tape, &store), &vars).unwrap();
    // eval-mode BN with fresh statistics and ReLU maps zero to zero
    for y in &ys[..3] {
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn pmi_rejects_bad_pyramid() {
    let w = [2, 2, 4, 4];
    let (pmi, store) = build::<f64, _>(0, |b| Pmi::new(b, &w));
    let mut xs = pyramid(w, 8, 7);
    xs[2] = Tensor::zeros(vec![2, 4, 3, 3]);
    let tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
    assert!(pmi.forward(&Ctx::train(&tape, &store), &vars).is_err());
}

#[test]
fn eag_zero_gate_scales_by_three_halves() {
    let (eag, mut store) = build::<f64, _>(1, |b| Eag::new(b, "eag", 4, 8, 4));
    let mut r = rng(8);
    let (e, d) = (
        rand_tensor::<f64>(&[2, 4, 4, 4], &mut r),
        rand_tensor::<f64>(&[2, 8, 4, 4], &mut r),
    );
    let tape = Tape::new();
    let g = eag
        .gate(
            &Ctx::train(&tape, &store),
            tape.constant(e.clone()),
            tape.constant(d.clone()),
        )
        .unwrap();
    assert_eq!(g.shape(), [2, 1, 4, 4]);
    assert!(g.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    zero_params(&mut store, |n| n.contains("psi"));
    let tape = Tape::new();
    let y = eag
        .forward(
            &Ctx::train(&tape, &store),
            tape.constant(e),
            tape.constant(d.clone()),
        )
        .unwrap();
    let expect: Vec<f64> = d.data().iter().map(|v| 1.5 * v).collect();
    assert_eq!(y.value().data(), &expect[..]);
}

#[test]
fn psa_weights_are_a_distribution_over_scales() {
    let (psa, mut store) = build::<f64, _>(2, |b| {
        Psa::new(b, "psa", 8, &[3, 5, 7, 9], &[1, 4, 8, 16], 2)
    });
    let x = rand_tensor::<f64>(&[2, 8, 6, 6], &mut rng(9));
    let tape = Tape::new();
    let (out, w) = psa
        .forward_with_weights(&Ctx::train(&tape, &store), tape.constant(x.clone()))
        .unwrap();
    assert_eq!(out.shape(), [2, 8, 6, 6]);
    let wv = w.value();
    for n in 0..2 {
        for q in 0..2 {
            let s: f64 = (0..4).map(|k| wv.data()[(n * 4 + k) * 2 + q]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    // identical branch outputs give identical SE scores, hence uniform weights
    zero_params(&mut store, |n| n.contains(".conv") && n.ends_with("weight"));
    for c in &psa.convs {
        let b = c.bias.unwrap();
        store.value_mut(b).data_mut().fill(0.3);
    }
    let tape = Tape::new();
    let (_, w) = psa
        .forward_with_weights(&Ctx::train(&tape, &store), tape.constant(x))
        .unwrap();
    assert_close(w.value().data(), &[0.25; 16], 1e-15);
}

#[test]
fn pga_maps_decoder_shape() {
    let (pga, store) = build::<f64, _>(3, |b| {
        Pga::new(b, "pga", 4, 8, 4, &[3, 5, 7, 9], &[1, 4, 8, 16], 4)
    });
    let mut r = rng(10);
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, &store);
    let e = tape.constant(rand_tensor::<f64>(&[1, 4, 4, 4], &mut r));
    let d = tape.constant(rand_tensor::<f64>(&[1, 8, 4, 4], &mut r));
    assert_eq!(pga.forward(&ctx, e, d).unwrap().shape(), [1, 8, 4, 4]);
    let small = tape.constant(rand_tensor::<f64>(&[1, 8, 2, 2], &mut r));
    assert!(pga.forward(&ctx, e, small).is_err());
}

#![allow(dead_code)]

use hiper_tensor::{Scalar, Tensor};
use hiperformer::nn::{InitRng, ParamBuilder, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

pub fn build<T: Scalar, M>(
    seed: u64,
    f: impl FnOnce(&mut ParamBuilder<'_, T>) -> M,
) -> (M, ParamStore<T>) {
    let mut store = ParamStore::new();
    let mut r = InitRng::new(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut r));
    (m, store)
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

/// Foreground pixels whose 4-neighbourhood leaves the mask or the image.
pub fn brute_surface(mask: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let inside = |y: i64, x: i64| {
        y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask[y as usize * w + x as usize]
    };
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if inside(y, x)
                && [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
                    .iter()
                    .any(|&(a, b)| !inside(a, b))
            {
                out.push((y, x));
            }
        }
    }
    out
}

fn brute_directed(a: &[(i64, i64)], b: &[(i64, i64)]) -> f64 {
    let mut d: Vec<f64> = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    d[lo] + (rank - lo as f64) * (d[hi] - d[lo])
}

/// All-pairs 95th-percentile Hausdorff distance between boundary sets.
pub fn brute_hd95(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let (sa, sb) = (brute_surface(a, h, w), brute_surface(b, h, w));
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => 0.0,
        (false, false) => brute_directed(&sa, &sb).max(brute_directed(&sb, &sa)),
        _ => ((h * h + w * w) as f64).sqrt(),
    }
}

/// Random binary mask pair with a mix of blobs and noise.
pub fn random_mask_pair(rng: &mut impl Rng, h: usize, w: usize) -> (Vec<bool>, Vec<bool>) {
    let draw = |rng: &mut dyn rand::RngCore| -> Vec<bool> {
        let density: f64 = rng.random_range(0.0..0.6);
        let (cy, cx, r) = (
            rng.random_range(0..h) as f64,
            rng.random_range(0..w) as f64,
            rng.random_range(0.0..6.0),
        );
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                (y - cy).hypot(x - cx) < r || rng.random_bool(density * 0.3)
            })
            .collect()
    };
    (draw(rng), draw(rng))
}

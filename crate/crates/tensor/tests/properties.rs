use hiper_tensor::{conv2d_reference, conv2d_tensor, io, softmax_tensor, ConvSpec, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shift(x in tensor(vec![3, 5]), c in -50.0f64..50.0) {
        let y = softmax_tensor(&x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = (0..5).map(|j| y.get(&[r, j])).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        let shifted = softmax_tensor(&x.map(|v| v + c), 1).unwrap();
        prop_assert!(shifted.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn im2col_matches_direct_loops(
        c_per_group in 1usize..3,
        groups in 1usize..3,
        o_per_group in 1usize..3,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        padding in 0usize..3,
        dilation in 1usize..3,
        hw in 5usize..8,
        seed in any::<u64>(),
    ) {
        let spec = ConvSpec::new(stride, padding, dilation, groups);
        prop_assume!(spec.out_extent(hw, k).is_some());
        let c = c_per_group * groups;
        let o = o_per_group * groups;
        let gen = |n: usize, salt: u64| -> Vec<f64> {
            (0..n).map(|i| (((i as u64).wrapping_mul(2654435761) ^ seed ^ salt) % 1000) as f64 / 500.0 - 1.0).collect()
        };
        let x = Tensor::new([2, c, hw, hw], gen(2 * c * hw * hw, 1)).unwrap();
        let w = Tensor::new([o, c_per_group, k, k], gen(o * c_per_group * k * k, 2)).unwrap();
        let b = Tensor::new([o], gen(o, 3)).unwrap();
        let fast = conv2d_tensor(&x, &w, Some(&b), spec).unwrap();
        let slow = conv2d_reference(&x, &w, Some(&b), spec).unwrap();
        prop_assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn htsr_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
        let t = Tensor::new(shape, data).unwrap();
        let mut buf = Vec::new();
        io::write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(io::read_tensor::<f32, _>(&buf[..]).unwrap(), t);
    }
}

#[test]
fn depthwise_equals_independent_single_channel_convs() {
    let c = 3;
    let x = Tensor::<f64>::new(
        [2, c, 6, 6],
        (0..2 * c * 36)
            .map(|i| ((i * 7) % 11) as f64 - 5.0)
            .collect(),
    )
    .unwrap();
    let w = Tensor::<f64>::new(
        [c, 1, 3, 3],
        (0..c * 9).map(|i| ((i * 5) % 7) as f64 * 0.25).collect(),
    )
    .unwrap();
    let spec = ConvSpec::new(1, 2, 2, c);
    let joint = conv2d_tensor(&x, &w, None, spec).unwrap();
    for ch in 0..c {
        for n in 0..2 {
            let xs: Vec<f64> = (0..36).map(|i| x.data()[(n * c + ch) * 36 + i]).collect();
            let xs = Tensor::new([1, 1, 6, 6], xs).unwrap();
            let ws = Tensor::new([1, 1, 3, 3], w.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
            let single = conv2d_tensor(&xs, &ws, None, ConvSpec::new(1, 2, 2, 1)).unwrap();
            for i in 0..36 {
                assert_eq!(single.data()[i], joint.data()[(n * c + ch) * 36 + i]);
            }
        }
    }
}

#[test]
fn kernels_are_bit_deterministic() {
    let x = Tensor::<f32>::new(
        [4, 8, 16, 16],
        (0..4 * 8 * 256).map(|i| (i as f32 * 0.013).cos()).collect(),
    )
    .unwrap();
    let w = Tensor::<f32>::new(
        [8, 8, 3, 3],
        (0..8 * 8 * 9)
            .map(|i| (i as f32 * 0.7).sin() * 0.1)
            .collect(),
    )
    .unwrap();
    let a = conv2d_tensor(&x, &w, None, ConvSpec::same(3, 1)).unwrap();
    let b = conv2d_tensor(&x, &w, None, ConvSpec::same(3, 1)).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

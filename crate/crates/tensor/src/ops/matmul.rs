use crate::error::{shape_err, Result};
use crate::ops::elementwise::broadcast_shape;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

struct BatchPlan {
    out_shape: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    /// (a, b, out) element offsets of each batch entry.
    offsets: Vec<(usize, usize, usize)>,
}

fn plan(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return shape_err(
            "matmul",
            format!("operands must be at least 2-D: {a:?} · {b:?}"),
        );
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return shape_err("matmul", format!("inner dims differ: {a:?} · {b:?}"));
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let Some(batch) = broadcast_shape(ba, bb) else {
        return shape_err(
            "matmul",
            format!("batch dims do not broadcast: {a:?} · {b:?}"),
        );
    };
    let count = numel(&batch);
    let r = batch.len();
    let stride_of = |dims: &[usize]| {
        let off = r - dims.len();
        let mut s = vec![0usize; r];
        let mut acc = 1;
        for i in (0..dims.len()).rev() {
            s[i + off] = if dims[i] == 1 { 0 } else { acc };
            acc *= dims[i];
        }
        s
    };
    let (sa, sb) = (stride_of(ba), stride_of(bb));
    let mut offsets = Vec::with_capacity(count);
    let mut idx = vec![0usize; r];
    for c in 0..count {
        let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        offsets.push((ia * m * k, ib * k * n, c * m * n));
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < batch[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(BatchPlan {
        out_shape,
        m,
        k,
        n,
        offsets,
    })
}

/// Batched product with broadcast batch dims, on plain tensors.
pub fn matmul_tensor<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let p = plan(a.shape(), b.shape())?;
    let mut out = vec![T::ZERO; numel(&p.out_shape)];
    let (m, k, n) = (p.m, p.k, p.n);
    if b.rank() == 2 {
        // one tall product over all batch rows of `a`
        let rows = a.numel() / k.max(1);
        gemm(
            MatRef::new(a.data(), rows, k),
            MatRef::new(b.data(), k, n),
            &mut out,
            T::ONE,
            T::ZERO,
        );
    } else {
        for &(oa, ob, oc) in &p.offsets {
            gemm(
                MatRef::new(&a.data()[oa..oa + m * k], m, k),
                MatRef::new(&b.data()[ob..ob + k * n], k, n),
                &mut out[oc..oc + m * n],
                T::ONE,
                T::ZERO,
            );
        }
    }
    Tensor::new(p.out_shape, out)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = matmul_tensor(&a, &b)?;
        self.record(
            "matmul",
            out,
            &[self, other],
            Box::new(|args| {
                let (a, b) = (&args.inputs[0], &args.inputs[1]);
                let p = plan(a.shape(), b.shape())?;
                let (m, k, n) = (p.m, p.k, p.n);
                let g = args.grad.data();
                let mut ga = args.needs[0].then(|| vec![T::ZERO; a.numel()]);
                let mut gb = args.needs[1].then(|| vec![T::ZERO; b.numel()]);
                if b.rank() == 2 {
                    let rows = a.numel() / k.max(1);
                    let gmat = MatRef::new(g, rows, n);
                    if let Some(ga) = ga.as_mut() {
                        gemm(gmat, MatRef::new(b.data(), k, n).t(), ga, T::ONE, T::ZERO);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm(
                            MatRef::new(a.data(), rows, k).t(),
                            gmat,
                            gb,
                            T::ONE,
                            T::ZERO,
                        );
                    }
                } else {
                    for &(oa, ob, oc) in &p.offsets {
                        let gmat = MatRef::new(&g[oc..oc + m * n], m, n);
                        if let Some(ga) = ga.as_mut() {
                            let bt = MatRef::new(&b.data()[ob..ob + k * n], k, n).t();
                            gemm(gmat, bt, &mut ga[oa..oa + m * k], T::ONE, T::ONE);
                        }
                        if let Some(gb) = gb.as_mut() {
                            let at = MatRef::new(&a.data()[oa..oa + m * k], m, k).t();
                            gemm(at, gmat, &mut gb[ob..ob + k * n], T::ONE, T::ONE);
                        }
                    }
                }
                Ok(vec![
                    ga.map(|d| Tensor::new(a.shape().to_vec(), d)).transpose()?,
                    gb.map(|d| Tensor::new(b.shape().to_vec(), d)).transpose()?,
                ])
            }),
        )
    }
}

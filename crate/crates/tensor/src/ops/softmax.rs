use crate::error::{shape_err, Result};
use crate::ops::shape::split_at_axis;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(op, format!("axis {axis} for shape {shape:?}"));
    }
    Ok(split_at_axis(shape, axis))
}

/// Max-subtracted softmax along `axis` of a plain tensor.
pub fn softmax_tensor<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = check_axis("softmax", x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut mx = src[at(0)];
            for j in 1..n {
                mx = mx.max(src[at(j)]);
            }
            let mut total = T::ZERO;
            for j in 0..n {
                let e = (src[at(j)] - mx).exp();
                out[at(j)] = e;
                total += e;
            }
            let inv = T::ONE / total;
            for j in 0..n {
                out[at(j)] *= inv;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let out = softmax_tensor(&self.value(), axis)?;
        let (outer, n, inner) = split_at_axis(out.shape(), axis);
        self.record(
            "softmax",
            out,
            &[self],
            Box::new(move |args| {
                // dx = y ⊙ (g − Σ g·y)
                let (y, g) = (args.out.data(), args.grad.data());
                let mut dx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(args.out.shape().to_vec(), dx)?)])
            }),
        )
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = check_axis("log_softmax", x.shape(), axis)?;
        let src = x.data();
        let mut out = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = src[at(0)];
                for j in 1..n {
                    mx = mx.max(src[at(j)]);
                }
                let lse = (0..n).map(|j| (src[at(j)] - mx).exp()).sum::<T>().ln() + mx;
                for j in 0..n {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        self.record(
            "log_softmax",
            Tensor::new(x.shape().to_vec(), out)?,
            &[self],
            Box::new(move |args| {
                // dx = g − softmax · Σ g
                let (y, g) = (args.out.data(), args.grad.data());
                let mut dx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let total: T = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(args.out.shape().to_vec(), dx)?)])
            }),
        )
    }
}

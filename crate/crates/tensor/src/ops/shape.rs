use std::rc::Rc;

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if numel(shape) != v.numel() {
            return shape_err("reshape", format!("{:?} -> {:?}", v.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        self.record(
            "reshape",
            out,
            &[self],
            Box::new(|args| {
                let g = args.grad.clone().reshape(args.inputs[0].shape().to_vec())?;
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.record(
            "permute",
            out,
            &[self],
            Box::new(move |args| Ok(vec![Some(args.grad.permute(&inverse)?)])),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return shape_err("transpose_last", "rank < 2");
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(
                "narrow",
                format!("axis {axis} range {start}+{len} on {shape:?}"),
            );
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.record(
            "narrow",
            Tensor::new(out_shape, data)?,
            &[self],
            Box::new(move |args| {
                let mut g = vec![T::ZERO; outer * n * inner];
                let gd = args.grad.data();
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                Ok(vec![Some(Tensor::new(shape.clone(), g)?)])
            }),
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let Some(first) = parts.first() else {
            return invalid("concat", "no inputs");
        };
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for rank {}", base.len()));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return shape_err("concat", format!("{:?} vs {:?} on axis {axis}", s, base));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                let start = o * e * inner;
                data.extend_from_slice(&v.data()[start..start + e * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        first.record(
            "concat",
            Tensor::new(out_shape, data)?,
            parts,
            Box::new(move |args| {
                let gd = args.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(extents.len());
                for (k, &e) in extents.iter().enumerate() {
                    if !args.needs[k] {
                        grads.push(None);
                        offset += e;
                        continue;
                    }
                    let mut g = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        g.extend_from_slice(&gd[start..start + e * inner]);
                    }
                    grads.push(Some(Tensor::new(args.inputs[k].shape().to_vec(), g)?));
                    offset += e;
                }
                Ok(grads)
            }),
        )
    }

    /// Gathers `out[i] = self.flat[indices[i]]` into `out_shape`. Backward
    /// scatter-adds, so repeated indices are allowed.
    pub fn take(self, indices: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if numel(out_shape) != indices.len() {
            return shape_err(
                "take",
                format!("{} indices for shape {:?}", indices.len(), out_shape),
            );
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.numel()) {
            return shape_err(
                "take",
                format!("index {bad} out of range for {} elements", v.numel()),
            );
        }
        let src = v.data();
        let data: Vec<T> = indices.iter().map(|&i| src[i]).collect();
        self.record(
            "take",
            Tensor::new(out_shape.to_vec(), data)?,
            &[self],
            Box::new(move |args| {
                let mut g = Tensor::zeros(args.inputs[0].shape().to_vec());
                let gd = g.data_mut();
                for (&i, &v) in indices.iter().zip(args.grad.data()) {
                    gd[i] += v;
                }
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let s = self.value().sum();
        self.record(
            "sum",
            Tensor::scalar(s),
            &[self],
            Box::new(|args| {
                let g = args.grad.item();
                Ok(vec![Some(Tensor::full(args.inputs[0].shape().to_vec(), g))])
            }),
        )
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        if n == 0 {
            return invalid("mean", "empty tensor");
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return shape_err("sum_axis", format!("axis {axis} for rank {}", shape.len()));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let mut out = vec![T::ZERO; outer * inner];
        let src = v.data();
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        self.record(
            "sum_axis",
            Tensor::new(out_shape, out)?,
            &[self],
            Box::new(move |args| {
                let gd = args.grad.data();
                let mut g = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        g.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                Ok(vec![Some(Tensor::new(shape.clone(), g)?)])
            }),
        )
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let n = self.shape().get(axis).copied().unwrap_or(0);
        if n == 0 {
            return shape_err("mean_axis", format!("axis {axis} empty or missing"));
        }
        self.sum_axis(axis)?.scale(1.0 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor, Var};
    use std::rc::Rc;

    #[test]
    fn narrow_and_concat_round_trip() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.leaf(Tensor::new([2, 4, 3], data).unwrap());
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 3).unwrap();
        let y = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(*y.value(), *x.value());
        let loss = y.mul(y).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        let expect: Vec<f64> = (0..24).map(|v| 2.0 * v as f64).collect();
        assert_eq!(g.get(x).unwrap().data(), &expect[..]);
    }

    #[test]
    fn take_scatter_adds_repeats() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([3], &[1., 2., 3.]).unwrap());
        let y = x.take(Rc::new(vec![2, 2, 0]), &[3]).unwrap();
        assert_eq!(y.value().data(), &[3., 3., 1.]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 0., 2.]);
    }

    #[test]
    fn sum_axis_keeps_dim() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let s = x.sum_axis(1).unwrap();
        assert_eq!(s.shape(), vec![2, 1]);
        assert_eq!(s.value().data(), &[6., 15.]);
        let s0 = x.sum_axis(0).unwrap();
        assert_eq!(s0.value().data(), &[5., 7., 9.]);
    }
}

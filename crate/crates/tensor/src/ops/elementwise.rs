use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Gelu,
}

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read `in_shape` as if broadcast to `out_shape`.
fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let r = out_shape.len();
    let off = r - in_shape.len();
    let mut s = vec![0; r];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        s[i + off] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    s
}

/// Visits every flat output index with the matching offsets into each
/// strided input.
fn for_each_offset<const K: usize>(
    out_shape: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K]),
) {
    let n = numel(out_shape);
    if n == 0 {
        return;
    }
    let r = out_shape.len();
    let mut idx = vec![0usize; r];
    let mut offs = [0usize; K];
    for i in 0..n {
        f(i, offs);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            for k in 0..K {
                offs[k] += strides[k][ax];
            }
            if idx[ax] < out_shape[ax] {
                break;
            }
            for k in 0..K {
                offs[k] -= idx[ax] * strides[k][ax];
            }
            idx[ax] = 0;
        }
    }
}

fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let Some(out_shape) = broadcast_shape(a.shape(), b.shape()) else {
        return shape_err(
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        );
    };
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![T::ZERO; numel(&out_shape)];
    let (da, db) = (a.data(), b.data());
    for_each_offset(&out_shape, [&sa, &sb], |i, [oa, ob]| {
        out[i] = f(da[oa], db[ob])
    });
    Tensor::new(out_shape, out)
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let s = broadcast_strides(shape, g.shape());
    let mut out = vec![T::ZERO; numel(shape)];
    let gd = g.data();
    for_each_offset(g.shape(), [&s], |i, [o]| out[o] += gd[i]);
    Tensor::new(shape.to_vec(), out).expect("reduce_to_shape")
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(
        self,
        other: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        grads: fn(
            &Tensor<T>,
            &Tensor<T>,
            &Tensor<T>,
            &Tensor<T>,
            &[bool],
        ) -> [Option<Tensor<T>>; 2],
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_binary(op, &a, &b, f)?;
        self.record(
            op,
            out,
            &[self, other],
            Box::new(move |args| {
                let (a, b) = (&args.inputs[0], &args.inputs[1]);
                let [ga, gb] = grads(args.grad, a, b, args.out, args.needs);
                Ok(vec![
                    ga.map(|g| reduce_to_shape(&g, a.shape())),
                    gb.map(|g| reduce_to_shape(&g, b.shape())),
                ])
            }),
        )
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            "add",
            |x, y| x + y,
            |g, _, _, _, needs| [needs[0].then(|| g.clone()), needs[1].then(|| g.clone())],
        )
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            "sub",
            |x, y| x - y,
            |g, _, _, _, needs| [needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))],
        )
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            "mul",
            |x, y| x * y,
            |g, a, b, _, needs| {
                [
                    needs[0].then(|| broadcast_binary("mul", g, b, |u, v| u * v).unwrap()),
                    needs[1].then(|| broadcast_binary("mul", g, a, |u, v| u * v).unwrap()),
                ]
            },
        )
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(
            other,
            "div",
            |x, y| x / y,
            |g, _, b, out, needs| {
                [
                    needs[0].then(|| broadcast_binary("div", g, b, |u, v| u / v).unwrap()),
                    needs[1].then(|| {
                        // d(a/b)/db = -out / b
                        let q = broadcast_binary("div", out, b, |o, v| o / v).unwrap();
                        q.zip_map(g, |q, g| -q * g)
                    }),
                ]
            },
        )
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: fn(x: T, y: T) -> T,
    ) -> Result<Var<'t, T>> {
        let out = self.value().map(f);
        self.record(
            op,
            out,
            &[self],
            Box::new(move |args| {
                let x = args.inputs[0].data();
                let y = args.out.data();
                let g = args.grad.data();
                let d: Vec<T> = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                Ok(vec![Some(Tensor::new(args.grad.shape().to_vec(), d)?)])
            }),
        )
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t, T>> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Gelu => self.gelu(),
        }
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(
            "relu",
            |x| if x > T::ZERO { x } else { T::ZERO },
            |x, _| if x > T::ZERO { T::ONE } else { T::ZERO },
        )
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::ONE - y))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.unary("gelu", gelu, |x, _| {
            let half = T::from_f64(0.5);
            let cdf = half * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = T::from_f64(0.398_942_280_401_432_7) * (-(half * x * x)).exp();
            cdf + x * pdf
        })
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.unary("ln", |x| x.ln(), |x, _| T::ONE / x)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary("neg", |x| -x, |_, _| -T::ONE)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::from_f64(c);
        let out = self.value().map(|x| x * c);
        self.record(
            "scale",
            out,
            &[self],
            Box::new(move |args| Ok(vec![Some(args.grad.map(|g| g * c))])),
        )
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::from_f64(c);
        let out = self.value().map(|x| x + c);
        self.record(
            "add_scalar",
            out,
            &[self],
            Box::new(|args| Ok(vec![Some(args.grad.clone())])),
        )
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * x * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 5]), Some(vec![2, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn activation_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([3], &[-3.0, 0.0, 3.0]).unwrap());
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 3.0]);
        assert_eq!(x.sigmoid().unwrap().value().data()[1], 0.5);
        assert_eq!(x.gelu().unwrap().value().data()[1], 0.0);
        let s = x.sigmoid().unwrap().value();
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn broadcast_mul_backward_reduces() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.leaf(Tensor::from_f64([3], &[1., 10., 100.]).unwrap());
        let loss = a.mul(b).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(g.get(a).unwrap().data(), &[1., 10., 100., 1., 10., 100.]);
    }
}

//! Central finite-difference check of tape gradients, run in `f64`.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::<f64>::new();
    let out = f(tape.constant(x.clone()))?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Analytic gradient of scalar `f` at `x`.
pub fn analytic_grad<F>(f: &F, x: &Tensor<f64>) -> Result<Tensor<f64>>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::<f64>::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(leaf)?;
    let mut grads = tape.backward(loss)?;
    Ok(grads.take_or_zeros(leaf, x.shape()))
}

/// Max over the checked elements of `|analytic − numeric| / max(1, |analytic|)`.
/// `indices = None` checks every element.
pub fn gradcheck_at<F>(f: F, x: &Tensor<f64>, h: f64, indices: Option<&[usize]>) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid {
            op: "gradcheck",
            detail: format!("step {h} must be positive"),
        });
    }
    let first = eval(&f, x)?;
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic(first, second));
    }
    let analytic = analytic_grad(&f, x)?;
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// [`gradcheck_at`] over every element of `x`.
pub fn finite_diff_gradcheck<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    gradcheck_at(f, x, h, None)
}

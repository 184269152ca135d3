use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Normalizes over the last axis, then applies `gamma`/`beta` of that extent.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
            return shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    x.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            );
        }
        let (g, b) = (gamma.value(), beta.value());
        let rows = x.numel() / d;
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut xhat = vec![T::ZERO; x.numel()];
        let mut inv_std = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::ONE / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        self.record(
            "layer_norm",
            Tensor::new(x.shape().to_vec(), out)?,
            &[self, gamma, beta],
            Box::new(move |args| {
                let gd = args.grad.data();
                let gamma = args.inputs[1].data();
                let mut dx = vec![T::ZERO; gd.len()];
                let mut dgamma = vec![T::ZERO; d];
                let mut dbeta = vec![T::ZERO; d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::ZERO;
                    let mut mean_dh_h = T::ZERO;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gamma[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh = mean_dh * inv_d;
                    mean_dh_h = mean_dh_h * inv_d;
                    for j in 0..d {
                        let dh = gr[j] * gamma[j];
                        dx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                Ok(vec![
                    Some(Tensor::new(args.inputs[0].shape().to_vec(), dx)?),
                    Some(Tensor::new([d], dgamma)?),
                    Some(Tensor::new([d], dbeta)?),
                ])
            }),
        )
    }

    /// Batch norm over axis 1 of an `[N, C, ...]` tensor using batch statistics.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: f64,
    ) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let x = self.value();
        let (n, c, inner) = bn_dims(x.shape(), &gamma.shape(), &beta.shape())?;
        let count = n * inner;
        let inv_m = T::from_f64(1.0 / count as f64);
        let eps_t = T::from_f64(eps);
        let (g, b) = (gamma.value(), beta.value());
        let src = x.data();
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        for ch in 0..c {
            let mut s = T::ZERO;
            for i in 0..n {
                s += src[(i * c + ch) * inner..(i * c + ch + 1) * inner]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
            let m = s * inv_m;
            let mut v = T::ZERO;
            for i in 0..n {
                for &val in &src[(i * c + ch) * inner..(i * c + ch + 1) * inner] {
                    v += (val - m) * (val - m);
                }
            }
            mean[ch] = m;
            var[ch] = v * inv_m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::ZERO; src.len()];
        let mut out = vec![T::ZERO; src.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    let h = (src[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = h * g.data()[ch] + b.data()[ch];
                }
            }
        }
        let unbiased = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|&v| v * T::from_f64(unbiased)).collect(),
        };
        let y = self.record(
            "batch_norm",
            Tensor::new(x.shape().to_vec(), out)?,
            &[self, gamma, beta],
            Box::new(move |args| {
                let gd = args.grad.data();
                let gamma = args.inputs[1].data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                let mut dx = vec![T::ZERO; gd.len()];
                for ch in 0..c {
                    // mean of dxhat and of dxhat·xhat over the channel
                    let mean_dh = gamma[ch] * dbeta[ch] * inv_m;
                    let mean_dh_h = gamma[ch] * dgamma[ch] * inv_m;
                    for i in 0..n {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            let dh = gd[j] * gamma[ch];
                            dx[j] = inv_std[ch] * (dh - mean_dh - xhat[j] * mean_dh_h);
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::new(args.inputs[0].shape().to_vec(), dx)?),
                    Some(Tensor::new([c], dgamma)?),
                    Some(Tensor::new([c], dbeta)?),
                ])
            }),
        )?;
        Ok((y, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, inner) = bn_dims(x.shape(), &gamma.shape(), &beta.shape())?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm", "running statistics length");
        }
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::ONE / (v + eps_t).sqrt())
            .collect();
        let mean = running_mean.to_vec();
        let (g, b) = (gamma.value(), beta.value());
        let src = x.data();
        let mut out = vec![T::ZERO; src.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    out[j] = (src[j] - mean[ch]) * inv_std[ch] * g.data()[ch] + b.data()[ch];
                }
            }
        }
        self.record(
            "batch_norm_eval",
            Tensor::new(x.shape().to_vec(), out)?,
            &[self, gamma, beta],
            Box::new(move |args| {
                let gd = args.grad.data();
                let src = args.inputs[0].data();
                let gamma = args.inputs[1].data();
                let mut dx = vec![T::ZERO; gd.len()];
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            dx[j] = gd[j] * gamma[ch] * inv_std[ch];
                            dgamma[ch] += gd[j] * (src[j] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::new(args.inputs[0].shape().to_vec(), dx)?),
                    Some(Tensor::new([c], dgamma)?),
                    Some(Tensor::new([c], dbeta)?),
                ])
            }),
        )
    }
}

fn bn_dims(shape: &[usize], gamma: &[usize], beta: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err("batch_norm", format!("need [N, C, ...], got {shape:?}"));
    }
    if shape[0] == 0 {
        return invalid("batch_norm", "batch of size 0");
    }
    let c = shape[1];
    if gamma != [c] || beta != [c] {
        return shape_err(
            "batch_norm",
            format!("gamma {gamma:?} / beta {beta:?} for {c} channels"),
        );
    }
    Ok((shape[0], c, shape[2..].iter().product()))
}

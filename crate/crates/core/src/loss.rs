//! Cross-entropy, soft Dice and their convex combination.

use std::rc::Rc;

use hiper_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of cross-entropy; Dice gets `1 − alpha`.
    pub alpha: f64,
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            smooth: DICE_EPS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return config_err(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.smooth > 0.0) {
            return config_err("Dice smoothing must be positive");
        }
        Ok(())
    }
}

fn check_target(logits_shape: &[usize], target: &[u8]) -> Result<(usize, usize, usize)> {
    if logits_shape.len() != 4 {
        return Err(Error::Data(format!(
            "logits must be [N, C, H, W], got {logits_shape:?}"
        )));
    }
    let (n, c, hw) = (
        logits_shape[0],
        logits_shape[1],
        logits_shape[2] * logits_shape[3],
    );
    if target.len() != n * hw {
        return Err(Error::Data(format!(
            "{} target labels for logits {logits_shape:?}",
            target.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
        return Err(Error::Data(format!(
            "target class {bad} out of range for {c} classes"
        )));
    }
    Ok((n, c, hw))
}

/// Mean pixel cross-entropy of channel-softmaxed `logits` against `target`
/// (`N·H·W` class ids, row-major).
pub fn ce_loss<'t, T: Scalar>(logits: Var<'t, T>, target: &[u8]) -> Result<Var<'t, T>> {
    let (n, c, hw) = check_target(&logits.shape(), target)?;
    let logp = logits.log_softmax(1)?;
    let idx: Vec<usize> = target
        .iter()
        .enumerate()
        .map(|(i, &t)| (i / hw * c + t as usize) * hw + i % hw)
        .collect();
    Ok(logp.take(Rc::new(idx), &[n * hw])?.mean()?.neg()?)
}

/// One-hot encoding `[N, C, H, W]` of `target`.
pub fn one_hot<T: Scalar>(target: &[u8], n: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut data = vec![T::ZERO; n * c * hw];
    for (i, &t) in target.iter().enumerate() {
        data[(i / hw * c + t as usize) * hw + i % hw] = T::ONE;
    }
    Tensor::new(vec![n, c, h, w], data).expect("one-hot shape")
}

/// `1 − mean_c (2|P∩Y| + ε)/(|P| + |Y| + ε)` over all classes, with soft
/// intersections summed over the whole batch.
pub fn dice_loss<'t, T: Scalar>(
    probs: Var<'t, T>,
    target: &[u8],
    smooth: f64,
) -> Result<Var<'t, T>> {
    let s = probs.shape();
    let (n, c, _) = check_target(&s, target)?;
    let y = probs.tape().constant(one_hot(target, n, c, s[2], s[3]));
    let per_class =
        |v: Var<'t, T>| -> Result<Var<'t, T>> { Ok(v.sum_axis(0)?.sum_axis(2)?.sum_axis(3)?) };
    let inter = per_class(probs.mul(y)?)?;
    let denom = per_class(probs.add(y)?)?;
    let dice = inter
        .scale(2.0)?
        .add_scalar(smooth)?
        .div(denom.add_scalar(smooth)?)?;
    Ok(dice.mean()?.neg()?.add_scalar(1.0)?)
}

/// `α·CE + (1 − α)·Dice`, Dice taken on the channel softmax of `logits`.
pub fn combined_loss<'t, T: Scalar>(
    logits: Var<'t, T>,
    target: &[u8],
    cfg: &LossConfig,
) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let ce = ce_loss(logits, target)?;
    let dice = dice_loss(logits.softmax(1)?, target, cfg.smooth)?;
    Ok(ce.scale(cfg.alpha)?.add(dice.scale(1.0 - cfg.alpha)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hiper_tensor::Tape;

    fn logits<'t>(tape: &'t Tape<f64>, shape: [usize; 4], v: &[f64]) -> Var<'t, f64> {
        tape.constant(Tensor::from_f64(shape, v).unwrap())
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let tape = Tape::new();
        let x = logits(&tape, [1, 3, 2, 2], &[0.0; 12]);
        let l = ce_loss(x, &[0, 1, 2, 1]).unwrap().value().item();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_pixel_hand_value() {
        // pixel 0 logits (2, 0), class 0; pixel 1 logits (0, 1), class 1
        let tape = Tape::new();
        let x = logits(&tape, [1, 2, 1, 2], &[2.0, 0.0, 0.0, 1.0]);
        let l = ce_loss(x, &[0, 1]).unwrap().value().item();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let expect = -(sig(2.0).ln() + sig(1.0).ln()) / 2.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_approach_zero() {
        let tape = Tape::new();
        let x = logits(&tape, [1, 2, 1, 1], &[50.0, -50.0]);
        assert!(ce_loss(x, &[0]).unwrap().value().item() < 1e-40);
    }

    #[test]
    fn dice_limits_and_half_overlap() {
        let tape = Tape::new();
        // binary, four pixels; class 1 predicted on {0,1}, present on {1,2}
        let pred = [1u8, 1, 0, 0];
        let gt = [0u8, 1, 1, 0];
        let hot = one_hot::<f64>(&pred, 1, 2, 1, 4);
        let p = tape.constant(hot.clone());
        let l = dice_loss(p, &pred, 1e-12).unwrap().value().item();
        assert!(l.abs() < 1e-9);
        let p = tape.constant(hot);
        let l = dice_loss(p, &gt, 1e-12).unwrap().value().item();
        // both classes overlap in exactly one of two pixels
        assert!((l - 0.5).abs() < 1e-9);
        let p = tape.constant(one_hot::<f64>(&[0, 0], 1, 2, 1, 2));
        let l = dice_loss(p, &[1, 1], 1e-12).unwrap().value().item();
        assert!((l - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_targets() {
        let tape = Tape::new();
        let x = logits(&tape, [1, 2, 1, 2], &[0.0; 4]);
        assert!(ce_loss(x, &[0, 2]).is_err());
        assert!(ce_loss(x, &[0]).is_err());
        assert!(LossConfig {
            alpha: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}

//! Training loop and evaluation.

use hiper_tensor::{Scalar, Tape, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, shuffled_indices, AugmentConfig, Dataset};
use crate::error::{config_err, Error, Result};
use crate::loss::{combined_loss, LossConfig};
use crate::metrics::{case_metrics, LabelMap, MetricReport, SurfaceMode};
use crate::model::HiPerformer;
use crate::nn::{Ctx, ParamStore};
use crate::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamWConfig, AdamWState};

/// What the cosine schedule's `t` counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleUnit {
    Epoch,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub eta_min: f64,
    pub t_max: f64,
    pub schedule: ScheduleUnit,
    /// Total optimization steps.
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            eta_min: 1e-6,
            t_max: 100.0,
            schedule: ScheduleUnit::Epoch,
            steps: 2000,
            batch_size: 8,
            clip_norm: 1.0,
            seed: 0,
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule: a single cosine cycle over all steps from a
    /// higher peak rate, since 2000 steps cover only ~40 epochs.
    pub fn desk() -> Self {
        Self {
            lr: 3e-4,
            t_max: 2000.0,
            schedule: ScheduleUnit::Step,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > self.eta_min && self.eta_min > 0.0) {
            return config_err(format!(
                "need lr {} > eta_min {} > 0",
                self.lr, self.eta_min
            ));
        }
        if !(self.clip_norm > 0.0) || !(self.t_max > 0.0) {
            return config_err("clip norm and t_max must be positive");
        }
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        (train_len / self.batch_size).max(1)
    }

    pub fn lr_at(&self, step: usize, epoch: usize) -> f64 {
        let t = match self.schedule {
            ScheduleUnit::Epoch => epoch,
            ScheduleUnit::Step => step,
        };
        cosine_lr(t as f64, self.t_max, self.lr, self.eta_min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome<T = f32> {
    pub store: ParamStore<T>,
    pub log: Vec<LogRecord>,
    pub epochs: usize,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.log {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Stacks `[c, n, n]` images into an `[N, c, n, n]` tensor.
pub fn batch_tensor<T: Scalar>(
    images: &[&[f32]],
    channels: usize,
    size: usize,
) -> Result<Tensor<T>> {
    let data = images
        .iter()
        .flat_map(|im| im.iter().map(|&v| T::from_f64(v as f64)))
        .collect();
    Ok(Tensor::new(vec![images.len(), channels, size, size], data)?)
}

/// Trains `store` in place from its current values; the loop is fully
/// determined by `cfg.seed` and the data.
pub fn train(
    model: &HiPerformer,
    mut store: ParamStore<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if data.size != model.cfg.input_size || data.channels != model.cfg.in_channels {
        return Err(Error::Data(format!(
            "data {}ch {}px does not match model {}ch {}px",
            data.channels, data.size, model.cfg.in_channels, model.cfg.input_size
        )));
    }
    for l in &data.labels {
        l.check_classes(model.cfg.num_classes)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spe = cfg.steps_per_epoch(data.len());
    let bs = cfg.batch_size.min(data.len());
    let mut state = AdamWState::new();
    let mut order = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let epoch = step / spe;
        if step % spe == 0 {
            order = shuffled_indices(data.len(), &mut rng);
        }
        let start = (step % spe) * bs;
        let mut images = Vec::with_capacity(bs);
        let mut target = Vec::with_capacity(bs * data.size * data.size);
        for &i in &order[start..start + bs] {
            let (img, lab) = augment(&data.images[i], &data.labels[i], &cfg.augment, &mut rng);
            images.push(img);
            target.extend_from_slice(&lab.data);
        }
        let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
        let x = batch_tensor::<f32>(&refs, data.channels, data.size)?;

        let tape = Tape::new();
        let ctx = Ctx::train(&tape, &store);
        let out = (|| -> Result<_> {
            let logits = model.forward(&ctx, tape.constant(x))?;
            let loss = combined_loss(logits, &target, &cfg.loss)?;
            let value = loss.value().item() as f64;
            let mut grads = tape.backward(loss)?;
            Ok((value, ctx.param_grads(&mut grads)))
        })();
        let (loss, mut grads) = match out {
            Ok(v) => v,
            Err(Error::Tensor(e @ TensorError::NonFinite { .. })) => {
                return Err(Error::Diverged {
                    step,
                    detail: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}"),
            });
        }
        let updates = ctx.take_updates();
        drop(ctx);
        let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        let lr = cfg.lr_at(step, epoch);
        adamw_step(&mut store, &grads, &mut state, lr, &cfg.optimizer);
        store.apply_updates(updates);
        let rec = LogRecord {
            step,
            epoch,
            lr,
            loss,
            grad_norm,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome {
        store,
        log,
        epochs: cfg.steps.div_ceil(spe),
    })
}

/// Class-id maps by channel argmax (first maximum wins).
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<LabelMap> {
    let s = logits.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let d = logits.data();
    (0..n)
        .map(|b| {
            let data = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(b * c + k) * hw + p] > d[(b * c + best) * hw + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap {
                height: h,
                width: w,
                data,
            }
        })
        .collect()
}

/// Inference-mode logits for a batch of images.
pub fn predict_logits(
    model: &HiPerformer,
    store: &ParamStore<f32>,
    images: &[&[f32]],
) -> Result<Tensor<f32>> {
    let x = batch_tensor::<f32>(images, model.cfg.in_channels, model.cfg.input_size)?;
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, store);
    let y = model.forward(&ctx, tape.constant(x))?;
    Ok((*y.value()).clone())
}

pub fn predict(
    model: &HiPerformer,
    store: &ParamStore<f32>,
    images: &[Vec<f32>],
    batch: usize,
) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&[f32]> = chunk.iter().map(|v| v.as_slice()).collect();
        out.extend(argmax_labels(&predict_logits(model, store, &refs)?));
    }
    Ok(out)
}

pub fn evaluate_predictions(
    preds: &[LabelMap],
    gts: &[LabelMap],
    num_classes: usize,
    mode: SurfaceMode,
) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} cases",
            preds.len(),
            gts.len()
        )));
    }
    let cases = preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, g))| case_metrics(i, p, g, num_classes, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::aggregate(cases, num_classes))
}

pub fn evaluate(
    model: &HiPerformer,
    store: &ParamStore<f32>,
    data: &Dataset,
    mode: SurfaceMode,
) -> Result<MetricReport> {
    for l in &data.labels {
        l.check_classes(model.cfg.num_classes)?;
    }
    let preds = predict(model, store, &data.images, 8)?;
    evaluate_predictions(&preds, &data.labels, model.cfg.num_classes, mode)
}

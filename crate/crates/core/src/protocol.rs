//! Experiment bundles and the multi-run protocols built on them.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Switches};
use crate::data::{generate_dataset, Dataset, Split, SynthSpec};
use crate::error::Result;
use crate::loss::LossConfig;
use crate::metrics::{MetricReport, SurfaceMode};
use crate::model::HiPerformer;
use crate::train::{evaluate, train, TrainConfig, TrainOutcome};

/// Everything one run needs, as read from a TOML file with `[model]`,
/// `[train]` and `[data]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthSpec,
    pub surface: SurfaceMode,
}

impl Experiment {
    /// Desk preset used by the training target: full model, 2000 steps.
    pub fn desk() -> Self {
        Self {
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let e: Self = toml::from_str(s)?;
        e.validate()?;
        Ok(e)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.size != self.model.input_size
            || self.data.num_classes != self.model.num_classes
            || self.data.channels != self.model.in_channels
        {
            return Err(crate::error::Error::Config(
                "data extent, channels and class count must match the model".into(),
            ));
        }
        Ok(())
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            generate_dataset(&self.data, Split::Train)?,
            generate_dataset(&self.data, Split::Test)?,
        ))
    }
}

pub struct RunResult {
    pub model: HiPerformer,
    pub outcome: TrainOutcome,
    pub report: MetricReport,
}

/// Initialises with `train.seed`, trains, and evaluates on `test`.
pub fn run(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    trainset: &Dataset,
    test: &Dataset,
    surface: SurfaceMode,
    on_step: impl FnMut(&crate::train::LogRecord),
) -> Result<RunResult> {
    let (model, store) = HiPerformer::init::<f32>(model_cfg, train_cfg.seed)?;
    let outcome = train(&model, store, trainset, train_cfg, on_step)?;
    let report = evaluate(&model, &outcome.store, test, surface)?;
    Ok(RunResult {
        model,
        outcome,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub switches: Switches,
    /// Mean foreground DSC in `[0, 1]` per seed.
    pub dsc: Vec<f64>,
    pub hd95: Vec<f64>,
}

impl AblationRow {
    pub fn mean_dsc(&self) -> f64 {
        self.dsc.iter().sum::<f64>() / self.dsc.len() as f64
    }

    pub fn mean_hd95(&self) -> f64 {
        self.hd95.iter().sum::<f64>() / self.hd95.len() as f64
    }
}

/// Trains and evaluates each switch row for every seed on one dataset.
pub fn ablate(
    exp: &Experiment,
    rows: &[Switches],
    seeds: &[u64],
    mut progress: impl FnMut(&Switches, u64, &MetricReport),
) -> Result<Vec<AblationRow>> {
    let (trainset, test) = exp.datasets()?;
    rows.iter()
        .map(|&sw| {
            let cfg = exp.model.clone().with_switches(sw);
            let mut row = AblationRow {
                switches: sw,
                dsc: Vec::new(),
                hd95: Vec::new(),
            };
            for &seed in seeds {
                let tc = TrainConfig {
                    seed,
                    ..exp.train.clone()
                };
                let r = run(&cfg, &tc, &trainset, &test, exp.surface, |_| {})?;
                progress(&sw, seed, &r.report);
                row.dsc.push(r.report.mean_dsc());
                row.hd95.push(r.report.mean().hd95);
            }
            Ok(row)
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "-" };
    let mut s = format!(
        "{:<6} {:<6} {:<6} {:<6} {:<6} {:>8} {:>8}\n",
        "Local", "Global", "LGFF", "PMI", "PGA", "DSC%", "HD95"
    );
    for r in rows {
        let w = &r.switches;
        s.push_str(&format!(
            "{:<6} {:<6} {:<6} {:<6} {:<6} {:>8.2} {:>8.3}\n",
            mark(w.use_local),
            mark(w.use_global),
            mark(w.use_lgff),
            mark(w.use_pmi),
            mark(w.use_pga),
            100.0 * r.mean_dsc(),
            r.mean_hd95()
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub dsc: f64,
    pub hd95: f64,
}

pub const SWEEP_ALPHAS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// One run per loss weight on a shared dataset and seed.
pub fn alpha_sweep(exp: &Experiment, alphas: &[f64]) -> Result<Vec<AlphaRow>> {
    let (trainset, test) = exp.datasets()?;
    alphas
        .iter()
        .map(|&alpha| {
            let tc = TrainConfig {
                loss: LossConfig {
                    alpha,
                    ..exp.train.loss
                },
                ..exp.train.clone()
            };
            let r = run(&exp.model, &tc, &trainset, &test, exp.surface, |_| {})?;
            Ok(AlphaRow {
                alpha,
                dsc: r.report.mean_dsc(),
                hd95: r.report.mean().hd95,
            })
        })
        .collect()
}

pub fn alpha_table(rows: &[AlphaRow]) -> String {
    let mut s = format!("{:>6} {:>8} {:>8}\n", "alpha", "DSC%", "HD95");
    for r in rows {
        s.push_str(&format!(
            "{:>6.2} {:>8.2} {:>8.3}\n",
            r.alpha,
            100.0 * r.dsc,
            r.hd95
        ));
    }
    s
}

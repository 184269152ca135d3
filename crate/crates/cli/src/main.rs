use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hiperformer::check::{composite_suite, op_suite};
use hiperformer::checkpoint;
use hiperformer::config::Switches;
use hiperformer::data::{generate_dataset, Split};
use hiperformer::image_io::{load_image_png, save_image_png, save_label_png};
use hiperformer::protocol::{
    ablate, ablation_table, alpha_sweep, alpha_table, run, Experiment, SWEEP_ALPHAS,
};
use hiperformer::train::{argmax_labels, evaluate, predict_logits, ScheduleUnit};

#[derive(Parser)]
#[command(
    name = "hiperformer",
    version,
    about = "Hybrid CNN / window-attention segmentation on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on synthetic data and write a checkpoint, loss log and test report.
    Train {
        /// Experiment TOML with optional [model], [train] and [data] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the synthetic test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-case and aggregate records as JSON lines.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Segment one PNG image and write the label map as a class-id PNG.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference gradient checks of every op and composite module.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train and evaluate the six ablation switch rows.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate across cross-entropy weights.
    AlphaSweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic dataset as PNG images and label maps.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Print the default experiment configuration as TOML.
    DefaultConfig,
}

fn load_experiment(path: Option<&Path>) -> Result<Experiment> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Experiment::from_toml(&text)?)
        }
        None => Ok(Experiment::desk()),
    }
}

/// Overrides the step budget; a per-step schedule is stretched to match.
fn set_steps(exp: &mut Experiment, steps: Option<usize>) {
    if let Some(s) = steps {
        exp.train.steps = s;
        if exp.train.schedule == ScheduleUnit::Step {
            exp.train.t_max = s as f64;
        }
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            out,
            steps,
            seed,
        } => {
            let mut exp = load_experiment(config.as_deref())?;
            set_steps(&mut exp, steps);
            if let Some(s) = seed {
                exp.train.seed = s;
            }
            let (trainset, test) = exp.datasets()?;
            let r = run(
                &exp.model,
                &exp.train,
                &trainset,
                &test,
                exp.surface,
                |rec| {
                    if rec.step % 100 == 0 {
                        eprintln!(
                            "step {:>5} epoch {:>3} lr {:.3e} loss {:.5}",
                            rec.step, rec.epoch, rec.lr, rec.loss
                        );
                    }
                },
            )?;
            fs::create_dir_all(&out)?;
            checkpoint::save(out.join("checkpoint"), &exp.model, &r.outcome.store)?;
            fs::write(out.join("experiment.toml"), exp.to_toml()?)?;
            fs::write(out.join("loss.jsonl"), r.outcome.log_jsonl()?)?;
            fs::write(out.join("report.jsonl"), r.report.to_jsonl()?)?;
            print!("{}", r.report.to_table());
        }
        Cmd::Eval {
            checkpoint: dir,
            config,
            report,
        } => {
            let (model, store) = checkpoint::load(&dir)
                .with_context(|| format!("loading checkpoint {}", dir.display()))?;
            let mut exp = load_experiment(config.as_deref())?;
            exp.model = model.cfg.clone();
            if exp.data.num_classes != model.cfg.num_classes {
                bail!(
                    "data has {} classes, checkpoint {}",
                    exp.data.num_classes,
                    model.cfg.num_classes
                );
            }
            let test = generate_dataset(&exp.data, Split::Test)?;
            let rep = evaluate(&model, &store, &test, exp.surface)?;
            print!("{}", rep.to_table());
            if let Some(p) = report {
                fs::write(p, rep.to_jsonl()?)?;
            }
        }
        Cmd::Infer {
            checkpoint: dir,
            input,
            output,
        } => {
            let (model, store) = checkpoint::load(&dir)
                .with_context(|| format!("loading checkpoint {}", dir.display()))?;
            let (img, h, w) =
                load_image_png(&input).with_context(|| format!("reading {}", input.display()))?;
            let n = model.cfg.input_size;
            if h != n || w != n || model.cfg.in_channels != 3 {
                bail!("model expects a {n}x{n} RGB image, got {w}x{h}");
            }
            let logits = predict_logits(&model, &store, &[&img])?;
            save_label_png(&output, &argmax_labels(&logits)[0])?;
        }
        Cmd::Gradcheck { seed, tol } => {
            let mut failed = 0;
            let mut reports = op_suite(seed)?;
            reports.extend(composite_suite(seed)?);
            for r in reports {
                let e = r.max_error();
                let ok = e < tol;
                failed += usize::from(!ok);
                println!(
                    "{:<16} max rel err {:.3e} over {} tensors  {}",
                    r.module,
                    e,
                    r.wrt.len(),
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed > 0 {
                bail!("{failed} checks above tolerance {tol}");
            }
        }
        Cmd::Ablate {
            config,
            seeds,
            steps,
            out,
        } => {
            let mut exp = load_experiment(config.as_deref())?;
            set_steps(&mut exp, steps);
            let rows = ablate(&exp, &Switches::ablation_rows(), &seeds, |sw, seed, rep| {
                eprintln!(
                    "{} seed {seed}: DSC {:.2}%",
                    sw.label(),
                    100.0 * rep.mean_dsc()
                );
            })?;
            write_or_print(out.as_deref(), &ablation_table(&rows))?;
        }
        Cmd::AlphaSweep {
            config,
            alphas,
            steps,
            out,
        } => {
            let mut exp = load_experiment(config.as_deref())?;
            set_steps(&mut exp, steps);
            let alphas = alphas.unwrap_or_else(|| SWEEP_ALPHAS.to_vec());
            let rows = alpha_sweep(&exp, &alphas)?;
            write_or_print(out.as_deref(), &alpha_table(&rows))?;
        }
        Cmd::Synth { config, out } => {
            let exp = load_experiment(config.as_deref())?;
            for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
                let d = generate_dataset(&exp.data, split)?;
                let dir = out.join(name);
                fs::create_dir_all(&dir)?;
                for (i, (img, lab)) in d.images.iter().zip(&d.labels).enumerate() {
                    save_image_png(
                        dir.join(format!("{i:05}_image.png")),
                        img,
                        d.channels,
                        d.size,
                    )?;
                    save_label_png(dir.join(format!("{i:05}_label.png")), lab)?;
                }
            }
        }
        Cmd::DefaultConfig => print!("{}", Experiment::desk().to_toml()?),
    }
    Ok(())
}

use std::fs;

use hiperformer::checkpoint;
use hiperformer::config::{ModelConfig, Switches};
use hiperformer::data::{
    generate_dataset, generate_sample, AugmentConfig, Dataset, Split, SynthSpec,
};
use hiperformer::image_io::{load_image_png, load_label_png, save_image_png, save_label_png};
use hiperformer::metrics::SurfaceMode;
use hiperformer::protocol::{ablate, alpha_sweep, run, Experiment, SWEEP_ALPHAS};
use hiperformer::train::{
    evaluate, evaluate_predictions, predict, train, ScheduleUnit, TrainConfig,
};
use hiperformer::HiPerformer;

fn small_spec(train: usize) -> SynthSpec {
    SynthSpec {
        size: 32,
        train_count: train,
        test_count: 8,
        ..SynthSpec::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        ..ModelConfig::desk()
    }
}

fn small_train(steps: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: batch,
        lr: 1e-3,
        schedule: ScheduleUnit::Step,
        t_max: steps as f64,
        ..TrainConfig::default()
    }
}

fn small_experiment(steps: usize) -> Experiment {
    Experiment {
        model: small_model(),
        train: small_train(steps, 4),
        data: small_spec(8),
        surface: SurfaceMode::Boundary,
    }
}

#[test]
fn class_presence_matches_subset_sampling() {
    let spec = SynthSpec::default();
    let n = 1000;
    let mut seen = [0usize; 4];
    for i in 0..n {
        let (_, label) = generate_sample(&spec, Split::Train, i);
        for c in 1..4u8 {
            if label.data.contains(&c) {
                seen[c as usize] += 1;
            }
        }
    }
    let expect = spec.class_presence();
    assert!((expect - 4.0 / 7.0).abs() < 1e-12);
    for c in 1..4 {
        let f = seen[c] as f64 / n as f64;
        assert!((f - expect).abs() <= 0.1 * expect, "class {c}: {f}");
    }
}

#[test]
fn splits_are_disjoint_streams() {
    let spec = small_spec(4);
    let a = generate_dataset(&spec, Split::Train).unwrap();
    let b = generate_dataset(&spec, Split::Test).unwrap();
    assert_ne!(a.images[0], b.images[0]);
    assert_eq!(a, generate_dataset(&spec, Split::Train).unwrap());
}

#[test]
fn loss_decreases_within_five_epochs() {
    let data = generate_dataset(&small_spec(16), Split::Train).unwrap();
    let (model, store) = HiPerformer::init::<f32>(&small_model(), 0).unwrap();
    let out = train(&model, store, &data, &small_train(20, 4), |_| {}).unwrap();
    let epoch_mean = |e: usize| {
        let l: Vec<f64> = out
            .log
            .iter()
            .filter(|r| r.epoch == e)
            .map(|r| r.loss)
            .collect();
        l.iter().sum::<f64>() / l.len() as f64
    };
    assert_eq!(out.epochs, 5);
    assert!(
        epoch_mean(4) < epoch_mean(0),
        "{} vs {}",
        epoch_mean(4),
        epoch_mean(0)
    );
}

#[test]
fn same_seed_same_curve_and_weights() {
    let data = generate_dataset(&small_spec(8), Split::Train).unwrap();
    let go = |seed| {
        let cfg = TrainConfig {
            seed,
            ..small_train(4, 4)
        };
        let (model, store) = HiPerformer::init::<f32>(&small_model(), seed).unwrap();
        train(&model, store, &data, &cfg, |_| {}).unwrap()
    };
    let (a, b, c) = (go(3), go(3), go(4));
    assert_eq!(a.log_jsonl().unwrap(), b.log_jsonl().unwrap());
    assert_ne!(a.log_jsonl().unwrap(), c.log_jsonl().unwrap());
    for (x, y) in a.store.entries().iter().zip(b.store.entries()) {
        assert_eq!(x.value.data(), y.value.data());
    }
}

#[test]
fn every_ablation_row_fits_a_fixed_batch() {
    let data = generate_dataset(&small_spec(4), Split::Train).unwrap();
    let cfg = TrainConfig {
        augment: AugmentConfig {
            hflip: false,
            vflip: false,
            rotate: false,
            p: 0.0,
        },
        ..small_train(20, 4)
    };
    for row in Switches::ablation_rows() {
        let (model, store) =
            HiPerformer::init::<f32>(&small_model().with_switches(row), 1).unwrap();
        let out = train(&model, store, &data, &cfg, |_| {}).unwrap();
        let (first, last) = (out.log[0].loss, out.log.last().unwrap().loss);
        assert!(last < first, "{}: {first} -> {last}", row.label());
    }
}

#[test]
fn invalid_training_config_is_rejected() {
    let data = generate_dataset(&small_spec(4), Split::Train).unwrap();
    let (model, store) = HiPerformer::init::<f32>(&small_model(), 0).unwrap();
    let bad = TrainConfig {
        batch_size: 0,
        ..small_train(2, 4)
    };
    assert!(train(&model, store.clone(), &data, &bad, |_| {}).is_err());
    let mismatched = Dataset { size: 64, ..data };
    assert!(train(&model, store, &mismatched, &small_train(2, 4), |_| {}).is_err());
}

#[test]
fn perfect_predictions_score_perfectly() {
    let data = generate_dataset(&small_spec(4), Split::Test).unwrap();
    let rep = evaluate_predictions(&data.labels, &data.labels, 4, SurfaceMode::Boundary).unwrap();
    assert_eq!(rep.rows.len(), 4);
    for r in &rep.rows {
        assert_eq!(
            (r.dsc, r.hd95, r.recall, r.iou),
            (1.0, 0.0, 1.0, 1.0),
            "{}",
            r.name
        );
    }
    assert!(
        evaluate_predictions(&data.labels[..1], &data.labels, 4, SurfaceMode::Boundary).is_err()
    );
}

#[test]
fn evaluation_report_is_well_formed() {
    let test = generate_dataset(&small_spec(4), Split::Test).unwrap();
    let (model, store) = HiPerformer::init::<f32>(&small_model(), 0).unwrap();
    let rep = evaluate(&model, &store, &test, SurfaceMode::Boundary).unwrap();
    assert_eq!(rep.cases.len(), test.len());
    assert_eq!(rep.mean().name, "mean");
    for r in &rep.rows {
        assert!((0.0..=1.0).contains(&r.dsc) && r.hd95 >= 0.0);
    }
    let jsonl = rep.to_jsonl().unwrap();
    assert_eq!(jsonl.lines().count(), rep.cases.len() + rep.rows.len());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let exp = small_experiment(2);
    let (trainset, test) = exp.datasets().unwrap();
    let r = run(
        &exp.model,
        &exp.train,
        &trainset,
        &test,
        exp.surface,
        |_| {},
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    checkpoint::save(&a, &exp.model, &r.outcome.store).unwrap();
    checkpoint::save(&b, &exp.model, &r.outcome.store).unwrap();
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap());
    }
    let (model, store) = checkpoint::load(&a).unwrap();
    assert_eq!(
        predict(&model, &store, &test.images, 4).unwrap(),
        predict(&r.model, &r.outcome.store, &test.images, 4).unwrap()
    );
    let rep = evaluate(&model, &store, &test, exp.surface).unwrap();
    assert_eq!(rep.to_jsonl().unwrap(), r.report.to_jsonl().unwrap());
}

#[test]
fn checkpoint_shape_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, store) = HiPerformer::init::<f32>(&small_model(), 0).unwrap();
    checkpoint::save(dir.path(), &small_model(), &store).unwrap();
    let wider = ModelConfig {
        widths: [16, 16, 32, 64],
        ..small_model()
    };
    fs::write(
        dir.path().join(checkpoint::CONFIG_FILE),
        wider.to_toml().unwrap(),
    )
    .unwrap();
    assert!(checkpoint::load(dir.path()).is_err());
}

#[test]
fn png_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (image, label) = generate_sample(&small_spec(1), Split::Test, 0);
    save_label_png(dir.path().join("l.png"), &label).unwrap();
    assert_eq!(load_label_png(dir.path().join("l.png")).unwrap(), label);
    save_image_png(dir.path().join("i.png"), &image, 3, 32).unwrap();
    let (back, h, w) = load_image_png(dir.path().join("i.png")).unwrap();
    assert_eq!((h, w), (32, 32));
    for (a, b) in image.iter().zip(&back) {
        assert!((a.clamp(0.0, 1.0) - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn experiment_toml_round_trip_and_validation() {
    let exp = Experiment::desk();
    assert_eq!(Experiment::from_toml(&exp.to_toml().unwrap()).unwrap(), exp);
    let mut bad = small_experiment(2);
    bad.data.size = 64;
    assert!(Experiment::from_toml(&bad.to_toml().unwrap()).is_err());
}

#[test]
fn ablation_and_alpha_protocols_produce_full_tables() {
    let exp = small_experiment(1);
    let mut calls = 0;
    let rows = ablate(&exp, &Switches::ablation_rows(), &[0], |_, _, _| calls += 1).unwrap();
    assert_eq!((rows.len(), calls), (6, 6));
    assert!(rows
        .iter()
        .all(|r| r.dsc.len() == 1 && (0.0..=1.0).contains(&r.mean_dsc())));
    let sweep = alpha_sweep(&exp, &SWEEP_ALPHAS).unwrap();
    assert_eq!(
        sweep.iter().map(|r| r.alpha).collect::<Vec<_>>(),
        SWEEP_ALPHAS
    );
}

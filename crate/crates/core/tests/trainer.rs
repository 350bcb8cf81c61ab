mod common;

use common::{random_tensor, rng, shape};
use drgrade_core::autograd::Tape;
use drgrade_core::backbone::{model_loss, AttentionMode, ModelAssembly};
use drgrade_core::datapipe::synthetic::synthetic_splits;
use drgrade_core::datapipe::ImageSet;
use drgrade_core::trainer::*;
use drgrade_core::Error;

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        phase1_epochs: 1,
        stage_widths: vec![4, 8],
        reduced_channels: 8,
        reduction_ratio: 2,
        k: 2,
        input_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

fn small_data(seed: u64) -> [ImageSet; 3] {
    synthetic_splits(6, 16, seed, [0.5, 0.3, 0.2]).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-15
}

#[test]
fn defaults_follow_the_published_schedule() {
    let c = TrainConfig::default();
    assert_eq!((c.epochs, c.batch_size, c.phase1_epochs, c.plateau_patience, c.k), (40, 16, 10, 3, 5));
    assert_eq!((c.lr_phase1, c.lr_phase2, c.plateau_factor), (5e-3, 8e-5, 0.8));
    c.validate().unwrap();
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let c = small_config(9);
    assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    assert!(matches!(TrainConfig::from_toml("epochs = 3\nlearning_rate = 0.1\n"), Err(Error::Config(_))));
    let partial = TrainConfig::from_toml("epochs = 7\nattention = \"cab_only\"\n").unwrap();
    assert_eq!(partial.epochs, 7);
    assert_eq!(partial.attention, AttentionMode::CabOnly);
    assert_eq!(partial.batch_size, 16);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { plateau_factor: 1.0, ..TrainConfig::default() },
        TrainConfig { plateau_factor: 0.0, ..TrainConfig::default() },
        TrainConfig { lr_phase2: -1.0, ..TrainConfig::default() },
        TrainConfig { plateau_patience: 0, ..TrainConfig::default() },
        TrainConfig { input_size: 100, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn strictly_decreasing_losses_never_reduce_the_rate() {
    let history: Vec<f64> = (0..30).map(|i| 2.0 - i as f64 * 0.05).collect();
    assert!(plateau_trace(&history, 5e-3, 3, 0.8).iter().all(|&lr| lr == 5e-3));
}

#[test]
fn three_worse_epochs_reduce_once() {
    let trace = plateau_trace(&[1.0, 1.1, 1.2, 1.3], 5e-3, 3, 0.8);
    assert_eq!(trace[..3], [5e-3; 3]);
    assert!(close(trace[3], 4e-3));
    assert!(close(plateau_schedule(&[1.0, 1.1, 1.2, 1.3], 5e-3, 3, 0.8), 4e-3));
}

#[test]
fn flat_losses_over_nine_epochs_reduce_three_times() {
    // Reference loss before training, then nine flat epochs.
    let trace = plateau_trace(&[0.7; 10], 5e-3, 3, 0.8);
    let mut distinct = vec![trace[0]];
    for &lr in &trace {
        if lr != *distinct.last().unwrap() {
            distinct.push(lr);
        }
    }
    let want = [5e-3, 4e-3, 3.2e-3, 2.56e-3];
    assert_eq!(distinct.len(), 4);
    for (a, b) in distinct.iter().zip(want) {
        assert!(close(*a, b), "{distinct:?}");
    }
    assert!(close(trace[9] / 5e-3, 0.512));
}

#[test]
fn improvement_resets_the_patience_counter() {
    let trace = plateau_trace(&[1.0, 1.1, 1.1, 0.9, 1.0, 1.0, 1.0], 1.0, 3, 0.5);
    assert_eq!(trace, [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5]);
    assert_eq!(plateau_schedule(&[], 1.0, 3, 0.5), 1.0);
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let [tr, va, _] = small_data(0);
    let cfg = TrainConfig { epochs: 0, ..small_config(0) };
    let model = ModelAssembly::new(cfg.model_config(), 0).unwrap();
    let out = train(model.clone(), &tr, &va, &cfg).unwrap();
    assert!(out.logs.is_empty());
    assert_eq!(out.model, model);
    assert_eq!(out.best, model);
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn empty_split_is_a_config_error() {
    let [tr, va, _] = small_data(0);
    let empty = ImageSet { images: tr.images.clone(), labels: vec![] };
    let cfg = small_config(0);
    let model = ModelAssembly::new(cfg.model_config(), 0).unwrap();
    assert!(matches!(train(model.clone(), &tr, &empty, &cfg), Err(Error::Config(_))));
    assert!(matches!(train(model, &empty, &va, &cfg), Err(Error::Config(_))));
}

#[test]
fn first_batch_loss_is_near_ln5() {
    let cfg = TrainConfig { input_size: 32, ..TrainConfig::default() };
    let model = ModelAssembly::new(cfg.model_config(), 3).unwrap();
    let [tr, _, _] = synthetic_splits(4, 32, 3, [0.5, 0.3, 0.2]).unwrap();
    let (images, labels) = tr.batch(&(0..tr.len()).collect::<Vec<_>>()).unwrap();
    let mut tape = Tape::new();
    let (loss, _) = model_loss(&mut tape, &images, &labels, &model, true, 1, 0.0).unwrap();
    let l = tape.value(loss).values()[0];
    assert!((l - 5f64.ln()).abs() < 0.1, "{l}");
}

#[test]
fn phase_one_leaves_the_backbone_untouched() {
    let [tr, va, _] = small_data(1);
    let cfg = TrainConfig { epochs: 2, phase1_epochs: 2, ..small_config(1) };
    let model = ModelAssembly::new(cfg.model_config(), 1).unwrap();
    let out = train(model.clone(), &tr, &va, &cfg).unwrap();
    for (a, b) in out.model.backbone.iter().zip(&model.backbone) {
        assert_eq!(a.weight.tensor.values(), b.weight.tensor.values());
        assert_eq!(a.bias.tensor.values(), b.bias.tensor.values());
    }
    assert_ne!(out.model.head, model.head);
    assert!(out.logs.iter().all(|l| l.phase == 1 && l.lr == cfg.lr_phase1));
    assert!(!out.model.backbone_frozen());
}

#[test]
fn phase_two_updates_the_backbone_at_the_second_rate() {
    let [tr, va, _] = small_data(2);
    let cfg = small_config(2);
    let model = ModelAssembly::new(cfg.model_config(), 2).unwrap();
    let out = train(model.clone(), &tr, &va, &cfg).unwrap();
    assert_ne!(out.model.backbone, model.backbone);
    assert_eq!(out.logs.iter().map(|l| l.phase).collect::<Vec<_>>(), [1, 2, 2]);
    assert_eq!(out.logs[1].lr, cfg.lr_phase2);
    for l in &out.logs {
        assert!(l.train_loss >= 0.0 && l.val_loss >= 0.0);
        assert!((0.0..=1.0).contains(&l.train_accuracy) && (0.0..=1.0).contains(&l.val_accuracy));
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let [tr, va, _] = small_data(3);
    let cfg = small_config(3);
    let run = || {
        let model = ModelAssembly::new(cfg.model_config(), cfg.seed).unwrap();
        let out = train(model, &tr, &va, &cfg).unwrap();
        (out.model.to_checkpoint().to_bytes(), out.best.to_checkpoint().to_bytes(), out.logs)
    };
    assert_eq!(run(), run());
    let other = TrainConfig { seed: 4, ..cfg.clone() };
    let model = ModelAssembly::new(other.model_config(), 4).unwrap();
    let out = train(model, &tr, &va, &other).unwrap();
    assert_ne!(out.model.to_checkpoint().to_bytes(), run().0);
}

#[test]
fn best_checkpoint_reproduces_its_logged_val_loss() {
    let [tr, va, _] = small_data(5);
    let cfg = TrainConfig { epochs: 4, ..small_config(5) };
    let model = ModelAssembly::new(cfg.model_config(), 5).unwrap();
    let out = train(model, &tr, &va, &cfg).unwrap();
    let best_log = &out.logs[out.best_epoch - 1];
    assert_eq!(best_log.val_loss, out.best_val_loss);
    assert!(out.logs.iter().all(|l| l.val_loss >= out.best_val_loss));
    let bytes = out.best.to_checkpoint().to_bytes();
    let restored = ModelAssembly::from_checkpoint(
        cfg.model_config(),
        &drgrade_core::checkpoint::Checkpoint::from_bytes(&bytes).unwrap(),
    )
    .unwrap();
    let again = evaluate(&restored, &va, cfg.batch_size).unwrap();
    assert!((again.loss - best_log.val_loss).abs() < 1e-9);
}

#[test]
fn evaluating_against_own_predictions_gives_accuracy_one() {
    let cfg = small_config(6);
    let model = ModelAssembly::new(cfg.model_config(), 6).unwrap();
    let [tr, _, _] = small_data(6);
    let preds = evaluate(&model, &tr, 4).unwrap().predictions;
    let relabelled = ImageSet { images: tr.images.clone(), labels: preds };
    let e = evaluate(&model, &relabelled, 5).unwrap();
    assert_eq!(e.report.accuracy, 1.0);
}

#[test]
fn random_model_is_at_chance_on_balanced_data() {
    let cfg = small_config(7);
    let model = ModelAssembly::new(cfg.model_config(), 7).unwrap();
    let images = random_tensor(shape(1000, 3, 16, 16), &mut rng(8)).values().iter().map(|v| v.abs()).collect();
    let data = ImageSet {
        images: drgrade_core::Tensor::from_vec(shape(1000, 3, 16, 16), images).unwrap(),
        labels: (0..1000).map(|i| i % 5).collect(),
    };
    let e = evaluate(&model, &data, 100).unwrap();
    assert!((e.report.accuracy - 0.2).abs() <= 0.05, "{}", e.report.accuracy);
}

#[test]
fn evaluation_report_has_the_documented_keys() {
    let cfg = small_config(8);
    let model = ModelAssembly::new(cfg.model_config(), 8).unwrap();
    let [_, _, te] = small_data(8);
    let text = evaluate(&model, &te, 8).unwrap().report.to_toml();
    let table: toml::Table = text.parse().unwrap();
    for key in ["accuracy", "f1_macro", "precision_macro", "sensitivity_macro", "specificity_macro", "kappa_qwk", "per_class", "confusion_matrix"] {
        assert!(table.contains_key(key), "{key}");
    }
    assert_eq!(table.len(), 8);
}

#[test]
fn epoch_log_is_written_as_csv() {
    let dir = tempfile::tempdir().unwrap();
    let [tr, va, _] = small_data(9);
    let cfg = TrainConfig { epochs: 2, ..small_config(9) };
    let out = train(ModelAssembly::new(cfg.model_config(), 9).unwrap(), &tr, &va, &cfg).unwrap();
    let path = dir.path().join("epochs.csv");
    write_epoch_log(&path, &out.logs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,phase,train_loss,train_accuracy,val_loss,val_accuracy,lr");
    assert_eq!(lines.count(), 2);
}

#[test]
fn ablation_runs_four_variants_on_identical_data() {
    let [tr, va, te] = small_data(10);
    let cfg = TrainConfig { epochs: 1, ..small_config(10) };
    let rows = run_ablation(&cfg, &AttentionMode::ALL, &tr, &va, &te).unwrap();
    assert_eq!(rows.iter().map(|r| r.mode).collect::<Vec<_>>(), AttentionMode::ALL);
    let p: Vec<usize> = rows.iter().map(|r| r.parameters).collect();
    assert!(p[0] <= p[1] && p[0] <= p[2] && p[1] <= p[3] && p[2] <= p[3] && p[0] < p[3]);
    assert!(rows.iter().all(|r| r.data_fingerprint == rows[0].data_fingerprint));
    let csv = ablation_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,accuracy,f1,parameters");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("Baseline,") && lines[4].starts_with("+ GAB + CAB,"));
}

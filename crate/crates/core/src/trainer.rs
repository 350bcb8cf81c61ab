//! Two-phase training: head and attention first with the backbone frozen,
//! then everything at a lower learning rate. Adam, a plateau learning-rate
//! schedule, best-by-validation-loss tracking and the ablation runner.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::{model_loss, predict, AttentionMode, ModelAssembly, ModelConfig};
use crate::datapipe::ImageSet;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::optim::{adam_step, AdamState};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Training hyperparameters plus the architecture they train. Field names
/// double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Epochs with the backbone frozen; the rest fine-tune everything.
    pub phase1_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Channels per class in the category attention block.
    pub k: usize,
    pub seed: u64,
    pub stage_widths: Vec<usize>,
    pub reduced_channels: usize,
    pub reduction_ratio: usize,
    pub classes: usize,
    pub input_size: usize,
    pub dropout_rate: f64,
    pub cab_sigmoid: bool,
    /// Weight of an extra cross-entropy on the category scores.
    pub aux_score_loss_weight: f64,
    pub attention: AttentionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            lr_phase1: 5e-3,
            lr_phase2: 8e-5,
            phase1_epochs: 10,
            plateau_patience: 3,
            plateau_factor: 0.8,
            k: m.k,
            seed: 0,
            stage_widths: m.stage_widths,
            reduced_channels: m.reduced_channels,
            reduction_ratio: m.reduction_ratio,
            classes: m.classes,
            input_size: m.input_size,
            dropout_rate: m.dropout_rate,
            cab_sigmoid: m.cab_sigmoid,
            aux_score_loss_weight: 0.0,
            attention: m.attention,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            stage_widths: self.stage_widths.clone(),
            reduced_channels: self.reduced_channels,
            reduction_ratio: self.reduction_ratio,
            k: self.k,
            classes: self.classes,
            input_size: self.input_size,
            dropout_rate: self.dropout_rate,
            cab_sigmoid: self.cab_sigmoid,
            attention: self.attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau_patience must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor must lie in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if !(self.aux_score_loss_weight >= 0.0 && self.aux_score_loss_weight.is_finite()) {
            return Err(Error::Config("aux_score_loss_weight must be >= 0".into()));
        }
        self.model_config().validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reduce-on-plateau. The first observation only sets the reference; after
/// that an observation improves only if strictly below the best so far, and
/// `patience` consecutive non-improvements multiply the rate by `factor`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records a validation loss; returns true when the rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        match self.best {
            None => {
                self.best = Some(loss);
                false
            }
            Some(best) if loss < best => {
                self.best = Some(loss);
                self.stale = 0;
                false
            }
            Some(_) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr *= self.factor;
                    self.stale = 0;
                    true
                } else {
                    false
                }
            }
        }
    }
}

/// Rate after each entry of `history` (whose first entry is the reference
/// loss measured before training).
pub fn plateau_trace(history: &[f64], lr: f64, patience: usize, factor: f64) -> Vec<f64> {
    let mut s = PlateauScheduler::new(lr, patience, factor);
    history
        .iter()
        .map(|&l| {
            s.observe(l);
            s.lr()
        })
        .collect()
}

/// Rate after replaying `history`.
pub fn plateau_schedule(history: &[f64], lr: f64, patience: usize, factor: f64) -> f64 {
    plateau_trace(history, lr, patience, factor).last().copied().unwrap_or(lr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: u8,
    /// Mean training objective over the epoch's batches.
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Rate used for the epoch's updates.
    pub lr: f64,
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    for log in logs {
        w.serialize(log)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    }
    if logs.is_empty() {
        w.write_record(["epoch", "phase", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "lr"])
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Inference-mode results over a whole image set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean cross-entropy of the logits.
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub report: MetricsReport,
}

pub fn evaluate(model: &ModelAssembly, data: &ImageSet, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty set".into()));
    }
    let mut loss_sum = 0.0;
    let mut predictions = Vec::with_capacity(data.len());
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let (loss, pass) = model_loss(&mut tape, &images, &labels, model, false, 0, 0.0)?;
        loss_sum += tape.value(loss).values()[0] * chunk.len() as f64;
        predictions.extend(predict(tape.value(pass.logits)));
    }
    let report = MetricsReport::from_predictions(&data.labels, &predictions, model.config.classes)?;
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        predictions,
        report,
    })
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: ModelAssembly,
    /// Parameters at the epoch with the lowest validation loss.
    pub best: ModelAssembly,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss before any update; the schedule's reference point.
    pub initial_val_loss: f64,
    pub logs: Vec<EpochLog>,
}

fn run_epoch(
    model: &mut ModelAssembly,
    data: &ImageSet,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    lr: f64,
    epoch: usize,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64));
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let (images, labels) = data.batch(chunk)?;
        let dropout_seed = derive_seed(cfg.seed, Stream::Dropout, ((epoch as u64) << 32) | b as u64);
        let mut tape = Tape::new();
        let (loss, pass) = model_loss(
            &mut tape,
            &images,
            &labels,
            model,
            true,
            dropout_seed,
            cfg.aux_score_loss_weight,
        )?;
        let value = tape.value(loss).values()[0];
        if !value.is_finite() {
            return Err(Error::Contract(format!("non-finite loss {value} in epoch {epoch}")));
        }
        loss_sum += value * chunk.len() as f64;
        correct += predict(tape.value(pass.logits))
            .iter()
            .zip(&labels)
            .filter(|(p, t)| p == t)
            .count();
        tape.backward(loss)?;
        model.collect_grads(&tape);
        adam_step(&mut model.params_mut(), adam, lr)?;
    }
    model.clear_grads();
    let n = data.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Runs the configured epochs. Phase 1 (the first `phase1_epochs`) trains
/// with the backbone frozen at `lr_phase1`; phase 2 unfreezes it and
/// restarts Adam and the schedule at `lr_phase2`. The schedule observes the
/// validation loss after every epoch, with the pre-training loss (phase 1)
/// or the last phase-1 loss (phase 2) as its reference.
pub fn train(
    initial: ModelAssembly,
    train_set: &ImageSet,
    val_set: &ImageSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    let initial_val_loss = evaluate(&initial, val_set, cfg.batch_size)?.loss;
    let mut model = initial.clone();
    let mut best = initial;
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut adam = AdamState::default();
    let mut sched = PlateauScheduler::new(cfg.lr_phase1, cfg.plateau_patience, cfg.plateau_factor);
    sched.observe(initial_val_loss);
    let mut last_val = initial_val_loss;
    for epoch in 1..=cfg.epochs {
        let phase: u8 = if epoch <= cfg.phase1_epochs { 1 } else { 2 };
        if epoch == 1 && phase == 1 {
            model.set_backbone_frozen(true);
        }
        if phase == 2 && epoch == cfg.phase1_epochs + 1 {
            model.set_backbone_frozen(false);
            adam = AdamState::default();
            sched = PlateauScheduler::new(cfg.lr_phase2, cfg.plateau_patience, cfg.plateau_factor);
            sched.observe(last_val);
        }
        let lr = sched.lr();
        let (train_loss, train_accuracy) = run_epoch(&mut model, train_set, cfg, &mut adam, lr, epoch)?;
        let val = evaluate(&model, val_set, cfg.batch_size)?;
        sched.observe(val.loss);
        last_val = val.loss;
        if val.loss < best_val_loss {
            best_val_loss = val.loss;
            best_epoch = epoch;
            best = model.clone();
        }
        log::info!(
            "epoch {epoch:>3} phase {phase} lr {lr:.3e} train loss {train_loss:.4} acc {train_accuracy:.3} val loss {:.4} acc {:.3}",
            val.loss,
            val.report.accuracy
        );
        logs.push(EpochLog {
            epoch,
            phase,
            train_loss,
            train_accuracy,
            val_loss: val.loss,
            val_accuracy: val.report.accuracy,
            lr,
        });
    }
    model.set_backbone_frozen(false);
    best.set_backbone_frozen(false);
    if best_epoch == 0 {
        best_val_loss = initial_val_loss;
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        best_val_loss,
        initial_val_loss,
        logs,
    })
}

/// One row of the ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mode: AttentionMode,
    pub parameters: usize,
    /// Test-split evaluation of the best-by-validation model.
    pub report: MetricsReport,
    pub best_epoch: usize,
    /// Fingerprint of the data the variant saw; equal across rows.
    pub data_fingerprint: u64,
}

/// Trains and tests every mode in `modes` from the same seed and data.
pub fn run_ablation(
    base: &TrainConfig,
    modes: &[AttentionMode],
    train_set: &ImageSet,
    val_set: &ImageSet,
    test_set: &ImageSet,
) -> Result<Vec<AblationRow>> {
    let fingerprint = [train_set, val_set, test_set]
        .iter()
        .fold(0u64, |h, s| h.rotate_left(21) ^ s.fingerprint());
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let cfg = TrainConfig {
            attention: mode,
            ..base.clone()
        };
        let model = ModelAssembly::new(cfg.model_config(), cfg.seed)?;
        let parameters = model.parameter_count();
        log::info!("ablation: {} ({parameters} parameters)", mode.label());
        let outcome = train(model, train_set, val_set, &cfg)?;
        let report = evaluate(&outcome.best, test_set, cfg.batch_size)?.report;
        rows.push(AblationRow {
            mode,
            parameters,
            report,
            best_epoch: outcome.best_epoch,
            data_fingerprint: fingerprint,
        });
    }
    Ok(rows)
}

/// `method,accuracy,f1,parameters`, one line per row.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("method,accuracy,f1,parameters\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.mode.label(),
            r.report.accuracy,
            r.report.f1_macro,
            r.parameters
        ));
    }
    out
}

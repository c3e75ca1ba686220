//! Distillation and classification losses, AdamW, teacher-logit caching and
//! the epoch loop.

mod cache;
mod loss;
mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use cache::{cache_teacher_logits, LogitCache, TeacherSource};
pub use loss::{loss_cls, loss_distill, loss_total};
pub use optim::{opt_step, scheduled_lr, AdamState};

use crate::data::{batch_iter, DataError, Dataset};
use crate::diffcore::{DiffError, Graph};
use crate::vit::{forward_logits, ModelParams, VitError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },
    #[error("teacher logit cache is stale (cached dataset {cached:#018x}, current {dataset:#018x})")]
    StaleCache { cached: u64, dataset: u64 },
    #[error("training diverged at epoch {epoch}, step {step}: loss {value}")]
    Divergence { epoch: usize, step: usize, value: f64 },
    #[error("non-finite gradient in {name} at optimizer step {step}")]
    NonFiniteGrad { name: String, step: u64 },
    #[error("empty evaluation split")]
    EmptySplit,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

/// Optimisation and loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub grad_clip: Option<f64>,
    /// Distillation weight; 0 means pure classification.
    pub alpha: f64,
    pub tau: f64,
    pub tau_square_scaling: bool,
    /// Seeds per-epoch shuffling.
    pub seed: u64,
    /// Write wall-clock seconds to the metrics; off keeps metrics replayable
    /// byte for byte.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
            schedule: Schedule::Cosine,
            grad_clip: None,
            alpha: 0.9,
            tau: 1.0,
            tau_square_scaling: false,
            seed: 0,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// One metrics row. Epoch 0 is the no-tune snapshot taken before any
/// update; its `train_loss` is the classification loss on the train split.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub top1: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub rows: Vec<EpochRow>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,top1,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.top1, r.seconds
            )
            .unwrap();
        }
        out
    }

    /// Plain `key=value` lines.
    pub fn summary(&self) -> String {
        let last = self.rows.last();
        let best = self.rows.iter().map(|r| r.top1).fold(f64::NAN, f64::max);
        let mut out = String::new();
        writeln!(out, "epochs={}", self.rows.len().saturating_sub(1)).unwrap();
        writeln!(out, "steps={}", self.step_losses.len()).unwrap();
        if let Some(r) = last {
            writeln!(out, "final_train_loss={}", r.train_loss).unwrap();
            writeln!(out, "final_val_loss={}", r.val_loss).unwrap();
            writeln!(out, "final_top1={}", r.top1).unwrap();
            writeln!(out, "best_top1={best}").unwrap();
            writeln!(out, "seconds={}", r.seconds).unwrap();
        }
        out
    }

    pub fn final_row(&self) -> &EpochRow {
        self.rows.last().expect("metrics always hold the epoch-0 row")
    }
}

/// Evaluation batch size; results do not depend on it beyond rounding.
pub const EVAL_BATCH: usize = 250;

/// Mean cross-entropy (computed in `f64` from the logits) and top-1 accuracy
/// over `data` in natural order.
pub fn evaluate(model: &ModelParams<f32>, data: &Dataset) -> Result<(f64, f64), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for batch in batch_iter(data, EVAL_BATCH, None) {
        let logits = forward_logits(model, &batch.images)?;
        let (l, c) = logit_stats(logits.data(), logits.shape()[1], &batch.labels)?;
        loss += l;
        correct += c;
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Summed cross-entropy and correct count for row-major logits. Ties in the
/// arg-max resolve to the lowest class index.
pub fn logit_stats(logits: &[f32], classes: usize, labels: &[usize]) -> Result<(f64, usize), TrainError> {
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &y) in logits.chunks_exact(classes).zip(labels) {
        if y >= classes {
            return Err(TrainError::Label { label: y, classes });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        loss += lse - row[y] as f64;
        let arg = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
        correct += usize::from(arg == y);
    }
    Ok((loss, correct))
}

/// Non-finite activations during training count as divergence.
fn diverged(e: TrainError, epoch: usize, step: usize) -> TrainError {
    match e {
        TrainError::Diff(DiffError::NonFinite { .. }) | TrainError::Vit(VitError::Diff(DiffError::NonFinite { .. })) => {
            TrainError::Divergence {
                epoch,
                step,
                value: f64::NAN,
            }
        }
        other => other,
    }
}

/// Trains `model` in place. Without a teacher `cfg.alpha` must be 0; with
/// `alpha == 0` the teacher is never consulted.
pub fn train_model(
    model: &mut ModelParams<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<TeacherSource<'_>>,
) -> Result<Metrics, TrainError> {
    cfg.validate()?;
    let teacher = if cfg.alpha == 0.0 { None } else { teacher };
    match teacher {
        None if cfg.alpha > 0.0 => {
            return Err(TrainError::Config(format!(
                "alpha {} needs a teacher; use alpha = 0 for pure classification",
                cfg.alpha
            )))
        }
        Some(t) => t.check(train)?,
        None => {}
    }
    if model.config().classes != train.classes() {
        return Err(TrainError::Config(format!(
            "model has {} classes, data has {}",
            model.config().classes,
            train.classes()
        )));
    }

    let start = Instant::now();
    let seconds = || if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 };
    let mut metrics = Metrics::default();
    let (train_loss, _) = evaluate(model, train)?;
    let (val_loss, top1) = evaluate(model, val)?;
    metrics.rows.push(EpochRow {
        epoch: 0,
        train_loss,
        val_loss,
        top1,
        seconds: seconds(),
    });

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let mut state = AdamState::new();
    for epoch in 1..=cfg.epochs {
        let mut weighted = 0.0;
        for (step, batch) in batch_iter(train, cfg.batch_size, Some(cfg.epoch_seed(epoch))).enumerate() {
            let targets = teacher
                .map(|t| t.logits(&batch.indices, &batch.images))
                .transpose()?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let x = g.constant(&batch.images);
            let logits = model.forward(&mut g, &bound, x).map_err(|e| diverged(e.into(), epoch, step))?;
            let loss = loss_total(&mut g, logits, &batch.labels, targets.as_ref(), cfg)
                .map_err(|e| diverged(e, epoch, step))?;
            let value = g.item(loss) as f64;
            if !value.is_finite() {
                return Err(TrainError::Divergence { epoch, step, value });
            }
            g.backward(loss)?;
            model.zero_grad();
            model.accumulate_grads(&g, &bound)?;
            let lr = scheduled_lr(cfg, state.step(), total);
            opt_step(model, &mut state, cfg, lr)?;
            metrics.step_losses.push(value);
            weighted += value * batch.labels.len() as f64;
        }
        model.zero_grad();
        let (val_loss, top1) = evaluate(model, val).map_err(|e| diverged(e, epoch, 0))?;
        metrics.rows.push(EpochRow {
            epoch,
            train_loss: weighted / train.len() as f64,
            val_loss,
            top1,
            seconds: seconds(),
        });
    }
    Ok(metrics)
}

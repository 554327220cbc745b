//! Plain SGD training with validation-driven best-model selection.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Dataset, Label};
use crate::densenet::{Model, ModelError};
use crate::engine::{Mode, Parameter, Tape};
use crate::metrics::PredictionRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub dropout_rate: f32,
    pub seed: u64,
    /// Validation cadence in epochs; the last epoch is always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 200,
            learning_rate: 0.01,
            momentum: 0.0,
            dropout_rate: 0.25,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One history row. Validation values are NaN on epochs that were not evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()
    }
}

pub struct TrainOutcome {
    /// Snapshot taken at the best validation epoch.
    pub best: Model,
    pub history: TrainHistory,
}

/// One SGD update. With momentum `μ > 0`: `v ← μ·v + g`, `θ ← θ − lr·v`;
/// otherwise `θ ← θ − lr·g`. Frozen parameters are left alone.
pub fn sgd_step(param: &mut Parameter, lr: f32, momentum: f32, velocity: &mut Vec<f32>) {
    if !param.trainable {
        return;
    }
    let grad = param.grad.data();
    if momentum == 0.0 {
        for (t, g) in param.value.data_mut().iter_mut().zip(grad) {
            *t -= lr * g;
        }
        return;
    }
    if velocity.len() != grad.len() {
        *velocity = vec![0.0; grad.len()];
    }
    for ((t, v), g) in param.value.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *t -= lr * *v;
    }
}

/// Index of the largest logit; ties resolve to the lower class.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate_loss(model: &Model, data: &Dataset, batch_size: usize) -> Result<(f64, f64), ModelError> {
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for rows in make_batches(data.len(), batch_size, false, &mut ChaCha8Rng::seed_from_u64(0)) {
        let (x, labels) = data.batch(&rows);
        let logits = model.infer(&x)?;
        let (l, _) = crate::engine::softmax_cross_entropy(&logits, &labels)?;
        loss += l as f64 * rows.len() as f64;
        let c = logits.shape()[1];
        correct += logits
            .data()
            .chunks(c)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Inference-mode predictions, one record per sample in dataset order.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<PredictionRecord>, ModelError> {
    let mut out = Vec::with_capacity(data.len());
    for rows in make_batches(data.len(), batch_size.max(1), false, &mut ChaCha8Rng::seed_from_u64(0)) {
        let (x, _) = data.batch(&rows);
        let logits = model.infer(&x)?;
        let c = logits.shape()[1];
        for (row, &i) in logits.data().chunks(c).zip(&rows) {
            let s = &data.samples[i];
            let predicted = argmax(row);
            out.push(PredictionRecord {
                sample_id: s.path.clone(),
                patient_id: s.patient_id.clone(),
                magnification: s.magnification,
                true_label: s.label,
                // heads with more than two classes fold extra classes into malignant
                predicted_label: Label::from_index(predicted).unwrap_or(Label::Malignant),
            });
        }
    }
    Ok(out)
}

/// Trains for exactly `cfg.epochs` epochs and returns the snapshot with the
/// highest validation accuracy (earliest epoch on ties).
pub fn train_loop(model: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<f32>> = vec![Vec::new(); model.params.len()];
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model)> = None;

    for epoch in 1..=cfg.epochs {
        let mut running = 0.0f64;
        for (b, rows) in make_batches(train.len(), cfg.batch_size, true, &mut rng).into_iter().enumerate() {
            let (x, labels) = train.batch(&rows);
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let (logits, updates) = model.record(&mut tape, xv, Mode::Train, cfg.dropout_rate, &mut rng)?;
            let loss = tape.softmax_cross_entropy(logits, &labels).map_err(ModelError::from)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b + 1 });
            }
            running += value as f64 * rows.len() as f64;
            model.zero_grad();
            tape.backward_into(loss, &mut model.params).map_err(ModelError::from)?;
            model.apply_bn_updates(&updates);
            for (p, v) in model.params.iter_mut().zip(velocity.iter_mut()) {
                sgd_step(p, cfg.learning_rate, cfg.momentum, v);
            }
        }

        let record = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let (train_loss, train_acc) = evaluate_loss(model, train, cfg.batch_size)?;
            let (val_loss, val_acc) = evaluate_loss(model, val, cfg.batch_size)?;
            if best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
                best = Some((val_acc, model.clone()));
                history.best_epoch = epoch;
            }
            EpochRecord {
                epoch,
                train_loss,
                train_acc,
                val_loss,
                val_acc,
            }
        } else {
            EpochRecord {
                epoch,
                train_loss: running / train.len() as f64,
                train_acc: f64::NAN,
                val_loss: f64::NAN,
                val_acc: f64::NAN,
            }
        };
        history.epochs.push(record);
    }
    let (_, best) = best.expect("the final epoch is always evaluated");
    Ok(TrainOutcome { best, history })
}

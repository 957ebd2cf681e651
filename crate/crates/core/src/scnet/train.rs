use std::io::{self, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Model, Normalization};
use super::ScnetError;
use crate::nn::{AdamConfig, AdamState, Graph, Mode, Scalar};
use crate::rng::{derive_seed, indexed_seed, rng_from_seed};
use crate::trace::TraceSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    PerPointStandardize,
    None,
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero across all batches.
    Cosine,
}

impl LrSchedule {
    /// Rate for batch `step` of `total`.
    pub fn rate(self, lr: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => 0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of the training set held out when no validation set is given.
    pub validation_fraction: f64,
    pub normalize: Normalize,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: 1e-4,
            batch_size: 128,
            epochs: 50,
            seed: 0,
            validation_fraction: 0.1,
            normalize: Normalize::PerPointStandardize,
            schedule: LrSchedule::Constant,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ScnetError> {
        let bad = |m: &str| Err(ScnetError::InvalidConfig(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie strictly between 0 and 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's mini-batches, in training mode.
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (lowest validation loss).
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,train_acc,val_acc")?;
        for r in &self.epochs {
            writeln!(w, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc)?;
        }
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, set: &TraceSet, indices: &[usize]) -> Result<(f64, f64), ScnetError> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let logits = model.logits(set, chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| set.traces()[i].meta.label as usize).collect();
        let (l, probs) = crate::nn::softmax_xent(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        correct += probs
            .data()
            .chunks(model.n_classes())
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    let n = indices.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains on the stored labels with Adam and keeps the parameters of the
/// epoch with the lowest validation loss. Without `val`, a seeded
/// `validation_fraction` of `train` is held out.
pub fn train<T: Scalar>(
    model: Model<T>,
    train: &TraceSet,
    val: Option<&TraceSet>,
    cfg: &TrainConfig,
) -> Result<(Model<T>, History), ScnetError> {
    train_with_progress(model, train, val, cfg, |_| {})
}

pub fn train_with_progress<T: Scalar>(
    mut model: Model<T>,
    train: &TraceSet,
    val: Option<&TraceSet>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(Model<T>, History), ScnetError> {
    cfg.validate()?;
    for (what, set) in [("training", Some(train)), ("validation", val)] {
        let Some(set) = set else { continue };
        if set.is_empty() {
            return Err(ScnetError::LabelMissing(format!("{what} set has no labelled traces")));
        }
        if set.n_points() != model.input_len() {
            return Err(ScnetError::ShapeMismatch(format!(
                "{what} traces have {} points, model expects {}",
                set.n_points(),
                model.input_len()
            )));
        }
    }

    let mut train_idx: Vec<usize> = (0..train.n_traces()).collect();
    let (val_set, val_idx) = match val {
        Some(v) => (v, (0..v.n_traces()).collect::<Vec<_>>()),
        None => {
            if train.n_traces() < 2 {
                return Err(ScnetError::LabelMissing(
                    "need at least two traces to hold out a validation split".into(),
                ));
            }
            train_idx.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, "split")));
            let n_val = ((train.n_traces() as f64 * cfg.validation_fraction).round() as usize).clamp(1, train.n_traces() - 1);
            let held = train_idx.split_off(train.n_traces() - n_val);
            train_idx.sort_unstable();
            let mut held = held;
            held.sort_unstable();
            (train, held)
        }
    };

    model.normalization = match cfg.normalize {
        Normalize::PerPointStandardize => Some(Normalization::fit(train, &train_idx)),
        Normalize::None => None,
    };

    let mut adam = AdamState::new(&model.params, cfg.adam());
    let mut history = History::default();
    let mut best: Option<(f64, Vec<crate::nn::Tensor<T>>)> = None;
    let shuffle_seed = derive_seed(cfg.seed, "shuffle");
    let total_steps = cfg.epochs * train_idx.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng_from_seed(indexed_seed(shuffle_seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.traces()[i].meta.label as usize).collect();
            let x = model.batch_input(train, chunk);
            let (loss, hits, grads, updates) = {
                let mut g = Graph::new(&model.params, Mode::Train);
                let logits = model.forward(&mut g, x)?;
                let out = g.softmax_xent(logits, &labels)?;
                let loss = g.value(out).item();
                if !loss.is_finite() {
                    return Err(ScnetError::Diverged { epoch, batch: b });
                }
                let probs = g.probabilities(out).expect("cross-entropy node");
                let hits = probs
                    .data()
                    .chunks(model.n_classes())
                    .zip(&labels)
                    .filter(|(row, &y)| argmax(row) == y)
                    .count();
                (loss, hits, g.backward(out)?, g.running_updates())
            };
            model.params.zero_grads();
            grads.accumulate_into(&mut model.params);
            for (id, value) in updates {
                model.params.get_mut(id).value = value;
            }
            adam.config.lr = cfg.schedule.rate(cfg.lr, adam.t as usize, total_steps);
            adam.step(&mut model.params)?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        let n = order.len() as f64;
        let (val_loss, val_acc) = evaluate(&model, val_set, &val_idx)?;
        if !val_loss.is_finite() {
            return Err(ScnetError::Diverged { epoch, batch: order.len().div_ceil(cfg.batch_size) });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_loss,
            train_acc: correct as f64 / n,
            val_acc,
        };
        progress(&record);
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(l, _)| val_loss < *l) {
            best = Some((val_loss, model.params.values()));
            history.best_epoch = Some(epoch);
        }
    }
    if let Some((_, values)) = best {
        model.params.set_values(values)?;
    }
    Ok((model, history))
}

//! Supervised training with momentum SGD and a warmup + cosine schedule.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::optim::{sgd_step, LrSchedule, OptimizerState};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub momentum: f64,
    pub label_smoothing: f64,
    pub clip_global_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            base_lr: 0.05,
            warmup_fraction: 0.05,
            momentum: 0.9,
            label_smoothing: 0.0,
            clip_global_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid!("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(invalid!("warmup fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Mini-batch index lists for one epoch under a fixed permutation.
pub(crate) fn epoch_batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

pub(crate) fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

pub(crate) fn schedule_for(base_lr: f64, warmup_fraction: f64, total_steps: usize) -> LrSchedule {
    LrSchedule {
        base_lr,
        warmup_steps: libm::round(warmup_fraction * total_steps as f64) as usize,
        total_steps,
    }
}

/// Trains a copy of `model`; the input is left untouched.
pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let mut model = model.clone();
    let total = cfg.epochs * steps_per_epoch(data.len(), cfg.batch_size);
    let schedule = schedule_for(cfg.base_lr, cfg.warmup_fraction, total);
    let mut state = OptimizerState::new(
        model.params().iter().map(|p| &p.value),
        schedule,
        cfg.momentum,
        cfg.clip_global_norm,
    )?;
    let mut rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for ids in epoch_batches(&order, cfg.batch_size) {
            let (x, y) = data.batch(ids);
            let scale = 1.0 / ids.len() as f64;
            let (per, grads, _) = model.cross_entropy_grad(&x, &y, cfg.label_smoothing, scale, true)?;
            let batch_loss: f64 = per.iter().sum();
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.value.is_finite()) {
                return Err(Error::NonFinite {
                    context: "training loss",
                    step: state.step_index,
                });
            }
            loss_sum += batch_loss;
            correct += count_correct(&model, &x, &y)?;
            let grad_refs: Vec<&Tensor> = grads.iter().map(|g| &g.value).collect();
            let mut param_refs: Vec<&mut Tensor> = model.params_mut().collect();
            sgd_step(&mut param_refs, &grad_refs, &mut state)?;
        }
        history.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((model, history))
}

fn count_correct(model: &Model, x: &Tensor, y: &[usize]) -> Result<usize> {
    Ok(model
        .predict(x)?
        .iter()
        .zip(y)
        .filter(|(p, t)| p == t)
        .count())
}

/// Fraction of `data` classified correctly, evaluated in chunks.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in ids.chunks(256) {
        let (x, y) = data.batch(chunk);
        correct += count_correct(model, &x, &y)?;
    }
    Ok(correct as f64 / data.len() as f64)
}

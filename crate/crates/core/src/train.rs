//! Minibatch training with the divergence sentinel.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{token_batch, DenseDataset};
use crate::error::{Error, Result};
use crate::models::{Batch, Model};
use crate::numcore::SeededRng;
use crate::optim::Optimizer;

/// Where minibatches come from. Cheap to clone and share across trials.
#[derive(Debug, Clone)]
pub enum DataSource {
    Dense(Arc<DenseDataset>),
    Corpus(Arc<Vec<usize>>),
}

impl DataSource {
    pub fn batch(&self, batch_size: usize, seq_len: usize, rng: &mut SeededRng) -> Result<Batch> {
        match self {
            DataSource::Dense(d) => Ok(d.sample(batch_size, rng)),
            DataSource::Corpus(c) => token_batch(c, batch_size, seq_len, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    /// A trial is halted once its loss exceeds this multiple of the first
    /// minibatch loss.
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
}

fn default_seq_len() -> usize {
    32
}

fn default_divergence_factor() -> f64 {
    10.0
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize) -> Self {
        Self {
            steps,
            batch_size,
            seq_len: default_seq_len(),
            divergence_factor: default_divergence_factor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "steps, batch_size and seq_len must be >= 1".into(),
            ));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Minibatch loss before each update; shorter than `steps` if halted.
    pub losses: Vec<f64>,
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    /// Mean of the last `max(1, steps / 10)` minibatch losses up to `steps`,
    /// or `+inf` if the run diverged before reaching it.
    pub fn final_loss_at(&self, steps: usize) -> f64 {
        if steps == 0 || self.losses.len() < steps || (self.diverged && self.losses.len() <= steps)
        {
            return f64::INFINITY;
        }
        let w = (steps / 10).max(1);
        self.losses[steps - w..steps].iter().sum::<f64>() / w as f64
    }

    pub fn final_loss(&self, steps: usize) -> f64 {
        self.final_loss_at(steps)
    }
}

/// Runs `cfg.steps` updates, drawing minibatches from `data` with
/// `data_rng`.
pub fn train(
    model: &mut Model,
    optimizer: &mut Optimizer,
    data: &DataSource,
    cfg: &TrainConfig,
    data_rng: &mut SeededRng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut limit = f64::INFINITY;
    for step in 0..cfg.steps {
        let batch = data.batch(cfg.batch_size, cfg.seq_len, data_rng)?;
        let loss = model.loss_and_grad(&batch)?;
        if step == 0 {
            limit = cfg.divergence_factor * loss;
        }
        if !loss.is_finite() || loss > limit {
            losses.push(loss);
            return Ok(TrainOutcome {
                losses,
                diverged: true,
            });
        }
        losses.push(loss);
        if !optimizer.step(model.params_mut())? {
            return Ok(TrainOutcome {
                losses,
                diverged: true,
            });
        }
    }
    Ok(TrainOutcome {
        losses,
        diverged: false,
    })
}

/// Mean loss over `batches`, `+inf` if any is non-finite.
pub fn evaluate(model: &Model, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let l = model.forward_loss(b)?.loss;
        if !l.is_finite() {
            return Ok(f64::INFINITY);
        }
        total += l;
    }
    Ok(total / batches.len().max(1) as f64)
}

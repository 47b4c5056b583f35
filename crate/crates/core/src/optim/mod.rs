//! Optimizers applying per-tensor effective learning rates.
//!
//! Every [`ParamTensor`] carries `lr_scale`, the ratio between its effective
//! rate and the master rate, so the update rules here are width-agnostic.

mod schedule;

pub use schedule::{Schedule, ScheduleKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamTensor;
use crate::parametrize::OptimizerFamily;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub master_lr: f64,
    #[serde(default)]
    pub momentum: f64,
    /// Decoupled: `w <- (1 - master_lr * schedule * weight_decay) * w`.
    #[serde(default)]
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(master_lr: f64) -> Self {
        Self {
            master_lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdamVariant {
    Adam,
    Rmsprop,
    Adagrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsPlacement {
    /// `sqrt(v + eps)`; eps scales as `1 / fan_in_mult^2`.
    PreSqrt,
    /// `sqrt(v) + eps`; eps scales as `1 / fan_in_mult`.
    PostSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    Decoupled,
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub master_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub eps: f64,
    #[serde(default = "default_eps_placement")]
    pub eps_placement: EpsPlacement,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_decay_mode")]
    pub decay_mode: DecayMode,
    #[serde(default = "default_variant")]
    pub variant: AdamVariant,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps_placement() -> EpsPlacement {
    EpsPlacement::PostSqrt
}
fn default_decay_mode() -> DecayMode {
    DecayMode::Decoupled
}
fn default_variant() -> AdamVariant {
    AdamVariant::Adam
}

impl AdamConfig {
    pub fn new(master_lr: f64) -> Self {
        Self {
            master_lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: 0.0,
            eps_placement: default_eps_placement(),
            weight_decay: 0.0,
            decay_mode: default_decay_mode(),
            variant: default_variant(),
        }
    }

    /// The ε actually used for a tensor with the given fan-in multiplier.
    pub fn effective_eps(&self, fan_in_mult: f64) -> f64 {
        match self.eps_placement {
            EpsPlacement::PreSqrt => self.eps / (fan_in_mult * fan_in_mult),
            EpsPlacement::PostSqrt => self.eps / fan_in_mult,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

impl OptimizerConfig {
    pub fn family(&self) -> OptimizerFamily {
        match self {
            OptimizerConfig::Sgd(_) => OptimizerFamily::Sgd,
            OptimizerConfig::Adam(_) => OptimizerFamily::Adam,
        }
    }

    pub fn master_lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd(c) => c.master_lr,
            OptimizerConfig::Adam(c) => c.master_lr,
        }
    }

    pub fn with_master_lr(&self, lr: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            OptimizerConfig::Sgd(c) => c.master_lr = lr,
            OptimizerConfig::Adam(c) => c.master_lr = lr,
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let lr = self.master_lr();
        if !(lr > 0.0) || !lr.is_finite() {
            return bad(format!("master_lr must be positive, got {lr}"));
        }
        match self {
            OptimizerConfig::Sgd(c) => {
                if !(0.0..1.0).contains(&c.momentum) {
                    return bad(format!("momentum must lie in [0, 1), got {}", c.momentum));
                }
                if !(c.weight_decay >= 0.0) {
                    return bad(format!("weight_decay must be >= 0, got {}", c.weight_decay));
                }
            }
            OptimizerConfig::Adam(c) => {
                for (name, b) in [("beta1", c.beta1), ("beta2", c.beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        return bad(format!("{name} must lie in [0, 1), got {b}"));
                    }
                }
                if !(c.eps >= 0.0) {
                    return bad(format!("eps must be >= 0, got {}", c.eps));
                }
                if !(c.weight_decay >= 0.0) {
                    return bad(format!("weight_decay must be >= 0, got {}", c.weight_decay));
                }
                if c.weight_decay > 0.0 && c.decay_mode == DecayMode::Coupled {
                    return bad("coupled weight decay is incompatible with width-scaled Adam; use decoupled (AdamW)".into());
                }
            }
        }
        Ok(())
    }
}

fn decay(params: &mut [ParamTensor], factor: f64) {
    if factor == 1.0 {
        return;
    }
    for p in params {
        p.value.data_mut().iter_mut().for_each(|w| *w *= factor);
    }
}

fn all_finite(params: &[ParamTensor]) -> bool {
    params.iter().all(|p| p.value.is_finite())
}

/// One SGD step. Returns `false` when an update produced a non-finite value.
pub fn sgd_step(
    params: &mut [ParamTensor],
    cfg: &SgdConfig,
    schedule: &Schedule,
    step: usize,
) -> bool {
    let sched = schedule.value(step);
    decay(params, 1.0 - cfg.master_lr * sched * cfg.weight_decay);
    for p in params.iter_mut() {
        let lr = cfg.master_lr * sched * p.lr_scale;
        let n = p.numel();
        let ParamTensor { value, state, .. } = p;
        let (w, g) = value.data_and_grad_mut();
        if cfg.momentum > 0.0 {
            if state.first.len() != n {
                state.first = vec![0.0; n];
            }
            for ((w, g), b) in w.iter_mut().zip(g.iter()).zip(state.first.iter_mut()) {
                *b = cfg.momentum * *b + g;
                *w -= lr * *b;
            }
        } else {
            for (w, g) in w.iter_mut().zip(g.iter()) {
                *w -= lr * g;
            }
        }
        state.steps += 1;
    }
    all_finite(params)
}

/// One Adam-family step with bias correction. A zero denominator gives a
/// zero update. Returns `false` on a non-finite result.
pub fn adam_step(
    params: &mut [ParamTensor],
    cfg: &AdamConfig,
    schedule: &Schedule,
    step: usize,
) -> bool {
    let sched = schedule.value(step);
    if cfg.decay_mode == DecayMode::Decoupled {
        decay(params, 1.0 - cfg.master_lr * sched * cfg.weight_decay);
    }
    for p in params.iter_mut() {
        let lr = cfg.master_lr * sched * p.lr_scale;
        let eps = cfg.effective_eps(p.fan_in_mult());
        let n = p.numel();
        let ParamTensor { value, state, .. } = p;
        if state.second.len() != n {
            state.second = vec![0.0; n];
        }
        if cfg.variant == AdamVariant::Adam && state.first.len() != n {
            state.first = vec![0.0; n];
        }
        state.steps += 1;
        let t = state.steps as i32;
        let (w, g) = value.data_and_grad_mut();
        let denom = |v: f64| match cfg.eps_placement {
            EpsPlacement::PreSqrt => (v + eps).sqrt(),
            EpsPlacement::PostSqrt => v.sqrt() + eps,
        };
        let apply = |w: &mut f64, num: f64, den: f64| {
            if den > 0.0 {
                *w -= lr * num / den;
            } else if !den.is_finite() {
                *w = f64::NAN;
            }
        };
        match cfg.variant {
            AdamVariant::Adam => {
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                for i in 0..n {
                    let gi = g[i];
                    let m = &mut state.first[i];
                    let v = &mut state.second[i];
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                    apply(&mut w[i], *m / c1, denom(*v / c2));
                }
            }
            AdamVariant::Rmsprop => {
                let c2 = 1.0 - cfg.beta2.powi(t);
                for i in 0..n {
                    let gi = g[i];
                    let v = &mut state.second[i];
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                    apply(&mut w[i], gi, denom(*v / c2));
                }
            }
            AdamVariant::Adagrad => {
                for i in 0..n {
                    let gi = g[i];
                    let v = &mut state.second[i];
                    *v += gi * gi;
                    apply(&mut w[i], gi, denom(*v));
                }
            }
        }
    }
    all_finite(params)
}

pub fn grad_norm(params: &[ParamTensor]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.value.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`; returns
/// the factor applied (1 when no clipping happened).
pub fn clip_gradients(params: &mut [ParamTensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Parameter(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let norm = grad_norm(params);
    if norm <= max_norm || norm == 0.0 {
        return Ok(1.0);
    }
    let factor = max_norm / norm;
    for p in params.iter_mut() {
        if p.value.grad().is_some() {
            p.value.grad_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
    Ok(factor)
}

/// Optimizer plus schedule plus optional clipping, tracking the step count.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub schedule: Schedule,
    pub clip: Option<f64>,
    step: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, schedule: Schedule, clip: Option<f64>) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        if let Some(c) = clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip must be positive, got {c}")));
            }
        }
        Ok(Self {
            config,
            schedule,
            clip,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update; returns `false` if parameters became non-finite.
    pub fn step(&mut self, params: &mut [ParamTensor]) -> Result<bool> {
        if let Some(c) = self.clip {
            clip_gradients(params, c)?;
        }
        let ok = match &self.config {
            OptimizerConfig::Sgd(c) => sgd_step(params, c, &self.schedule, self.step),
            OptimizerConfig::Adam(c) => adam_step(params, c, &self.schedule, self.step),
        };
        self.step += 1;
        Ok(ok)
    }
}

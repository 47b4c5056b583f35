use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    LinearDecay,
    Cosine,
    InvSqrt,
    /// Multiplies by `factor` at each milestone reached.
    Step,
}

/// Learning-rate multiplier as a function of the step. Starts at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub total_steps: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub milestones: Vec<usize>,
    #[serde(default = "default_factor")]
    pub factor: f64,
}

fn default_factor() -> f64 {
    0.1
}

impl Schedule {
    pub fn constant() -> Self {
        Self::of(ScheduleKind::Constant, 0)
    }

    fn of(kind: ScheduleKind, total_steps: usize) -> Self {
        Self {
            kind,
            total_steps,
            milestones: Vec::new(),
            factor: default_factor(),
        }
    }

    pub fn new(kind: ScheduleKind, total_steps: usize) -> Result<Self> {
        let s = Self::of(kind, total_steps);
        s.validate()?;
        Ok(s)
    }

    pub fn step(milestones: Vec<usize>, factor: f64, total_steps: usize) -> Result<Self> {
        let s = Self {
            milestones,
            factor,
            ..Self::of(ScheduleKind::Step, total_steps)
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ScheduleKind::LinearDecay | ScheduleKind::Cosine if self.total_steps == 0 => Err(
                Error::Config("decaying schedules need total_steps > 0".into()),
            ),
            ScheduleKind::Step if !(0.0..=1.0).contains(&self.factor) => Err(Error::Config(
                format!("step factor must lie in [0, 1], got {}", self.factor),
            )),
            _ => Ok(()),
        }
    }

    pub fn value(&self, step: usize) -> f64 {
        let frac = || (step.min(self.total_steps) as f64) / self.total_steps as f64;
        match self.kind {
            ScheduleKind::Constant => 1.0,
            ScheduleKind::LinearDecay => 1.0 - frac(),
            ScheduleKind::Cosine => 0.5 * (1.0 + (PI * frac()).cos()),
            ScheduleKind::InvSqrt => 1.0 / ((step + 1) as f64).sqrt(),
            ScheduleKind::Step => {
                let passed = self.milestones.iter().filter(|&&m| m <= step).count();
                self.factor.powi(passed as i32)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ScheduleKind::Constant => "constant",
            ScheduleKind::LinearDecay => "linear_decay",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::InvSqrt => "inv_sqrt",
            ScheduleKind::Step => "step",
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::constant()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_one() {
        let s = Schedule::constant();
        for t in [0, 1, 10, 100_000] {
            assert_eq!(s.value(t), 1.0);
        }
    }

    #[test]
    fn linear_decay_hits_zero() {
        let s = Schedule::new(ScheduleKind::LinearDecay, 100).unwrap();
        assert_eq!(s.value(0), 1.0);
        assert_eq!(s.value(50), 0.5);
        assert_eq!(s.value(100), 0.0);
        assert_eq!(s.value(200), 0.0);
    }

    #[test]
    fn cosine_endpoints() {
        let s = Schedule::new(ScheduleKind::Cosine, 10).unwrap();
        assert_eq!(s.value(0), 1.0);
        assert!(s.value(10).abs() < 1e-15);
        assert!((s.value(5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn step_milestones() {
        let s = Schedule::step(vec![5, 8], 0.1, 10).unwrap();
        assert_eq!(s.value(0), 1.0);
        assert_eq!(s.value(4), 1.0);
        assert_eq!(s.value(5), 0.1);
        assert_eq!(s.value(6), 0.1);
        assert!((s.value(8) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn inv_sqrt_starts_at_one() {
        let s = Schedule::new(ScheduleKind::InvSqrt, 0).unwrap();
        assert_eq!(s.value(0), 1.0);
        assert_eq!(s.value(3), 0.5);
    }

    #[test]
    fn decaying_without_horizon_is_rejected() {
        assert!(Schedule::new(ScheduleKind::Cosine, 0).is_err());
    }

    #[test]
    fn serde_shape() {
        let s: Schedule = serde_json::from_str(
            r#"{"kind":"step","milestones":[5,8],"factor":0.1,"total_steps":10}"#,
        )
        .unwrap();
        assert_eq!(s.value(6), 0.1);
        let back: Schedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelHp, ParamGroup};
use crate::numcore::{label, SeededRng};
use crate::optim::{OptimizerConfig, ScheduleKind};

/// Keys that look like hyperparameters but do not carry over between widths.
const REGULARIZATION: [&str; 5] = [
    "weight_decay",
    "dropout",
    "label_smoothing",
    "attention_dropout",
    "eps",
];

const SCALARS: [&str; 8] = [
    "master_lr",
    "init_std",
    "alpha_output",
    "alpha_attn",
    "alpha_emb",
    "momentum",
    "beta1",
    "beta2",
];

/// A point in the space of width-independent hyperparameters.
///
/// Keys are `master_lr`, `init_std`, `alpha_output`, `alpha_attn`,
/// `alpha_emb`, `momentum`, `beta1`, `beta2`, and `lr.<group>` /
/// `init.<group>` for per-group multipliers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpPoint {
    #[serde(default)]
    values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<ScheduleKind>,
}

fn check_key(key: &str) -> Result<()> {
    if REGULARIZATION.contains(&key) {
        return Err(Error::Config(format!(
            "{key} is a regularization HP and is not transferable"
        )));
    }
    if SCALARS.contains(&key) {
        return Ok(());
    }
    let group = key
        .strip_prefix("lr.")
        .or_else(|| key.strip_prefix("init."));
    match group {
        Some(g) if parse_group(g).is_some() => Ok(()),
        _ => Err(Error::Config(format!("unknown HP key {key:?}"))),
    }
}

fn parse_group(name: &str) -> Option<ParamGroup> {
    ParamGroup::ALL.into_iter().find(|g| g.as_str() == name)
}

fn check_value(key: &str, v: f64) -> Result<()> {
    let ok = match key {
        "momentum" | "beta1" | "beta2" => (0.0..1.0).contains(&v),
        "master_lr" => v > 0.0 && v.is_finite(),
        _ => v >= 0.0 && v.is_finite(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("HP {key} = {v} is out of range")))
    }
}

impl HpPoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lr(master_lr: f64) -> Self {
        Self::new()
            .with("master_lr", master_lr)
            .expect("master_lr is a valid key")
    }

    pub fn with(mut self, key: &str, value: f64) -> Result<Self> {
        self.set(key, value)?;
        Ok(self)
    }

    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        check_key(key)?;
        check_value(key, value)?;
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn with_schedule(mut self, kind: ScheduleKind) -> Self {
        self.schedule = Some(kind);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn master_lr(&self) -> Option<f64> {
        self.get("master_lr")
    }

    pub fn schedule(&self) -> Option<ScheduleKind> {
        self.schedule
    }

    pub fn values(&self) -> &BTreeMap<String, f64> {
        &self.values
    }

    /// `self` with every entry of `other` layered on top.
    pub fn merged(&self, other: &HpPoint) -> HpPoint {
        let mut out = self.clone();
        out.values
            .extend(other.values.iter().map(|(k, v)| (k.clone(), *v)));
        if other.schedule.is_some() {
            out.schedule = other.schedule;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.values {
            check_key(k)?;
            check_value(k, *v)?;
        }
        Ok(())
    }

    /// Writes the model-side entries into `hp`.
    pub fn apply_model(&self, hp: &mut ModelHp) -> Result<()> {
        for (k, &v) in &self.values {
            match k.as_str() {
                "init_std" => hp.init_std = v,
                "alpha_output" => hp.alpha_output = v,
                "alpha_attn" => hp.alpha_attn = v,
                "alpha_emb" => hp.alpha_emb = v,
                _ => {
                    if let Some(g) = k.strip_prefix("lr.").and_then(parse_group) {
                        hp.group_lr.insert(g, v);
                    } else if let Some(g) = k.strip_prefix("init.").and_then(parse_group) {
                        hp.group_init.insert(g, v);
                    }
                }
            }
        }
        Ok(())
    }

    /// `opt` with the optimizer-side entries applied.
    pub fn apply_optimizer(&self, opt: &OptimizerConfig) -> Result<OptimizerConfig> {
        let mut out = opt.clone();
        for (k, &v) in &self.values {
            match (k.as_str(), &mut out) {
                ("master_lr", _) => out = out.with_master_lr(v),
                ("momentum", OptimizerConfig::Sgd(c)) => c.momentum = v,
                ("beta1", OptimizerConfig::Adam(c)) => c.beta1 = v,
                ("beta2", OptimizerConfig::Adam(c)) => c.beta2 = v,
                ("momentum" | "beta1" | "beta2", _) => {
                    return Err(Error::Config(format!(
                        "{k} does not apply to the configured optimizer"
                    )));
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Total order used to break ties: smaller master LR first, then the
    /// entries compared lexicographically.
    pub fn tie_order(&self, other: &HpPoint) -> Ordering {
        let lr = |p: &HpPoint| p.master_lr().unwrap_or(f64::INFINITY);
        lr(self)
            .total_cmp(&lr(other))
            .then_with(|| {
                let a = self.values.iter();
                let b = other.values.iter();
                a.zip(b)
                    .map(|((ka, va), (kb, vb))| ka.cmp(kb).then(va.total_cmp(vb)))
                    .find(|o| o.is_ne())
                    .unwrap_or_else(|| self.values.len().cmp(&other.values.len()))
            })
            .then_with(|| {
                let s = |p: &HpPoint| p.schedule.map(|k| format!("{k:?}"));
                s(self).cmp(&s(other))
            })
    }
}

impl fmt::Display for HpPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, v) in &self.values {
            if !first {
                f.write_str(" ")?;
            }
            first = false;
            write!(f, "{k}={v}")?;
        }
        if let Some(s) = self.schedule {
            write!(f, "{}schedule={s:?}", if first { "" } else { " " })?;
        }
        Ok(())
    }
}

/// A sampling range for random search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
    /// Sample uniformly in `log(value)` rather than in `value`.
    #[serde(default)]
    pub log: bool,
}

/// How candidate HP points are generated. Every point is layered on top of
/// `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Search {
    /// Cartesian product of the listed values, keys in sorted order.
    Grid {
        #[serde(default)]
        base: HpPoint,
        axes: BTreeMap<String, Vec<f64>>,
    },
    Random {
        #[serde(default)]
        base: HpPoint,
        ranges: BTreeMap<String, Range>,
        samples: usize,
        seed: u64,
    },
}

impl Search {
    /// Grid over `master_lr = 2^z` for `z` in `exponents`.
    pub fn lr_grid(exponents: impl IntoIterator<Item = i32>) -> Self {
        let lrs = exponents.into_iter().map(|z| 2f64.powi(z)).collect();
        Search::Grid {
            base: HpPoint::new(),
            axes: BTreeMap::from([("master_lr".to_string(), lrs)]),
        }
    }

    pub fn points(&self) -> Result<Vec<HpPoint>> {
        let pts = match self {
            Search::Grid { base, axes } => {
                let mut pts = vec![base.clone()];
                for (k, vals) in axes {
                    check_key(k)?;
                    let mut next = Vec::with_capacity(pts.len() * vals.len());
                    for p in &pts {
                        for &v in vals {
                            next.push(p.clone().with(k, v)?);
                        }
                    }
                    pts = next;
                }
                pts
            }
            Search::Random {
                base,
                ranges,
                samples,
                seed,
            } => {
                let mut rng = SeededRng::new(*seed, label("random_search"));
                let mut pts = Vec::with_capacity(*samples);
                for _ in 0..*samples {
                    let mut p = base.clone();
                    for (k, r) in ranges {
                        if !(r.lo <= r.hi) || (r.log && !(r.lo > 0.0)) {
                            return Err(Error::Config(format!(
                                "invalid range for {k}: [{}, {}]",
                                r.lo, r.hi
                            )));
                        }
                        let u = rng.uniform();
                        let v = if r.log {
                            (r.lo.ln() + u * (r.hi.ln() - r.lo.ln())).exp()
                        } else {
                            r.lo + u * (r.hi - r.lo)
                        };
                        p.set(k, v)?;
                    }
                    pts.push(p);
                }
                pts
            }
        };
        if pts.is_empty()
            || matches!(self, Search::Grid { axes, .. } if axes.values().any(|v| v.is_empty()))
        {
            return Err(Error::Config("search space is empty".into()));
        }
        for p in &pts {
            p.validate()?;
        }
        Ok(pts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{AdamConfig, SgdConfig};

    #[test]
    fn regularization_hps_are_rejected() {
        for k in ["weight_decay", "dropout", "label_smoothing"] {
            let e = HpPoint::new().with(k, 0.1).unwrap_err().to_string();
            assert!(e.contains("not transferable"), "{e}");
        }
        assert!(HpPoint::new().with("lr.bogus", 1.0).is_err());
        assert!(HpPoint::new().with("lr.hidden", 0.5).is_ok());
        assert!(HpPoint::new().with("master_lr", 0.0).is_err());
    }

    #[test]
    fn deserialized_points_are_checked() {
        let p: HpPoint = serde_json::from_str(r#"{"values": {"weight_decay": 0.1}}"#).unwrap();
        assert!(p.validate().is_err());
    }

    #[test]
    fn grid_is_cartesian() {
        let s = Search::Grid {
            base: HpPoint::new().with("alpha_output", 2.0).unwrap(),
            axes: BTreeMap::from([
                ("master_lr".to_string(), vec![0.1, 0.2, 0.4]),
                ("init_std".to_string(), vec![0.5, 1.0]),
            ]),
        };
        let pts = s.points().unwrap();
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|p| p.get("alpha_output") == Some(2.0)));
        assert_eq!(pts[0].get("init_std"), Some(0.5));
        assert_eq!(pts[0].master_lr(), Some(0.1));
        assert_eq!(pts[1].master_lr(), Some(0.2));
    }

    #[test]
    fn single_point_and_empty_grids() {
        assert_eq!(Search::lr_grid([-3]).points().unwrap().len(), 1);
        assert!(Search::lr_grid([]).points().is_err());
    }

    #[test]
    fn random_search_is_seeded_and_in_range() {
        let s = Search::Random {
            base: HpPoint::new(),
            ranges: BTreeMap::from([(
                "master_lr".to_string(),
                Range {
                    lo: 1e-4,
                    hi: 1e-1,
                    log: true,
                },
            )]),
            samples: 20,
            seed: 3,
        };
        let a = s.points().unwrap();
        assert_eq!(a, s.points().unwrap());
        assert!(a
            .iter()
            .all(|p| (1e-4..=1e-1).contains(&p.master_lr().unwrap())));
    }

    #[test]
    fn tie_order_prefers_small_lr() {
        let a = HpPoint::lr(0.1);
        let b = HpPoint::lr(0.2);
        assert_eq!(a.tie_order(&b), Ordering::Less);
        let c = HpPoint::lr(0.1).with("init_std", 0.5).unwrap();
        let d = HpPoint::lr(0.1).with("init_std", 2.0).unwrap();
        assert_eq!(c.tie_order(&d), Ordering::Less);
        assert_eq!(c.tie_order(&c), Ordering::Equal);
    }

    #[test]
    fn optimizer_entries_apply() {
        let p = HpPoint::lr(0.3).with("beta1", 0.8).unwrap();
        let OptimizerConfig::Adam(c) = p
            .apply_optimizer(&OptimizerConfig::Adam(AdamConfig::new(1.0)))
            .unwrap()
        else {
            unreachable!()
        };
        assert_eq!((c.master_lr, c.beta1), (0.3, 0.8));
        assert!(p
            .apply_optimizer(&OptimizerConfig::Sgd(SgdConfig::new(1.0)))
            .is_err());
        let mut hp = ModelHp::default();
        HpPoint::new()
            .with("lr.output", 0.25)
            .unwrap()
            .apply_model(&mut hp)
            .unwrap();
        assert_eq!(hp.lr_mult(ParamGroup::Output), 0.25);
    }
}

use serde::{Deserialize, Serialize};

use super::experiment::{Experiment, ScalePoint, SweepRecord};
use super::hp::{HpPoint, Search};
use crate::error::{Error, Result};
pub use crate::parallel::run_parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    TrainLoss,
    ValLoss,
}

impl Metric {
    pub fn of(self, r: &SweepRecord) -> f64 {
        match self {
            Metric::TrainLoss => r.train_loss,
            Metric::ValLoss => r.val_loss,
        }
    }
}

/// One record per `(point, seed)`, in point-major order.
pub fn sweep_points(
    experiment: &Experiment,
    points: &[HpPoint],
    scale: &ScalePoint,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<SweepRecord>> {
    if points.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one point and one seed".into(),
        ));
    }
    // Fail on configuration problems before spending compute.
    experiment.prepare(&points[0], scale, seeds[0])?;
    let jobs: Vec<(&HpPoint, u64)> = points
        .iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    run_parallel(&jobs, workers, |(p, s)| experiment.trial(p, scale, *s))
}

pub fn sweep(
    experiment: &Experiment,
    search: &Search,
    scale: &ScalePoint,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<SweepRecord>> {
    sweep_points(experiment, &search.points()?, scale, seeds, workers)
}

/// Per-(HP, scale) aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpSummary {
    pub hp: HpPoint,
    pub scale: ScalePoint,
    /// Mean over seeds; `inf` if any seed diverged.
    pub mean: f64,
    pub n_seeds: usize,
    pub diverged_seeds: usize,
}

/// Groups records by `(hp, scale)` in first-appearance order.
pub fn summarize(records: &[SweepRecord], metric: Metric) -> Vec<HpSummary> {
    let mut out: Vec<(HpSummary, f64)> = Vec::new();
    for r in records {
        let slot = match out
            .iter_mut()
            .find(|(s, _)| s.hp == r.hp && s.scale == r.scale)
        {
            Some(s) => s,
            None => {
                out.push((
                    HpSummary {
                        hp: r.hp.clone(),
                        scale: r.scale,
                        mean: 0.0,
                        n_seeds: 0,
                        diverged_seeds: 0,
                    },
                    0.0,
                ));
                out.last_mut().unwrap()
            }
        };
        slot.0.n_seeds += 1;
        let v = metric.of(r);
        if r.diverged || !v.is_finite() {
            slot.0.diverged_seeds += 1;
        } else {
            slot.1 += v;
        }
    }
    out.into_iter()
        .map(|(mut s, total)| {
            s.mean = if s.diverged_seeds > 0 {
                f64::INFINITY
            } else {
                total / s.n_seeds as f64
            };
            s
        })
        .collect()
}

/// The point with the lowest mean metric over seeds. Points with a diverged
/// seed are not viable. Ties go to the smaller master LR, then to the
/// lexicographically smaller point.
pub fn select_best(records: &[SweepRecord], metric: Metric) -> Result<HpPoint> {
    best_summary(records, metric).map(|s| s.hp)
}

pub fn best_summary(records: &[SweepRecord], metric: Metric) -> Result<HpSummary> {
    summarize(records, metric)
        .into_iter()
        .filter(|s| s.mean.is_finite())
        .min_by(|a, b| {
            a.mean
                .total_cmp(&b.mean)
                .then_with(|| a.hp.tie_order(&b.hp))
        })
        .ok_or(Error::NoViableHp)
}

/// Index of the best point in `points`, for grid-distance comparisons.
pub fn argmin_index(records: &[SweepRecord], points: &[HpPoint], metric: Metric) -> Result<usize> {
    let best = select_best(records, metric)?;
    points
        .iter()
        .position(|p| *p == best)
        .ok_or_else(|| Error::Config("best point is not in the grid".into()))
}

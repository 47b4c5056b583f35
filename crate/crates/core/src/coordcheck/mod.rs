//! Coordinate checking: train a ladder of widths for a few steps and check
//! that no captured activation grows or shrinks with width.

mod fit;
mod laws;

pub use fit::{fit_slope, SlopeFit};
pub use laws::{coord_size, entry_size_law_check, entry_size_once, EntrySizeLaw, MatrixKind};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_csv};
use crate::models::Model;
use crate::numcore::{label, SeededRng};
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::parallel::run_parallel;
use crate::train::DataSource;

/// Coordinate sizes of one activation at one width and step for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordSample {
    pub activation: String,
    pub width: usize,
    pub step: usize,
    pub seed: u64,
    /// Standard deviation of the coordinates of `x_t - x_0`.
    pub delta_std: f64,
    /// Mean absolute coordinate of `x_t`.
    pub mean_abs: f64,
}

/// [`CoordSample`] averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordStat {
    pub activation: String,
    pub width: usize,
    pub step: usize,
    pub delta_std: f64,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Stable,
    Blowup,
    Vanish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Slopes of one activation at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFit {
    pub activation: String,
    pub step: usize,
    /// Fit of `delta_std`; absent when fewer than three widths moved.
    pub delta: Option<SlopeFit>,
    pub mean_abs: Option<SlopeFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheckReport {
    pub widths: Vec<usize>,
    pub steps: usize,
    pub seeds: Vec<u64>,
    /// Widths where some seed produced non-finite values; left out of fits.
    pub diverged_widths: Vec<usize>,
    pub samples: Vec<CoordSample>,
    pub stats: Vec<CoordStat>,
    pub fits: Vec<StepFit>,
    pub tol: f64,
    pub labels: Vec<(String, Label)>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordCheckConfig {
    pub widths: Vec<usize>,
    /// Optimizer steps after init.
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_seq_len() -> usize {
    32
}

fn default_tol() -> f64 {
    0.2
}

/// Geometric ladder `base * 2^i` for `i < count`.
pub fn geometric_widths(base: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| base << i).collect()
}

impl CoordCheckConfig {
    pub fn validate(&self) -> Result<()> {
        let mut w = self.widths.clone();
        w.sort_unstable();
        w.dedup();
        if w.len() < 3 || w[0] == 0 {
            return Err(Error::Config(
                "coordinate check needs >= 3 distinct positive widths".into(),
            ));
        }
        if w[w.len() - 1] < 8 * w[0] {
            return Err(Error::Config(
                "coordinate check widths must span at least 8x".into(),
            ));
        }
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 || self.seeds.is_empty() {
            return Err(Error::Config(
                "steps, batch_size, seq_len and seeds must be nonempty".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        Ok(())
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64
}

/// Samples for one `(width, seed)` cell, or `None` if training blew up.
fn run_cell(
    model: &mut Model,
    optimizer: &OptimizerConfig,
    data: &DataSource,
    cfg: &CoordCheckConfig,
    width: usize,
    seed: u64,
) -> Result<Option<Vec<CoordSample>>> {
    let mut opt = Optimizer::new(optimizer.clone(), Schedule::constant(), None)?;
    let mut rng = SeededRng::new(seed, label("coordcheck"));
    let probe = data.batch(cfg.batch_size, cfg.seq_len, &mut rng)?;
    let init = model.forward_loss(&probe)?.activations;
    let mut out = Vec::new();
    let mut record = |step: usize, acts: &[(String, Vec<f64>)]| {
        for ((name, x0), (_, xt)) in init.iter().zip(acts) {
            let delta: Vec<f64> = xt.iter().zip(x0).map(|(a, b)| a - b).collect();
            out.push(CoordSample {
                activation: name.clone(),
                width,
                step,
                seed,
                delta_std: std_dev(&delta),
                mean_abs: mean_abs(xt),
            });
        }
    };
    record(0, &init);
    for t in 1..=cfg.steps {
        let batch = data.batch(cfg.batch_size, cfg.seq_len, &mut rng)?;
        let loss = model.loss_and_grad(&batch)?;
        if !loss.is_finite() || !opt.step(model.params_mut())? {
            return Ok(None);
        }
        let acts = model.forward_loss(&probe)?.activations;
        if acts.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Ok(None);
        }
        record(t, &acts);
    }
    Ok(Some(out))
}

/// Trains `family(width, seed)` at every width and seed for `cfg.steps`
/// steps on the same data order per seed, and fits growth slopes.
pub fn run_coord_check(
    family: &(dyn Fn(usize, u64) -> Result<Model> + Sync),
    optimizer: &OptimizerConfig,
    data: &DataSource,
    cfg: &CoordCheckConfig,
    workers: usize,
) -> Result<CoordCheckReport> {
    cfg.validate()?;
    optimizer.validate()?;
    let cells: Vec<(usize, u64)> = cfg
        .widths
        .iter()
        .flat_map(|&w| cfg.seeds.iter().map(move |&s| (w, s)))
        .collect();
    let results = run_parallel(&cells, workers, |&(w, s)| {
        let mut model = family(w, s)?;
        run_cell(&mut model, optimizer, data, cfg, w, s)
    })?;
    let mut diverged_widths = Vec::new();
    let mut samples = Vec::new();
    for ((w, _), r) in cells.iter().zip(results) {
        match r {
            Some(s) => samples.extend(s),
            None => {
                if !diverged_widths.contains(w) {
                    diverged_widths.push(*w);
                }
            }
        }
    }
    Ok(build_report(cfg, samples, diverged_widths))
}

fn build_report(
    cfg: &CoordCheckConfig,
    samples: Vec<CoordSample>,
    diverged_widths: Vec<usize>,
) -> CoordCheckReport {
    let mut names: Vec<String> = Vec::new();
    for s in &samples {
        if !names.contains(&s.activation) {
            names.push(s.activation.clone());
        }
    }
    let mut widths = cfg.widths.clone();
    widths.sort_unstable();
    widths.dedup();
    let mut stats = Vec::new();
    for name in &names {
        for &w in &widths {
            if diverged_widths.contains(&w) {
                continue;
            }
            for t in 0..=cfg.steps {
                let cell: Vec<&CoordSample> = samples
                    .iter()
                    .filter(|s| s.activation == *name && s.width == w && s.step == t)
                    .collect();
                if cell.is_empty() {
                    continue;
                }
                let n = cell.len() as f64;
                stats.push(CoordStat {
                    activation: name.clone(),
                    width: w,
                    step: t,
                    delta_std: cell.iter().map(|s| s.delta_std).sum::<f64>() / n,
                    mean_abs: cell.iter().map(|s| s.mean_abs).sum::<f64>() / n,
                });
            }
        }
    }
    let mut fits = Vec::new();
    for name in &names {
        for t in 0..=cfg.steps {
            let pts = |f: fn(&CoordStat) -> f64| -> Vec<(f64, f64)> {
                stats
                    .iter()
                    .filter(|s| s.activation == *name && s.step == t)
                    .map(|s| (s.width as f64, f(s)))
                    .collect()
            };
            fits.push(StepFit {
                activation: name.clone(),
                step: t,
                delta: fit_slope(&pts(|s| s.delta_std)).ok(),
                mean_abs: fit_slope(&pts(|s| s.mean_abs)).ok(),
            });
        }
    }
    let mut report = CoordCheckReport {
        widths,
        steps: cfg.steps,
        seeds: cfg.seeds.clone(),
        diverged_widths,
        samples,
        stats,
        fits,
        tol: cfg.tol,
        labels: Vec::new(),
        verdict: Verdict::Pass,
    };
    let (verdict, labels) = verdict(&report, cfg.tol);
    report.verdict = verdict;
    report.labels = labels;
    report
}

/// Labels each activation by its delta slopes over steps `1..=T`: any slope
/// above `tol` is a blowup, any below `-tol` a vanish. An activation whose
/// delta never moves is judged on `mean_abs` instead. Diverged widths fail
/// the check.
pub fn verdict(report: &CoordCheckReport, tol: f64) -> (Verdict, Vec<(String, Label)>) {
    let mut labels: Vec<(String, Label)> = Vec::new();
    for f in report.fits.iter().filter(|f| f.step >= 1) {
        let slope = f.delta.or(f.mean_abs).map(|s| s.slope);
        let label = match slope {
            Some(s) if s > tol => Label::Blowup,
            Some(s) if s < -tol => Label::Vanish,
            _ => Label::Stable,
        };
        match labels.iter_mut().find(|(n, _)| *n == f.activation) {
            Some((_, l)) => {
                if *l == Label::Stable || (*l == Label::Vanish && label == Label::Blowup) {
                    *l = label;
                }
            }
            None => labels.push((f.activation.clone(), label)),
        }
    }
    let ok = report.diverged_widths.is_empty() && labels.iter().all(|(_, l)| *l == Label::Stable);
    (if ok { Verdict::Pass } else { Verdict::Fail }, labels)
}

impl CoordCheckReport {
    /// Delta slope of `activation` at `step`.
    pub fn slope(&self, activation: &str, step: usize) -> Option<f64> {
        self.fits
            .iter()
            .find(|f| f.activation == activation && f.step == step)
            .and_then(|f| f.delta)
            .map(|s| s.slope)
    }

    pub fn label(&self, activation: &str) -> Option<Label> {
        self.labels
            .iter()
            .find(|(n, _)| n == activation)
            .map(|(_, l)| *l)
    }

    /// Per-seed CSV with columns `activation,width,step,metric,seed,mean_abs`
    /// where `metric` is the delta standard deviation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &COORD_CSV_HEADER, self.csv_rows())
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.samples
            .iter()
            .map(|s| {
                vec![
                    s.activation.clone(),
                    s.width.to_string(),
                    s.step.to_string(),
                    fmt_f64(s.delta_std),
                    s.seed.to_string(),
                    fmt_f64(s.mean_abs),
                ]
            })
            .collect()
    }
}

pub const COORD_CSV_HEADER: [&str; 6] =
    ["activation", "width", "step", "metric", "seed", "mean_abs"];

#[cfg(test)]
mod tests {
    use super::*;

    fn report_with(slopes: &[(&str, f64)]) -> CoordCheckReport {
        let fits = slopes
            .iter()
            .map(|(n, s)| StepFit {
                activation: n.to_string(),
                step: 1,
                delta: Some(SlopeFit {
                    slope: *s,
                    intercept: 0.0,
                    residual: 0.0,
                }),
                mean_abs: None,
            })
            .collect();
        CoordCheckReport {
            widths: vec![1, 2, 8],
            steps: 1,
            seeds: vec![0],
            diverged_widths: vec![],
            samples: vec![],
            stats: vec![],
            fits,
            tol: 0.2,
            labels: vec![],
            verdict: Verdict::Pass,
        }
    }

    #[test]
    fn verdict_thresholds() {
        assert_eq!(
            verdict(&report_with(&[("a", 0.0), ("b", 0.0)]), 0.2).0,
            Verdict::Pass
        );
        let (v, l) = verdict(&report_with(&[("a", 0.0), ("b", 0.9)]), 0.2);
        assert_eq!(v, Verdict::Fail);
        assert_eq!(l[1], ("b".to_string(), Label::Blowup));
        let (v, l) = verdict(&report_with(&[("a", -0.6)]), 0.2);
        assert_eq!((v, l[0].1), (Verdict::Fail, Label::Vanish));
    }

    #[test]
    fn config_preconditions() {
        let mut c = CoordCheckConfig {
            widths: vec![64, 128, 512],
            steps: 1,
            batch_size: 4,
            seq_len: 8,
            seeds: vec![0],
            tol: 0.2,
        };
        assert!(c.validate().is_ok());
        c.widths = vec![64, 128, 256];
        assert!(c.validate().is_err());
        c.widths = vec![64, 512];
        assert!(c.validate().is_err());
        c.widths = vec![64, 128, 512];
        c.steps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn geometric_ladder() {
        assert_eq!(geometric_widths(64, 5), vec![64, 128, 256, 512, 1024]);
    }
}

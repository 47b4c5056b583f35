use serde::{Deserialize, Serialize};

use super::experiment::{Experiment, ScalePoint, SweepRecord};
use super::hp::{HpPoint, Search};
use super::sweep::{best_summary, run_parallel, sweep, Metric};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::parametrize::Scheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Width-aware scheme: copied HPs keep their meaning.
    Mu,
    /// The HPs are copied under a scheme that does not transfer them.
    Naive,
}

fn mean(v: &[f64]) -> f64 {
    if v.iter().any(|x| !x.is_finite()) {
        f64::INFINITY
    } else {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Extra comparisons for a transfer run.
#[derive(Debug, Clone, Default)]
pub struct TransferChecks {
    /// HP tuned on the proxy under SP, copied to the target under SP.
    pub naive_sp: Option<HpPoint>,
    /// Grid searched directly on the target as the reference optimum.
    pub oracle: Option<Search>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best: HpPoint,
    pub loss: f64,
    /// Transferred loss over the oracle's loss.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub mode: TransferMode,
    pub scheme: Scheme,
    pub hp: HpPoint,
    pub target: ScalePoint,
    pub metric: Metric,
    pub seed_losses: Vec<f64>,
    /// Mean over seeds, `inf` if any seed diverged.
    pub target_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub naive_sp_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub naive_sp_diverged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleResult>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Trains the target with the proxy's best HPs copied verbatim. Returns the
/// model trained with the first seed and a report.
pub fn mu_transfer(
    experiment: &Experiment,
    proxy_best: &HpPoint,
    target: &ScalePoint,
    seeds: &[u64],
    metric: Metric,
    checks: &TransferChecks,
    workers: usize,
) -> Result<(Model, TransferReport)> {
    let Some((&first, _)) = seeds.split_first() else {
        return Err(Error::Config("transfer needs at least one seed".into()));
    };
    let scheme = experiment.scheme();
    let mut warnings = Vec::new();
    let mode = if scheme.is_mup() {
        TransferMode::Mu
    } else {
        warnings.push(format!(
            "naive transfer: scheme {scheme} does not keep HPs width-independent"
        ));
        TransferMode::Naive
    };
    let (rec0, model) = experiment.run(proxy_best, target, first)?;
    let mut records = vec![rec0];
    records.extend(run_parallel(&seeds[1..], workers, |&s| {
        experiment.trial(proxy_best, target, s)
    })?);
    let seed_losses: Vec<f64> = records.iter().map(|r| metric.of(r)).collect();
    let target_loss = mean(&seed_losses);

    let (naive_sp_loss, naive_sp_diverged) = match &checks.naive_sp {
        Some(hp) => {
            let sp = experiment.with_scheme(Scheme::Sp);
            let rs = run_parallel(seeds, workers, |&s| sp.trial(hp, target, s))?;
            let losses: Vec<f64> = rs.iter().map(|r| metric.of(r)).collect();
            (Some(mean(&losses)), Some(rs.iter().any(|r| r.diverged)))
        }
        None => (None, None),
    };
    let oracle = match &checks.oracle {
        Some(search) => {
            let rs = sweep(experiment, search, target, seeds, workers)?;
            let best = best_summary(&rs, metric)?;
            Some(OracleResult {
                ratio: target_loss / best.mean,
                best: best.hp,
                loss: best.mean,
            })
        }
        None => None,
    };
    let report = TransferReport {
        mode,
        scheme,
        hp: proxy_best.clone(),
        target: *target,
        metric,
        seed_losses,
        target_loss,
        naive_sp_loss,
        naive_sp_diverged,
        oracle,
        warnings,
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthScanReport {
    pub hp: HpPoint,
    pub width_mults: Vec<usize>,
    pub checkpoints: Vec<usize>,
    /// `mean_loss[c][w]`: mean over seeds of the training loss at checkpoint
    /// `c` for width `w`.
    pub mean_loss: Vec<Vec<f64>>,
    /// Per checkpoint, the number of adjacent width pairs whose wider loss
    /// exceeds the narrower one by more than the band.
    pub violations: Vec<usize>,
    pub band: f64,
}

impl WidthScanReport {
    pub fn monotone(&self) -> bool {
        self.violations.iter().all(|&v| v == 0)
    }
}

/// Trains every width at a fixed HP and checks that training loss does not
/// increase with width at each checkpoint, up to a relative `band`.
pub fn wider_is_better_scan(
    experiment: &Experiment,
    hp: &HpPoint,
    scale: &ScalePoint,
    width_mults: &[usize],
    checkpoints: &[usize],
    seeds: &[u64],
    band: f64,
    workers: usize,
) -> Result<WidthScanReport> {
    if width_mults.is_empty() || seeds.is_empty() {
        return Err(Error::Config("width scan needs widths and seeds".into()));
    }
    let checkpoints: Vec<usize> = if checkpoints.is_empty() {
        vec![scale.steps]
    } else {
        checkpoints.to_vec()
    };
    if checkpoints.iter().any(|&c| c == 0 || c > scale.steps) {
        return Err(Error::Config(format!(
            "checkpoints must lie in 1..={}",
            scale.steps
        )));
    }
    let jobs: Vec<(usize, u64)> = width_mults
        .iter()
        .flat_map(|&w| seeds.iter().map(move |&s| (w, s)))
        .collect();
    let records: Vec<SweepRecord> = run_parallel(&jobs, workers, |&(w, s)| {
        experiment.trial(hp, &scale.with_width(w), s)
    })?;
    let mean_loss: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|&c| {
            records
                .chunks(seeds.len())
                .map(|rs| {
                    let v: Vec<f64> = rs
                        .iter()
                        .map(|r| {
                            crate::train::TrainOutcome {
                                losses: r.losses.clone(),
                                diverged: r.diverged,
                            }
                            .final_loss_at(c)
                        })
                        .collect();
                    mean(&v)
                })
                .collect()
        })
        .collect();
    let violations = mean_loss
        .iter()
        .map(|row| {
            row.windows(2)
                .filter(|p| !(p[1] <= p[0] * (1.0 + band)))
                .count()
        })
        .collect();
    Ok(WidthScanReport {
        hp: hp.clone(),
        width_mults: width_mults.to_vec(),
        checkpoints,
        mean_loss,
        violations,
        band,
    })
}

/// Outcome of one seed of a reverse transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaOutcome {
    pub seed: u64,
    pub diverged: bool,
    pub loss: f64,
    pub unstable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseReport {
    pub hp: HpPoint,
    pub from_width: usize,
    pub to_width: usize,
    /// Reference optimum at the destination; instability means divergence
    /// or a loss at least `instability_ratio` times this.
    pub optimum: Option<f64>,
    pub instability_ratio: f64,
    pub outcomes: Vec<ReplicaOutcome>,
}

impl ReverseReport {
    pub fn unstable_seeds(&self) -> usize {
        self.outcomes.iter().filter(|o| o.unstable).count()
    }
}

/// Trains the small model of `scale` with its base moved to simulate width
/// `to_width`, using an HP found unstable at simulated width `from_width`.
pub fn reverse_transfer(
    experiment: &Experiment,
    bad_hp: &HpPoint,
    scale: &ScalePoint,
    from_width: usize,
    to_width: usize,
    optimum: Option<f64>,
    seeds: &[u64],
    workers: usize,
) -> Result<ReverseReport> {
    let ratio = 2.0;
    let sim = experiment.with_simulated_width(Some(to_width));
    let records = run_parallel(seeds, workers, |&s| sim.trial(bad_hp, scale, s))?;
    let outcomes = records
        .iter()
        .map(|r| ReplicaOutcome {
            seed: r.seed,
            diverged: r.diverged,
            loss: r.train_loss,
            unstable: r.diverged || optimum.is_some_and(|o| r.train_loss >= ratio * o),
        })
        .collect();
    Ok(ReverseReport {
        hp: bad_hp.clone(),
        from_width,
        to_width,
        optimum,
        instability_ratio: ratio,
        outcomes,
    })
}

/// Bisects `log2(master_lr)` between a stable `lo` and a diverging `hi` for
/// the instability frontier of one seed. Returns `(stable, diverging)` LRs
/// bracketing it.
pub fn divergence_frontier(
    experiment: &Experiment,
    base: &HpPoint,
    scale: &ScalePoint,
    seed: u64,
    lo: f64,
    hi: f64,
    iterations: usize,
) -> Result<(f64, f64)> {
    let diverges = |lr: f64| -> Result<bool> {
        let hp = base.clone().with("master_lr", lr)?;
        Ok(experiment.trial(&hp, scale, seed)?.diverged)
    };
    if diverges(lo)? || !diverges(hi)? {
        return Err(Error::Config(format!(
            "[{lo}, {hi}] does not bracket the divergence frontier"
        )));
    }
    let (mut a, mut b) = (lo.log2(), hi.log2());
    for _ in 0..iterations {
        let mid = 0.5 * (a + b);
        if diverges(mid.exp2())? {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok((a.exp2(), b.exp2()))
}

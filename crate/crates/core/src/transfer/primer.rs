//! A scalar toy model of HP transfer: minimize `E f(c (x_1 + ... + x_n))`
//! over `c` for i.i.d. zero-mean unit-variance `x_i`. Writing
//! `c = alpha / sqrt(n)` makes the objective converge as `n` grows, so the
//! optimal `alpha` transfers across `n` while the optimal `c` does not.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use rand::RngCore;

use crate::numcore::SeededRng;

/// Bounded continuous objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundedFn {
    /// `f(x) = 1`.
    Constant,
    /// `f(x) = min((x - 2)^2, 10)`.
    CappedQuadratic,
    /// `f(x) = 1 - exp(-(x - 2)^2)`.
    Well,
    /// `f(x) = cos(x)`.
    Cosine,
}

const UNBOUNDED: [&str; 5] = ["identity", "square", "quadratic", "exp", "abs"];

impl BoundedFn {
    pub const ALL: [BoundedFn; 4] = [
        BoundedFn::Constant,
        BoundedFn::CappedQuadratic,
        BoundedFn::Well,
        BoundedFn::Cosine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BoundedFn::Constant => "constant",
            BoundedFn::CappedQuadratic => "capped_quadratic",
            BoundedFn::Well => "well",
            BoundedFn::Cosine => "cosine",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            BoundedFn::Constant => 1.0,
            BoundedFn::CappedQuadratic => ((x - 2.0) * (x - 2.0)).min(10.0),
            BoundedFn::Well => 1.0 - (-(x - 2.0) * (x - 2.0)).exp(),
            BoundedFn::Cosine => x.cos(),
        }
    }
}

impl fmt::Display for BoundedFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BoundedFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if UNBOUNDED.contains(&s) {
            return Err(Error::Config(format!(
                "{s} is unbounded; the objective must be bounded"
            )));
        }
        BoundedFn::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}")))
    }
}

/// Minimum Monte-Carlo sample count.
pub const MIN_SAMPLES: usize = 10_000;

/// `samples` draws of `(x_1 + ... + x_n) / sqrt(n)` with Rademacher `x_i`.
/// Shared across every evaluation so that landscapes are smooth in the HP.
#[derive(Debug, Clone)]
pub struct PrimerProblem {
    pub f: BoundedFn,
    pub n: usize,
    normalized_sums: Vec<f64>,
}

impl PrimerProblem {
    pub fn new(f: BoundedFn, n: usize, samples: usize, rng: &mut SeededRng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if samples < MIN_SAMPLES {
            return Err(Error::Config(format!(
                "need at least {MIN_SAMPLES} samples, got {samples}"
            )));
        }
        let norm = 1.0 / (n as f64).sqrt();
        let normalized_sums = (0..samples)
            .map(|_| {
                let mut ones = 0u32;
                let mut left = n;
                while left > 0 {
                    let take = left.min(64);
                    let bits = rng.next_u64();
                    let mask = if take == 64 {
                        u64::MAX
                    } else {
                        (1u64 << take) - 1
                    };
                    ones += (bits & mask).count_ones();
                    left -= take;
                }
                (2.0 * ones as f64 - n as f64) * norm
            })
            .collect();
        Ok(Self {
            f,
            n,
            normalized_sums,
        })
    }

    /// `F_n(c^1, ..., c^k) = E f((c^1 + ... + c^k)(x_1 + ... + x_n))`.
    pub fn estimate(&self, cs: &[f64]) -> f64 {
        self.at_scale(cs.iter().sum::<f64>() * (self.n as f64).sqrt())
    }

    /// `E f(a (x_1 + ... + x_n) / sqrt(n))`.
    fn at_scale(&self, a: f64) -> f64 {
        let total: f64 = self
            .normalized_sums
            .iter()
            .map(|&z| self.f.eval(a * z))
            .sum();
        total / self.normalized_sums.len() as f64
    }

    /// `G_n(alpha) = F_n(alpha / sqrt(n))`.
    pub fn g(&self, alpha: f64) -> f64 {
        self.at_scale(alpha)
    }

    /// Grid argmin of `G_n`, first index on ties. Returns the index and
    /// the landscape.
    pub fn argmin(&self, grid: &[f64]) -> Result<(usize, Vec<f64>)> {
        self.argmin_by(grid, |a| self.g(a))
    }

    /// Grid argmin over `alpha^1` when `c^1 = alpha^1 / sqrt(n)` is tuned but
    /// the remaining HPs stay fixed at `fixed` in the unscaled
    /// parametrization.
    pub fn argmin_partial(&self, grid: &[f64], fixed: &[f64]) -> Result<(usize, Vec<f64>)> {
        let rest: f64 = fixed.iter().sum::<f64>() * (self.n as f64).sqrt();
        self.argmin_by(grid, |a| self.at_scale(a + rest))
    }

    fn argmin_by(&self, grid: &[f64], obj: impl Fn(f64) -> f64) -> Result<(usize, Vec<f64>)> {
        if grid.is_empty() {
            return Err(Error::Config("empty primer grid".into()));
        }
        let values: Vec<f64> = grid.iter().map(|&a| obj(a)).collect();
        let best = values
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v < values[b] { i } else { b });
        Ok((best, values))
    }
}

/// One-shot Monte-Carlo estimate of `F_n(c)`.
pub fn primer_estimate(
    n: usize,
    cs: &[f64],
    f: BoundedFn,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    Ok(PrimerProblem::new(f, n, samples, rng)?.estimate(cs))
}

/// Grid argmin of `G_n(alpha)`.
pub fn primer_argmin(
    n: usize,
    grid: &[f64],
    f: BoundedFn,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let p = PrimerProblem::new(f, n, samples, rng)?;
    let (i, _) = p.argmin(grid)?;
    Ok(grid[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_rejects_unbounded() {
        assert!("square"
            .parse::<BoundedFn>()
            .unwrap_err()
            .to_string()
            .contains("unbounded"));
        assert!("nope".parse::<BoundedFn>().is_err());
        for f in BoundedFn::ALL {
            assert_eq!(f.as_str().parse::<BoundedFn>().unwrap(), f);
        }
    }

    #[test]
    fn constant_objective_is_flat() {
        let mut rng = SeededRng::new(0, 0);
        let p = PrimerProblem::new(BoundedFn::Constant, 64, MIN_SAMPLES, &mut rng).unwrap();
        let grid: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
        let (i, vals) = p.argmin(&grid).unwrap();
        assert!(vals.iter().all(|&v| v == 1.0));
        assert_eq!(i, 0);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(PrimerProblem::new(BoundedFn::Well, 8, 100, &mut SeededRng::new(0, 0)).is_err());
    }

    #[test]
    fn normalized_sums_have_unit_variance() {
        let p = PrimerProblem::new(BoundedFn::Constant, 100, 50_000, &mut SeededRng::new(1, 0))
            .unwrap();
        let m = p.normalized_sums.iter().sum::<f64>() / 50_000.0;
        let v = p.normalized_sums.iter().map(|z| z * z).sum::<f64>() / 50_000.0;
        assert!(m.abs() < 0.02 && (v - 1.0).abs() < 0.03, "{m} {v}");
    }

    #[test]
    fn estimate_uses_the_sum_of_hps() {
        let p = PrimerProblem::new(BoundedFn::Well, 16, MIN_SAMPLES, &mut SeededRng::new(2, 0))
            .unwrap();
        assert_eq!(p.estimate(&[0.25, 0.5]), p.estimate(&[0.5, 0.25]));
        assert!((p.g(1.2) - p.estimate(&[0.3])).abs() < 1e-12);
    }
}

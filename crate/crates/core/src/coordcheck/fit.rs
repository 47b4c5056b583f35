use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least-squares line through `(log width, log metric)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

/// Fits `log(metric) = slope * log(width) + intercept`. Needs at least
/// three points with positive metric and two distinct widths.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(w, m)| *w > 0.0 && *m > 0.0 && m.is_finite())
        .map(|(w, m)| (w.ln(), m.ln()))
        .collect();
    if logs.len() < 3 {
        return Err(Error::Config(format!(
            "slope needs >= 3 positive points, got {}",
            logs.len()
        )));
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Config(
            "slope needs at least two distinct widths".into(),
        ));
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (logs
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_linear() {
        let ws = [64.0, 128.0, 256.0, 512.0];
        let c: Vec<_> = ws.iter().map(|&w| (w, 3.0)).collect();
        assert!(fit_slope(&c).unwrap().slope.abs() < 1e-12);
        let l: Vec<_> = ws.iter().map(|&w| (w, w)).collect();
        let f = fit_slope(&l).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && f.intercept.abs() < 1e-9 && f.residual < 1e-12);
    }

    #[test]
    fn too_few_points() {
        assert!(fit_slope(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(fit_slope(&[(1.0, 1.0), (2.0, 0.0), (4.0, 1.0)]).is_err());
        assert!(fit_slope(&[(2.0, 1.0), (2.0, 2.0), (2.0, 3.0)]).is_err());
    }
}

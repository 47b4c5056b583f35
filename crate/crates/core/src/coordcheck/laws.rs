//! Monte-Carlo measurement of how the coordinates of `A x` scale with `n`
//! for the kinds of matrices that appear in training.

use serde::{Deserialize, Serialize};

use super::fit::{fit_slope, SlopeFit};
use crate::error::{Error, Result};
use crate::numcore::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    /// i.i.d. `N(0, 1)` entries, like a weight matrix at init.
    Gaussian,
    /// `sum_i u_i v_i^T` over a few outer products, like SGD updates.
    TensorProduct,
    /// `A_ab = psi(u_a, v_b)` with an Adam-like normalizing `psi`.
    NonlinearTensorProduct,
    /// A single row, like a readout layer.
    Vector,
}

/// Outer products per (nonlinear) tensor product matrix.
const RANK: usize = 2;
/// Rows of an `n x n` matrix sampled when estimating the size of `A x` for
/// an independent `x`.
const ROW_SAMPLE: usize = 256;

/// `sqrt(|v|^2 / len)`: the typical size of one coordinate.
pub fn coord_size(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

impl MatrixKind {
    /// Growth exponent of the coordinates of `A x` when `A` has `Theta(1)`
    /// entries.
    pub fn expected_slope(self, correlated: bool) -> f64 {
        match (self, correlated) {
            (MatrixKind::Gaussian, _) => 0.5,
            (_, true) => 1.0,
            (_, false) => 0.5,
        }
    }
}

fn normals(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// `sum_i g_i u_i v_i / sqrt(sum_i w_i (u_i v_i)^2)`.
fn adam_like(u: &[Vec<f64>], v: &[Vec<f64>], a: usize, b: usize) -> f64 {
    const GAMMA: [f64; RANK] = [0.6, 0.4];
    const OMEGA: [f64; RANK] = [0.5, 0.5];
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..RANK {
        let p = u[i][a] * v[i][b];
        num += GAMMA[i] * p;
        den += OMEGA[i] * p * p;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den.sqrt()
    }
}

/// Rescales `x` to unit coordinate size.
fn unit(mut x: Vec<f64>) -> Vec<f64> {
    let s = coord_size(&x);
    if s > 0.0 {
        x.iter_mut().for_each(|v| *v /= s);
    }
    x
}

/// Coordinate size of `A x` for one random draw at size `n`. With
/// `correlated`, `x` is `A^T y` for an independent `y`, rescaled to unit
/// coordinates; otherwise `x` is independent of `A`.
pub fn entry_size_once(kind: MatrixKind, n: usize, correlated: bool, rng: &mut SeededRng) -> f64 {
    let y = normals(n, rng);
    match kind {
        MatrixKind::Vector => {
            let w = normals(n, rng);
            // A^T y for a 1 x n matrix is w * y_0.
            let x = if correlated {
                unit(w.iter().map(|wi| wi * y[0]).collect())
            } else {
                normals(n, rng)
            };
            w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().abs()
        }
        MatrixKind::TensorProduct => {
            let u: Vec<Vec<f64>> = (0..RANK).map(|_| normals(n, rng)).collect();
            let v: Vec<Vec<f64>> = (0..RANK).map(|_| normals(n, rng)).collect();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let x = if correlated {
                let mut x = vec![0.0; n];
                for i in 0..RANK {
                    let c = dot(&u[i], &y);
                    x.iter_mut().zip(&v[i]).for_each(|(x, v)| *x += c * v);
                }
                unit(x)
            } else {
                normals(n, rng)
            };
            let mut ax = vec![0.0; n];
            for i in 0..RANK {
                let c = dot(&v[i], &x);
                ax.iter_mut().zip(&u[i]).for_each(|(a, u)| *a += c * u);
            }
            coord_size(&ax)
        }
        MatrixKind::NonlinearTensorProduct => {
            let u: Vec<Vec<f64>> = (0..RANK).map(|_| normals(n, rng)).collect();
            let v: Vec<Vec<f64>> = (0..RANK).map(|_| normals(n, rng)).collect();
            let x = if correlated {
                let mut x = vec![0.0; n];
                for (a, ya) in y.iter().enumerate() {
                    for (b, xb) in x.iter_mut().enumerate() {
                        *xb += adam_like(&u, &v, a, b) * ya;
                    }
                }
                unit(x)
            } else {
                normals(n, rng)
            };
            let rows = sample_rows(n, rng);
            let ax: Vec<f64> = rows
                .iter()
                .map(|&a| (0..n).map(|b| adam_like(&u, &v, a, b) * x[b]).sum())
                .collect();
            coord_size(&ax)
        }
        MatrixKind::Gaussian => {
            if correlated {
                let a: Vec<f64> = normals(n * n, rng);
                let mut x = vec![0.0; n];
                for (r, yr) in y.iter().enumerate() {
                    x.iter_mut()
                        .zip(&a[r * n..(r + 1) * n])
                        .for_each(|(x, a)| *x += a * yr);
                }
                let x = unit(x);
                let ax: Vec<f64> = (0..n)
                    .map(|r| {
                        a[r * n..(r + 1) * n]
                            .iter()
                            .zip(&x)
                            .map(|(p, q)| p * q)
                            .sum()
                    })
                    .collect();
                coord_size(&ax)
            } else {
                let x = normals(n, rng);
                // Rows of an independent Gaussian matrix are themselves
                // independent, so a row sample suffices.
                let m = n.min(ROW_SAMPLE);
                let ax: Vec<f64> = (0..m)
                    .map(|_| (0..n).map(|b| rng.normal() * x[b]).sum())
                    .collect();
                coord_size(&ax)
            }
        }
    }
}

fn sample_rows(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    if n <= ROW_SAMPLE {
        (0..n).collect()
    } else {
        (0..ROW_SAMPLE).map(|_| rng.below(n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntrySizeLaw {
    pub kind: MatrixKind,
    pub correlated: bool,
    /// `(n, mean coordinate size over reps)`.
    pub points: Vec<(usize, f64)>,
    pub fit: SlopeFit,
    pub expected_slope: f64,
}

/// Mean coordinate size of `A x` over `reps` draws at every `n`, and the
/// log-log slope against `n`.
pub fn entry_size_law_check(
    kind: MatrixKind,
    n_list: &[usize],
    correlated: bool,
    reps: usize,
    rng: &mut SeededRng,
) -> Result<EntrySizeLaw> {
    if reps == 0 || n_list.contains(&0) {
        return Err(Error::Config(
            "entry size check needs reps >= 1 and n >= 1".into(),
        ));
    }
    let points: Vec<(usize, f64)> = n_list
        .iter()
        .map(|&n| {
            let total: f64 = (0..reps)
                .map(|_| entry_size_once(kind, n, correlated, rng))
                .sum();
            (n, total / reps as f64)
        })
        .collect();
    let fit = fit_slope(
        &points
            .iter()
            .map(|&(n, s)| (n as f64, s))
            .collect::<Vec<_>>(),
    )?;
    Ok(EntrySizeLaw {
        kind,
        correlated,
        points,
        fit,
        expected_slope: kind.expected_slope(correlated),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outer_product_with_its_own_factor_is_exactly_n() {
        for n in [4usize, 16, 64] {
            let u: Vec<f64> = (0..n)
                .map(|i| if i % 3 == 0 { -1.0 } else { 1.0 })
                .collect();
            let v: Vec<f64> = (0..n)
                .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
                .collect();
            let vx: f64 = v.iter().map(|x| x * x).sum();
            let av: Vec<f64> = u.iter().map(|ui| ui * vx).collect();
            assert_eq!(coord_size(&av), n as f64);
        }
    }

    #[test]
    fn small_laws_have_the_right_sign() {
        let mut rng = SeededRng::new(0, 0);
        let ns = [16, 64, 256];
        let g = entry_size_law_check(MatrixKind::Gaussian, &ns, false, 20, &mut rng).unwrap();
        assert!((g.fit.slope - 0.5).abs() < 0.15, "{g:?}");
        let t = entry_size_law_check(MatrixKind::NonlinearTensorProduct, &ns, true, 10, &mut rng)
            .unwrap();
        assert!((t.fit.slope - 1.0).abs() < 0.2, "{t:?}");
    }
}

//! Kernels on flat feature rows: linear and Gaussian with the median
//! bandwidth heuristic.

use nalgebra::DMatrix;

use super::{lambda_sweep, RegressionError, SweepReport, Validation};
use crate::engine::GramMatrix;

/// Rows used to estimate the median pairwise distance.
pub const MEDIAN_MAX_ROWS: usize = 2000;

fn as_matrix(rows: &[f64], dim: usize) -> Result<DMatrix<f64>, RegressionError> {
    if dim == 0 || !rows.len().is_multiple_of(dim) {
        return Err(RegressionError::Shape(format!(
            "{} values are not rows of dimension {dim}",
            rows.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows.len() / dim, dim, rows))
}

fn to_gram(m: DMatrix<f64>, symmetric: bool) -> Result<GramMatrix, RegressionError> {
    GramMatrix::from_dmatrix(&m, symmetric).map_err(|e| RegressionError::Shape(e.to_string()))
}

/// Squared distances via `|x|^2 + |z|^2 - 2 x.z`, clamped at 0.
fn squared_distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let na: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let nb: Vec<f64> = b.row_iter().map(|r| r.norm_squared()).collect();
    let mut d = a * b.transpose();
    for r in 0..d.nrows() {
        for c in 0..d.ncols() {
            d[(r, c)] = (na[r] + nb[c] - 2.0 * d[(r, c)]).max(0.0);
        }
    }
    d
}

/// `X_A X_B^T` on flattened rows.
pub fn linear_gram(a: &[f64], b: &[f64], dim: usize) -> Result<GramMatrix, RegressionError> {
    let symmetric = a == b;
    let ma = as_matrix(a, dim)?;
    let mut k = if symmetric {
        &ma * ma.transpose()
    } else {
        &ma * as_matrix(b, dim)?.transpose()
    };
    if symmetric {
        k.fill_lower_triangle_with_upper_triangle();
    }
    to_gram(k, symmetric)
}

/// `exp(-|x - z|^2 / (2 gamma^2))` with `gamma` a length scale.
pub fn gaussian_gram(
    a: &[f64],
    b: &[f64],
    dim: usize,
    gamma: f64,
) -> Result<GramMatrix, RegressionError> {
    check_bandwidth(gamma)?;
    let symmetric = a == b;
    gaussian_from_squared(&squared_distance_matrix(a, b, dim)?, gamma, symmetric)
}

fn check_bandwidth(gamma: f64) -> Result<(), RegressionError> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(RegressionError::BadBandwidth(gamma))
    }
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`.
/// Computing these once lets a bandwidth search skip the inner products.
pub fn squared_distance_matrix(
    a: &[f64],
    b: &[f64],
    dim: usize,
) -> Result<DMatrix<f64>, RegressionError> {
    let ma = as_matrix(a, dim)?;
    if a == b {
        let mut d = squared_distances(&ma, &ma);
        d.fill_lower_triangle_with_upper_triangle();
        d.fill_diagonal(0.0);
        Ok(d)
    } else {
        Ok(squared_distances(&ma, &as_matrix(b, dim)?))
    }
}

/// Gaussian Gram matrix from precomputed squared distances.
pub fn gaussian_from_squared(
    d2: &DMatrix<f64>,
    gamma: f64,
    symmetric: bool,
) -> Result<GramMatrix, RegressionError> {
    check_bandwidth(gamma)?;
    let scale = -0.5 / (gamma * gamma);
    let k = d2.map(|v| (v * scale).exp());
    to_gram(k, symmetric)
}

/// Median Euclidean distance over all pairs of (at most
/// [`MEDIAN_MAX_ROWS`] evenly spaced) rows.
pub fn median_heuristic(rows: &[f64], dim: usize) -> Result<f64, RegressionError> {
    let m = as_matrix(rows, dim)?;
    let n = m.nrows();
    if n < 2 {
        return Err(RegressionError::Shape(
            "median heuristic needs two rows".into(),
        ));
    }
    let m = if n > MEDIAN_MAX_ROWS {
        let picks: Vec<usize> = (0..MEDIAN_MAX_ROWS)
            .map(|i| i * n / MEDIAN_MAX_ROWS)
            .collect();
        m.select_rows(&picks)
    } else {
        m
    };
    let d2 = squared_distances(&m, &m);
    let k = m.nrows();
    let mut dists = Vec::with_capacity(k * (k - 1) / 2);
    for r in 0..k {
        for c in r + 1..k {
            dists.push(d2[(r, c)].sqrt());
        }
    }
    let len = dists.len();
    let mid = len / 2;
    let (_, upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if len % 2 == 1 {
        Ok(upper)
    } else {
        let lower = dists[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(0.5 * (lower + upper))
    }
}

/// `{nu * 2^i : i = -19..=20}`.
pub fn bandwidth_grid(nu: f64) -> Vec<f64> {
    (-19..=20).map(|i| nu * 2f64.powi(i)).collect()
}

/// One bandwidth of a [`tune_gaussian`] search.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthPoint {
    pub gamma: f64,
    pub sweep: Option<SweepReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSearch {
    pub gamma: f64,
    pub lambda: f64,
    pub accuracy: f64,
    pub points: Vec<BandwidthPoint>,
}

/// Exhaustive search over `gammas x lambdas`, scoring each pair with
/// `validation`. Distances are computed once. Ties keep the earliest
/// bandwidth, and within one bandwidth the smaller lambda.
pub fn tune_gaussian(
    rows: &[f64],
    dim: usize,
    labels: &[usize],
    classes: usize,
    validation: &Validation,
    gammas: &[f64],
    lambdas: &[f64],
) -> Result<GaussianSearch, RegressionError> {
    if gammas.is_empty() {
        return Err(RegressionError::EmptyGrid);
    }
    let d2 = squared_distance_matrix(rows, rows, dim)?;
    let mut points = Vec::with_capacity(gammas.len());
    let mut best: Option<(f64, f64, f64)> = None;
    for &gamma in gammas {
        let k = gaussian_from_squared(&d2, gamma, true)?;
        let sweep = match lambda_sweep(&k, labels, classes, validation, lambdas) {
            Ok(s) => Some(s),
            Err(RegressionError::AllFailed) => None,
            Err(e) => return Err(e),
        };
        if let Some(s) = &sweep {
            if best.is_none_or(|(_, _, acc)| s.best_accuracy > acc) {
                best = Some((gamma, s.best_lambda, s.best_accuracy));
            }
            log::debug!(
                "gamma {gamma:.4e}: lambda {:e}, accuracy {:.4}",
                s.best_lambda,
                s.best_accuracy
            );
        }
        points.push(BandwidthPoint { gamma, sweep });
    }
    let (gamma, lambda, accuracy) = best.ok_or(RegressionError::AllFailed)?;
    Ok(GaussianSearch {
        gamma,
        lambda,
        accuracy,
        points,
    })
}

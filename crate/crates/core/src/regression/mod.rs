//! Kernel ridge regression on one-hot labels.
//!
//! `alpha = (K + lambda I)^-1 Y`, predictions `argmax_c sum_i alpha_ic k(x, x_i)`.
//! Leave-one-out predictions come in closed form from the same inverse, and
//! the tilted fit refits on `Y - t * Y_loo`.

mod gaussian;
mod model_io;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;
use thiserror::Error;

use crate::engine::GramMatrix;

pub use gaussian::{
    bandwidth_grid, gaussian_from_squared, gaussian_gram, linear_gram, median_heuristic,
    squared_distance_matrix, tune_gaussian, BandwidthPoint, GaussianSearch, MEDIAN_MAX_ROWS,
};
pub use model_io::MODEL_MAGIC;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("regularizer must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("tilt must lie in [0, 1), got {0}")]
    BadTilt(f64),
    #[error(
        "K + {lambda:e} I is not numerically positive definite (even with jitter); use a larger lambda"
    )]
    Factorization { lambda: f64 },
    #[error(
        "solve residual {relative:e} exceeds tolerance at lambda {lambda:e}; use a larger lambda"
    )]
    Residual { lambda: f64, relative: f64 },
    #[error("Q[{index},{index}] = {value:e} is not positive; the factorization is broken")]
    NonPositiveLeverage { index: usize, value: f64 },
    #[error("training matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("Gaussian length scale must be > 0, got {0}")]
    BadBandwidth(f64),
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error("every lambda in the grid failed")]
    AllFailed,
}

/// Relative residual bound `||(K + lambda I) alpha - Y|| <= tol ||Y||`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;

/// Jitter added once to the diagonal (relative to `trace / N`) when the
/// plain factorization fails.
pub const JITTER_RELATIVE: f64 = 1e-8;

/// Default leave-one-out tilt.
pub const DEFAULT_TILT: f64 = 0.3;

/// `{0} U {1e-4, 1e-3, ..., 1e6}`.
pub fn default_lambda_grid() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((-4..=6).map(|e| 10f64.powi(e)))
        .collect()
}

/// `N x classes` indicator matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    y
}

/// Cholesky factor of `K + lambda I`, possibly with a diagonal jitter.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    system: DMatrix<f64>,
    pub lambda: f64,
    pub jitter: f64,
}

impl SpdFactor {
    pub fn new(k: &DMatrix<f64>, lambda: f64) -> Result<Self, RegressionError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(RegressionError::BadLambda(lambda));
        }
        if !k.is_square() {
            return Err(RegressionError::Shape(format!(
                "training kernel is {}x{}",
                k.nrows(),
                k.ncols()
            )));
        }
        let n = k.nrows();
        let mut system = k.clone();
        for i in 0..n {
            system[(i, i)] += lambda;
        }
        if let Some(chol) = Cholesky::new(system.clone()) {
            return Ok(Self {
                chol,
                system,
                lambda,
                jitter: 0.0,
            });
        }
        let jitter = JITTER_RELATIVE
            * (system.trace() / n.max(1) as f64)
                .abs()
                .max(f64::MIN_POSITIVE);
        let mut jittered = system.clone();
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        let chol = Cholesky::new(jittered).ok_or(RegressionError::Factorization { lambda })?;
        log::debug!("lambda {lambda:e}: factorized with jitter {jitter:e}");
        Ok(Self {
            chol,
            system,
            lambda,
            jitter,
        })
    }

    pub fn n(&self) -> usize {
        self.system.nrows()
    }

    /// Solves `(K + lambda I) X = rhs` with up to two refinement steps and
    /// enforces [`RESIDUAL_TOLERANCE`] against the unjittered system.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, RegressionError> {
        let mut x = self.chol.solve(rhs);
        let target = rhs.norm();
        let mut relative = relative_residual(&self.system, &x, rhs, target);
        for _ in 0..2 {
            if relative <= RESIDUAL_TOLERANCE {
                break;
            }
            let r = rhs - &self.system * &x;
            x += self.chol.solve(&r);
            relative = relative_residual(&self.system, &x, rhs, target);
        }
        if relative <= RESIDUAL_TOLERANCE {
            Ok(x)
        } else {
            Err(RegressionError::Residual {
                lambda: self.lambda,
                relative,
            })
        }
    }

    /// `Q = (K + lambda I)^-1` (of the factored, possibly jittered, system).
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

fn relative_residual(
    system: &DMatrix<f64>,
    x: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    target: f64,
) -> f64 {
    let r = (system * x - rhs).norm();
    if target > 0.0 {
        r / target
    } else {
        r
    }
}

fn training_matrix(k: &GramMatrix) -> Result<DMatrix<f64>, RegressionError> {
    if k.rows() != k.cols() {
        return Err(RegressionError::Shape(format!(
            "training kernel is {}x{}",
            k.rows(),
            k.cols()
        )));
    }
    let asym = k.asymmetry();
    if asym > 1e-5 {
        return Err(RegressionError::NotSymmetric(asym));
    }
    Ok(k.to_dmatrix())
}

fn check_labels(n: usize, y: &DMatrix<f64>) -> Result<(), RegressionError> {
    if y.nrows() != n {
        return Err(RegressionError::Shape(format!(
            "{} label rows for {n} training examples",
            y.nrows()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// `N x classes` coefficients.
    pub alpha: DMatrix<f64>,
    pub lambda: f64,
    /// Leave-one-out tilt; 0 for a plain fit.
    pub tilt: f64,
    pub tilted: bool,
    /// Diagonal jitter the factorization needed (0 when none).
    pub jitter: f64,
    /// One-hot training labels.
    pub labels: DMatrix<f64>,
    /// Dataset ids of the training examples, in column order of `K`.
    pub train_ids: Vec<usize>,
}

impl RidgeModel {
    pub fn classes(&self) -> usize {
        self.alpha.ncols()
    }
}

/// Closed-form ridge fit on a symmetric training Gram matrix.
pub fn ridge_fit(
    k: &GramMatrix,
    y: &DMatrix<f64>,
    lambda: f64,
) -> Result<RidgeModel, RegressionError> {
    let km = training_matrix(k)?;
    check_labels(km.nrows(), y)?;
    let factor = SpdFactor::new(&km, lambda)?;
    let alpha = factor.solve(y)?;
    Ok(RidgeModel {
        alpha,
        lambda,
        tilt: 0.0,
        tilted: false,
        jitter: factor.jitter,
        labels: y.clone(),
        train_ids: k.col_ids.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `N_test x classes`.
    pub scores: DMatrix<f64>,
    pub labels: Vec<usize>,
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(scores: &DMatrix<f64>) -> Vec<usize> {
    (0..scores.nrows())
        .map(|r| {
            let mut best = 0;
            for c in 1..scores.ncols() {
                if scores[(r, c)] > scores[(r, best)] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Scores `K_cross * alpha` for a test x train kernel.
pub fn predict(model: &RidgeModel, k_cross: &GramMatrix) -> Result<Prediction, RegressionError> {
    if k_cross.cols() != model.alpha.nrows() {
        return Err(RegressionError::Shape(format!(
            "cross kernel has {} columns, model has {} training examples",
            k_cross.cols(),
            model.alpha.nrows()
        )));
    }
    if k_cross.col_ids != model.train_ids {
        return Err(RegressionError::Shape(
            "cross kernel columns are not the training examples in training order".into(),
        ));
    }
    let scores = k_cross.to_dmatrix() * &model.alpha;
    let labels = argmax_rows(&scores);
    Ok(Prediction { scores, labels })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooPrediction {
    /// Row `i` predicts example `i` from all other examples.
    pub y_loo: DMatrix<f64>,
}

fn loo_from_factor(factor: &SpdFactor, y: &DMatrix<f64>) -> Result<LooPrediction, RegressionError> {
    let q = factor.inverse();
    let alpha = &q * y;
    let mut y_loo = y.clone();
    for i in 0..y.nrows() {
        let qii = q[(i, i)];
        if !(qii > 0.0) {
            return Err(RegressionError::NonPositiveLeverage {
                index: i,
                value: qii,
            });
        }
        for c in 0..y.ncols() {
            y_loo[(i, c)] -= alpha[(i, c)] / qii;
        }
    }
    Ok(LooPrediction { y_loo })
}

/// Closed-form leave-one-out: `Y_loo = Y - alpha / diag(Q)` with
/// `Q = (K + lambda I)^-1`.
pub fn loo_predict(
    k: &GramMatrix,
    y: &DMatrix<f64>,
    lambda: f64,
) -> Result<LooPrediction, RegressionError> {
    let km = training_matrix(k)?;
    check_labels(km.nrows(), y)?;
    loo_from_factor(&SpdFactor::new(&km, lambda)?, y)
}

/// Refit on `Y - t Y_loo`. `t = None` uses [`DEFAULT_TILT`]; `t = 0` is
/// exactly [`ridge_fit`].
pub fn tilted_fit(
    k: &GramMatrix,
    y: &DMatrix<f64>,
    lambda: f64,
    t: Option<f64>,
) -> Result<RidgeModel, RegressionError> {
    let t = t.unwrap_or(DEFAULT_TILT);
    if !(0.0..1.0).contains(&t) {
        return Err(RegressionError::BadTilt(t));
    }
    if t == 0.0 {
        return ridge_fit(k, y, lambda);
    }
    let km = training_matrix(k)?;
    check_labels(km.nrows(), y)?;
    let factor = SpdFactor::new(&km, lambda)?;
    let loo = loo_from_factor(&factor, y)?;
    let target = y - loo.y_loo * t;
    let alpha = factor.solve(&target)?;
    Ok(RidgeModel {
        alpha,
        lambda,
        tilt: t,
        tilted: true,
        jitter: factor.jitter,
        labels: y.clone(),
        train_ids: k.col_ids.clone(),
    })
}

/// How each regularizer is scored.
#[derive(Debug, Clone, PartialEq)]
pub enum Validation {
    /// Closed-form leave-one-out accuracy on the training set.
    LeaveOneOut,
    /// Fit on `train` positions, score on `val` positions of the same matrix.
    Holdout { train: Vec<usize>, val: Vec<usize> },
    /// Fold id per example; accuracy averaged over folds.
    Folds(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub best_lambda: f64,
    pub best_accuracy: f64,
    pub points: Vec<SweepPoint>,
}

fn accuracy_of(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len().max(1) as f64
}

fn holdout_accuracy(
    km: &DMatrix<f64>,
    labels: &[usize],
    classes: usize,
    train: &[usize],
    val: &[usize],
    lambda: f64,
) -> Result<f64, RegressionError> {
    let ktr = km.select_rows(train).select_columns(train);
    let kva = km.select_rows(val).select_columns(train);
    let y = one_hot(
        &train.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        classes,
    );
    let alpha = SpdFactor::new(&ktr, lambda)?.solve(&y)?;
    let pred = argmax_rows(&(kva * alpha));
    let truth: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    Ok(accuracy_of(&pred, &truth))
}

fn score_lambda(
    km: &DMatrix<f64>,
    labels: &[usize],
    classes: usize,
    validation: &Validation,
    lambda: f64,
) -> Result<f64, RegressionError> {
    match validation {
        Validation::LeaveOneOut => {
            let factor = SpdFactor::new(km, lambda)?;
            let y = one_hot(labels, classes);
            // Same residual contract as a fit.
            factor.solve(&y)?;
            let loo = loo_from_factor(&factor, &y)?;
            Ok(accuracy_of(&argmax_rows(&loo.y_loo), labels))
        }
        Validation::Holdout { train, val } => {
            holdout_accuracy(km, labels, classes, train, val, lambda)
        }
        Validation::Folds(folds) => {
            let k = folds.iter().max().map_or(0, |m| m + 1);
            let mut total = 0.0;
            for f in 0..k {
                let (val, train): (Vec<usize>, Vec<usize>) =
                    (0..labels.len()).partition(|&i| folds[i] == f);
                total += holdout_accuracy(km, labels, classes, &train, &val, lambda)?;
            }
            Ok(total / k.max(1) as f64)
        }
    }
}

/// Scores every regularizer in `grid` (one factorization each) and returns
/// the most accurate; ties go to the smaller lambda. Failed values are
/// recorded and skipped.
pub fn lambda_sweep(
    k: &GramMatrix,
    labels: &[usize],
    classes: usize,
    validation: &Validation,
    grid: &[f64],
) -> Result<SweepReport, RegressionError> {
    if grid.is_empty() {
        return Err(RegressionError::EmptyGrid);
    }
    let km = training_matrix(k)?;
    if labels.len() != km.nrows() {
        return Err(RegressionError::Shape(format!(
            "{} labels for {} examples",
            labels.len(),
            km.nrows()
        )));
    }
    if let Validation::Folds(f) = validation {
        if f.len() != labels.len() {
            return Err(RegressionError::Shape(
                "fold ids do not match examples".into(),
            ));
        }
    }
    let points: Vec<SweepPoint> = grid
        .par_iter()
        .map(
            |&lambda| match score_lambda(&km, labels, classes, validation, lambda) {
                Ok(acc) => SweepPoint {
                    lambda,
                    accuracy: Some(acc),
                    error: None,
                },
                Err(e) => {
                    log::info!("lambda {lambda:e} skipped: {e}");
                    SweepPoint {
                        lambda,
                        accuracy: None,
                        error: Some(e.to_string()),
                    }
                }
            },
        )
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for p in &points {
        if let Some(acc) = p.accuracy {
            let better = match best {
                None => true,
                Some((bl, ba)) => acc > ba || (acc == ba && p.lambda < bl),
            };
            if better {
                best = Some((p.lambda, acc));
            }
        }
    }
    let (best_lambda, best_accuracy) = best.ok_or(RegressionError::AllFailed)?;
    Ok(SweepReport {
        best_lambda,
        best_accuracy,
        points,
    })
}

//! Accuracy with exact binomial intervals, multi-dataset classifier
//! comparison (Friedman rank, P90/P95, PMA, performance profiles) and the
//! 4-fold UCI tuning protocol.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::data::TabularDataset;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{pred} predictions for {truth} labels")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("accuracy table: {0}")]
    BadTable(String),
    #[error("dataset `{0}` has maximum accuracy 0")]
    ZeroMaximum(String),
    #[error("{got} examples; the protocol needs at least {need}")]
    TooFewExamples { got: usize, need: usize },
    #[error("empty hyperparameter grid")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub value: f64,
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<Accuracy, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(Accuracy {
        correct,
        total: truth.len(),
        value: correct as f64 / truth.len() as f64,
    })
}

/// Smallest `x` in `[0, 1]` with `f(x) >= target`, for nondecreasing `f`.
fn bisect(target: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact two-sided binomial interval for `k` successes in `n` trials.
///
/// The bounds are Beta quantiles: `lo = B^-1(a/2; k, n-k+1)` and
/// `hi = B^-1(1-a/2; k+1, n-k)`, found by bisection on the regularized
/// incomplete beta function. `lo = 0` at `k = 0` and `hi = 1` at `k = n`.
///
/// # Panics
/// If `k > n`, `n == 0` or `conf` is outside `(0, 1)`.
pub fn clopper_pearson(k: usize, n: usize, conf: f64) -> (f64, f64) {
    assert!(n > 0 && k <= n, "need 0 <= k <= n and n > 0");
    assert!(conf > 0.0 && conf < 1.0, "confidence must lie in (0, 1)");
    let alpha = 1.0 - conf;
    let (kf, nf) = (k as f64, n as f64);
    let lo = if k == 0 {
        0.0
    } else {
        bisect(alpha / 2.0, |p| beta_reg(kf, nf - kf + 1.0, p))
    };
    let hi = if k == n {
        1.0
    } else {
        bisect(1.0 - alpha / 2.0, |p| beta_reg(kf + 1.0, nf - kf, p))
    };
    (lo, hi)
}

/// Accuracies with one row per dataset and one column per classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub datasets: Vec<String>,
    pub classifiers: Vec<String>,
    /// `values[d][c]`, fractions in `[0, 1]`.
    pub values: Vec<Vec<f64>>,
}

impl AccuracyTable {
    pub fn new(
        datasets: Vec<String>,
        classifiers: Vec<String>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self, EvalError> {
        if datasets.is_empty() || classifiers.is_empty() {
            return Err(EvalError::Empty);
        }
        if values.len() != datasets.len() {
            return Err(EvalError::BadTable(format!(
                "{} rows for {} datasets",
                values.len(),
                datasets.len()
            )));
        }
        for (name, row) in datasets.iter().zip(&values) {
            if row.len() != classifiers.len() {
                return Err(EvalError::BadTable(format!(
                    "dataset `{name}` has {} cells for {} classifiers",
                    row.len(),
                    classifiers.len()
                )));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(EvalError::BadTable(format!(
                    "dataset `{name}` has an accuracy outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            datasets,
            classifiers,
            values,
        })
    }

    fn row_max(&self, d: usize) -> f64 {
        self.values[d]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn check_positive_max(&self) -> Result<(), EvalError> {
        for d in 0..self.datasets.len() {
            if self.row_max(d) <= 0.0 {
                return Err(EvalError::ZeroMaximum(self.datasets[d].clone()));
            }
        }
        Ok(())
    }
}

/// Ranks within one dataset: 1 is best, ties share the mean of their ranks.
pub fn rank_row(row: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let mut ranks = vec![0.0; row.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && row[order[end]] == row[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let mean = (start + 1 + end) as f64 / 2.0;
        for &c in &order[start..end] {
            ranks[c] = mean;
        }
        start = end;
    }
    ranks
}

/// Mean rank of each classifier over datasets.
pub fn friedman_rank(table: &AccuracyTable) -> Vec<f64> {
    let mut sums = vec![0.0; table.classifiers.len()];
    for row in &table.values {
        for (s, r) in sums.iter_mut().zip(rank_row(row)) {
            *s += r;
        }
    }
    let n = table.datasets.len() as f64;
    sums.into_iter().map(|s| s / n).collect()
}

/// Percentage of datasets where each classifier reaches `threshold * max`.
pub fn p_at(threshold: f64, table: &AccuracyTable) -> Result<Vec<f64>, EvalError> {
    table.check_positive_max()?;
    let mut hits = vec![0usize; table.classifiers.len()];
    for (d, row) in table.values.iter().enumerate() {
        let bar = threshold * table.row_max(d);
        for (h, &v) in hits.iter_mut().zip(row) {
            if v >= bar {
                *h += 1;
            }
        }
    }
    let n = table.datasets.len() as f64;
    Ok(hits.into_iter().map(|h| 100.0 * h as f64 / n).collect())
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Percentage of the per-dataset maximum, averaged over datasets: `(mean, std)`.
pub fn pma(table: &AccuracyTable) -> Result<Vec<(f64, f64)>, EvalError> {
    table.check_positive_max()?;
    Ok((0..table.classifiers.len())
        .map(|c| {
            let pct: Vec<f64> = (0..table.datasets.len())
                .map(|d| 100.0 * table.values[d][c] / table.row_max(d))
                .collect();
            mean_std(&pct)
        })
        .collect())
}

/// Upper end of the profile's tau grid.
pub const PROFILE_TAU_MAX: f64 = 0.2;
/// Profile grid step.
pub const PROFILE_TAU_STEP: f64 = 0.002;

/// Accuracy gaps within this distance of tau count as inside it, so that
/// decimal gaps like `0.9 - 0.8` land on the grid point they name.
const PROFILE_GAP_SLACK: f64 = 1e-12;

pub fn profile_taus() -> Vec<f64> {
    let steps = (PROFILE_TAU_MAX / PROFILE_TAU_STEP).round() as usize;
    (0..=steps).map(|i| i as f64 * PROFILE_TAU_STEP).collect()
}

/// Fraction of datasets whose accuracy gap to the best classifier is at
/// most `tau`, for each classifier and each `tau` in [`profile_taus`].
pub fn performance_profile(table: &AccuracyTable) -> Vec<Vec<(f64, f64)>> {
    performance_profile_at(table, &profile_taus())
}

pub fn performance_profile_at(table: &AccuracyTable, taus: &[f64]) -> Vec<Vec<(f64, f64)>> {
    let n = table.datasets.len() as f64;
    (0..table.classifiers.len())
        .map(|c| {
            let gaps: Vec<f64> = (0..table.datasets.len())
                .map(|d| table.row_max(d) - table.values[d][c])
                .collect();
            taus.iter()
                .map(|&tau| {
                    let inside = gaps
                        .iter()
                        .filter(|&&g| g <= tau + PROFILE_GAP_SLACK)
                        .count();
                    (tau, inside as f64 / n)
                })
                .collect()
        })
        .collect()
}

pub const UCI_FOLDS: usize = 4;

/// Stratified fold ids: each class is shuffled under `seed` and dealt
/// round-robin, continuing the deal across classes so remainders spread
/// evenly over folds.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, rng::streams::FOLDS);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for i in members {
            folds[i] = next % k;
            next += 1;
        }
    }
    folds
}

#[derive(Debug, Clone, PartialEq)]
pub struct UciOutcome {
    /// Mean validation accuracy of the chosen setting.
    pub accuracy: f64,
    pub best_index: usize,
    /// Mean validation accuracy of every grid entry.
    pub grid_accuracy: Vec<f64>,
    /// Per-fold accuracies of the chosen setting.
    pub fold_accuracy: Vec<f64>,
    pub folds: Vec<usize>,
}

/// Tunes `classify` over `grid` by 4-fold cross-validation and reports the
/// mean validation accuracy at the best setting (ties go to the earlier
/// entry). `classify(train, val, params)` returns predictions for `val`.
///
/// Fold ids attached to the dataset are used as-is; otherwise folds are
/// stratified under `seed`.
pub fn uci_protocol<P, F>(
    ds: &TabularDataset,
    classify: F,
    grid: &[P],
    seed: u64,
) -> Result<UciOutcome, EvalError>
where
    P: Sync,
    F: Fn(&TabularDataset, &TabularDataset, &P) -> Vec<usize> + Sync,
{
    let need = 2 * UCI_FOLDS;
    if ds.len() < need {
        return Err(EvalError::TooFewExamples {
            got: ds.len(),
            need,
        });
    }
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let folds = match ds.folds() {
        Some(f) => f.to_vec(),
        None => stratified_folds(ds.labels(), UCI_FOLDS, seed),
    };
    let k = folds.iter().max().map_or(0, |m| m + 1);
    let splits: Vec<(TabularDataset, TabularDataset)> = (0..k)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) =
                (0..ds.len()).partition(|&i| folds[i] == f);
            let val_ds = ds.select(&val);
            let first = val_ds.labels().first().copied();
            if val_ds.labels().iter().all(|&l| Some(l) == first) {
                log::info!("fold {f} holds a single class");
            }
            (ds.select(&train), val_ds)
        })
        .collect();
    let per_setting: Vec<Vec<f64>> = grid
        .par_iter()
        .map(|params| {
            splits
                .iter()
                .map(|(train, val)| {
                    let pred = classify(train, val, params);
                    accuracy(&pred, val.labels()).map(|a| a.value)
                })
                .collect::<Result<Vec<f64>, EvalError>>()
        })
        .collect::<Result<_, _>>()?;
    let grid_accuracy: Vec<f64> = per_setting.iter().map(|f| mean_std(f).0).collect();
    let mut best_index = 0;
    for (i, &acc) in grid_accuracy.iter().enumerate() {
        if acc > grid_accuracy[best_index] {
            best_index = i;
        }
    }
    Ok(UciOutcome {
        accuracy: grid_accuracy[best_index],
        best_index,
        fold_accuracy: per_setting[best_index].clone(),
        grid_accuracy,
        folds,
    })
}

/// One classifier's result on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetResult {
    pub dataset: String,
    pub classifier: String,
    pub correct: usize,
    pub n_eval: usize,
}

impl DatasetResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n_eval as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierSummary {
    pub classifier: String,
    pub friedman_rank: f64,
    pub avg_accuracy: f64,
    pub avg_accuracy_std: f64,
    pub p90: f64,
    pub p95: f64,
    pub pma: f64,
    pub pma_std: f64,
    pub profile: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub results: Vec<DatasetResult>,
    pub summaries: Vec<ClassifierSummary>,
    pub confidence: f64,
}

impl EvalReport {
    /// Aggregates complete results (every classifier on every dataset).
    /// Datasets and classifiers keep their order of first appearance.
    pub fn build(results: Vec<DatasetResult>, confidence: f64) -> Result<Self, EvalError> {
        let mut datasets: Vec<String> = Vec::new();
        let mut classifiers: Vec<String> = Vec::new();
        for r in &results {
            if r.n_eval == 0 || r.correct > r.n_eval {
                return Err(EvalError::BadTable(format!(
                    "{}/{}: {} of {} correct",
                    r.dataset, r.classifier, r.correct, r.n_eval
                )));
            }
            if !datasets.contains(&r.dataset) {
                datasets.push(r.dataset.clone());
            }
            if !classifiers.contains(&r.classifier) {
                classifiers.push(r.classifier.clone());
            }
        }
        let mut values = vec![vec![f64::NAN; classifiers.len()]; datasets.len()];
        for r in &results {
            let d = datasets.iter().position(|x| *x == r.dataset).unwrap();
            let c = classifiers.iter().position(|x| *x == r.classifier).unwrap();
            if !values[d][c].is_nan() {
                return Err(EvalError::BadTable(format!(
                    "duplicate result for {}/{}",
                    r.dataset, r.classifier
                )));
            }
            values[d][c] = r.accuracy();
        }
        if let Some(d) = values.iter().position(|row| row.iter().any(|v| v.is_nan())) {
            return Err(EvalError::BadTable(format!(
                "dataset `{}` is missing a classifier",
                datasets[d]
            )));
        }
        let table = AccuracyTable::new(datasets, classifiers, values)?;
        let summaries = summarize(&table)?;
        Ok(Self {
            results,
            summaries,
            confidence,
        })
    }

    /// One row per dataset and classifier; accuracy in percent to one
    /// decimal, interval bounds in percent to two.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("dataset,classifier,correct,n_eval,accuracy_pct,ci_lo_pct,ci_hi_pct\n");
        for r in &self.results {
            let (lo, hi) = clopper_pearson(r.correct, r.n_eval, self.confidence);
            writeln!(
                out,
                "{},{},{},{},{:.1},{:.2},{:.2}",
                csv_field(&r.dataset),
                csv_field(&r.classifier),
                r.correct,
                r.n_eval,
                100.0 * r.accuracy(),
                100.0 * lo,
                100.0 * hi
            )
            .unwrap();
        }
        out
    }

    /// Aggregate block per classifier, rounded like the CSV.
    pub fn to_json(&self) -> serde_json::Value {
        let round = |v: f64, places: i32| {
            let s = 10f64.powi(places);
            (v * s).round() / s
        };
        let classifiers: Vec<serde_json::Value> = self
            .summaries
            .iter()
            .map(|s| {
                serde_json::json!({
                    "classifier": s.classifier,
                    "friedman_rank": round(s.friedman_rank, 3),
                    "avg_accuracy_pct": round(100.0 * s.avg_accuracy, 1),
                    "avg_accuracy_std_pct": round(100.0 * s.avg_accuracy_std, 1),
                    "p90": round(s.p90, 1),
                    "p95": round(s.p95, 1),
                    "pma": round(s.pma, 1),
                    "pma_std": round(s.pma_std, 1),
                    "profile": s.profile.iter().map(|&(t, f)| [round(t, 3), round(f, 4)]).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::json!({
            "confidence": self.confidence,
            "datasets": self.results.iter().map(|r| &r.dataset).collect::<std::collections::BTreeSet<_>>().len(),
            "classifiers": classifiers,
        })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Friedman rank, average accuracy, P90, P95, PMA and profile per classifier.
pub fn summarize(table: &AccuracyTable) -> Result<Vec<ClassifierSummary>, EvalError> {
    let ranks = friedman_rank(table);
    let p90 = p_at(0.90, table)?;
    let p95 = p_at(0.95, table)?;
    let pmas = pma(table)?;
    let profiles = performance_profile(table);
    Ok(table
        .classifiers
        .iter()
        .enumerate()
        .zip(profiles)
        .map(|((c, name), profile)| {
            let accs: Vec<f64> = table.values.iter().map(|row| row[c]).collect();
            let (avg, avg_std) = mean_std(&accs);
            ClassifierSummary {
                classifier: name.clone(),
                friedman_rank: ranks[c],
                avg_accuracy: avg,
                avg_accuracy_std: avg_std,
                p90: p90[c],
                p95: p95[c],
                pma: pmas[c].0,
                pma_std: pmas[c].1,
                profile,
            }
        })
        .collect())
}

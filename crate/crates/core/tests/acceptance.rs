//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 3 5`. Criteria whose
//! inputs are missing from this machine print FAIL with a `blocked` note;
//! they only affect the exit status when `COMPKERNEL_ACCEPTANCE_STRICT=1`.

use std::env;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use compkernel::arch::{ArchSpec, Layer};
use compkernel::data::{
    load_cifar10, load_mnist_idx, subsample_balanced, zca_apply, zca_fit, CifarSplit, ImageDataset,
};
use compkernel::engine::{compose_kernel, ComposeOptions, GramMatrix};
use compkernel::evaluation::{
    clopper_pearson, friedman_rank, p_at, performance_profile, pma, profile_taus, AccuracyTable,
};
use compkernel::oracles::{
    engine_with, loo_gate, mc_gate, naive_gate, property_gate, quadrature_gate, tiling_gate,
};
use compkernel::regression::{
    bandwidth_grid, default_lambda_grid, gaussian_gram, lambda_sweep, linear_gram,
    median_heuristic, one_hot, predict, ridge_fit, tune_gaussian, Validation,
};
use compkernel::rng;
use rand::seq::SliceRandom;

const SEED: u64 = 20200;

enum Status {
    Pass,
    Fail,
    /// Required inputs are not present on this machine.
    Blocked,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            status: if passed { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        }
    }

    fn blocked(detail: impl Into<String>) -> Self {
        Self {
            status: Status::Blocked,
            detail: detail.into(),
        }
    }
}

fn workspace_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    dir.canonicalize().unwrap_or(dir)
}

fn data_dir(var: &str, default: &str) -> PathBuf {
    env::var_os(var)
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_dir().join(default))
}

fn cache_dir() -> PathBuf {
    data_dir("COMPKERNEL_CACHE_DIR", "target/acceptance-cache")
}

fn ridge_accuracy(
    k_train: &GramMatrix,
    k_test: &GramMatrix,
    train: &[usize],
    test: &[usize],
    classes: usize,
) -> Result<(f64, f64), String> {
    let sweep = lambda_sweep(
        k_train,
        train,
        classes,
        &Validation::LeaveOneOut,
        &default_lambda_grid(),
    )
    .map_err(|e| e.to_string())?;
    let model = ridge_fit(k_train, &one_hot(train, classes), sweep.best_lambda)
        .map_err(|e| e.to_string())?;
    let pred = predict(&model, k_test).map_err(|e| e.to_string())?;
    let hits = pred.labels.iter().zip(test).filter(|(p, t)| p == t).count();
    Ok((100.0 * hits as f64 / test.len() as f64, sweep.best_lambda))
}

fn load_cifar() -> Result<(ImageDataset, ImageDataset), Outcome> {
    let dir = data_dir("COMPKERNEL_CIFAR10_DIR", "data/cifar-10-batches-bin");
    if !dir.join("test_batch.bin").exists() {
        return Err(Outcome::blocked(format!(
            "blocked: CIFAR-10 binary batches not found in {}",
            dir.display()
        )));
    }
    let train =
        load_cifar10(&dir, CifarSplit::Train).map_err(|e| Outcome::check(false, e.to_string()))?;
    let test =
        load_cifar10(&dir, CifarSplit::Test).map_err(|e| Outcome::check(false, e.to_string()))?;
    Ok((train, test))
}

/// Balanced train/test subsets for one trial, ZCA-whitened with a transform
/// fitted on the training subset only.
fn cifar_trial(
    train: &ImageDataset,
    test: &ImageDataset,
    n_train: usize,
    trial: u64,
) -> Result<(ImageDataset, ImageDataset), String> {
    let tr = subsample_balanced(train, n_train, SEED + trial).map_err(|e| e.to_string())?;
    let te = subsample_balanced(test, 2000, SEED + trial).map_err(|e| e.to_string())?;
    let zca = zca_fit(&tr, None).map_err(|e| e.to_string())?;
    Ok((
        zca_apply(&zca, &tr).map_err(|e| e.to_string())?,
        zca_apply(&zca, &te).map_err(|e| e.to_string())?,
    ))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn cifar_myrtle5() -> Outcome {
    let (train, test) = match load_cifar() {
        Ok(d) => d,
        Err(o) => return o,
    };
    let start = Instant::now();
    let arch = ArchSpec::myrtle(5, Layer::ReluEmbed).expect("myrtle5");
    let opts = ComposeOptions {
        cache_dir: Some(cache_dir()),
        ..Default::default()
    };
    let mut accs = Vec::new();
    let mut lambdas = Vec::new();
    for trial in 0..3 {
        let run = || -> Result<(f64, f64), String> {
            let (tr, te) = cifar_trial(&train, &test, 160, trial)?;
            let (k_train, _) = compose_kernel(&tr, &tr, &arch, &opts).map_err(|e| e.to_string())?;
            let (k_test, _) = compose_kernel(&te, &tr, &arch, &opts).map_err(|e| e.to_string())?;
            ridge_accuracy(&k_train, &k_test, tr.labels(), te.labels(), 10)
        };
        match run() {
            Ok((acc, lambda)) => {
                accs.push(acc);
                lambdas.push(lambda);
            }
            Err(e) => return Outcome::check(false, format!("trial {trial}: {e}")),
        }
    }
    let m = mean(&accs);
    let elapsed = start.elapsed();
    Outcome::check(
        (m - 38.61).abs() <= 4.0 && elapsed <= Duration::from_secs(3600),
        format!(
            "mean {m:.2}% over trials {accs:.2?} (lambda {lambdas:?}), target 38.61 +- 4.0, {:.0}s of 3600s",
            elapsed.as_secs_f64()
        ),
    )
}

fn cifar_linear() -> Outcome {
    let (train, test) = match load_cifar() {
        Ok(d) => d,
        Err(o) => return o,
    };
    let start = Instant::now();
    let mut accs = Vec::new();
    for trial in 0..3 {
        let run = || -> Result<f64, String> {
            let (tr, te) = cifar_trial(&train, &test, 320, trial)?;
            let d = tr.feature_dim();
            let (a, b) = (tr.to_rows(), te.to_rows());
            let k_train = linear_gram(&a, &a, d).map_err(|e| e.to_string())?;
            let k_test = linear_gram(&b, &a, d).map_err(|e| e.to_string())?;
            Ok(ridge_accuracy(&k_train, &k_test, tr.labels(), te.labels(), 10)?.0)
        };
        match run() {
            Ok(acc) => accs.push(acc),
            Err(e) => return Outcome::check(false, format!("trial {trial}: {e}")),
        }
    }
    let m = mean(&accs);
    let elapsed = start.elapsed();
    Outcome::check(
        (m - 19.18).abs() <= 3.0 && elapsed <= Duration::from_secs(120),
        format!(
            "mean {m:.2}% over trials {accs:.2?}, target 19.18 +- 3.0, {:.1}s of 120s",
            elapsed.as_secs_f64()
        ),
    )
}

fn mnist_gaussian() -> Outcome {
    let dir = data_dir("COMPKERNEL_MNIST_DIR", "data/mnist");
    let file = |name: &str| dir.join(name);
    if !file("t10k-images-idx3-ubyte").exists() {
        return Outcome::blocked(format!(
            "blocked: MNIST IDX files not found in {}",
            dir.display()
        ));
    }
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let load = |img: &str, lab: &str| {
            load_mnist_idx(&file(img), &file(lab)).map_err(|e| e.to_string())
        };
        let train = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
        let test = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
        let train = subsample_balanced(&train, 5000, SEED).map_err(|e| e.to_string())?;
        let test = subsample_balanced(&test, 2000, SEED).map_err(|e| e.to_string())?;
        let d = train.feature_dim();
        let rows = train.to_rows();
        let nu = median_heuristic(&rows, d).map_err(|e| e.to_string())?;

        // Bandwidth and regularizer chosen on a held-out split of the
        // training set: fit on 1000 examples, score on another 1000.
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(SEED, rng::streams::FOLDS));
        let tune = train.select(&order[..2000]);
        let holdout = Validation::Holdout {
            train: (0..1000).collect(),
            val: (1000..2000).collect(),
        };
        let search = tune_gaussian(
            &tune.to_rows(),
            d,
            tune.labels(),
            10,
            &holdout,
            &bandwidth_grid(nu),
            &default_lambda_grid(),
        )
        .map_err(|e| e.to_string())?;

        let k_train = gaussian_gram(&rows, &rows, d, search.gamma).map_err(|e| e.to_string())?;
        let model = ridge_fit(&k_train, &one_hot(train.labels(), 10), search.lambda)
            .map_err(|e| e.to_string())?;
        let k_test =
            gaussian_gram(&test.to_rows(), &rows, d, search.gamma).map_err(|e| e.to_string())?;
        let pred = predict(&model, &k_test).map_err(|e| e.to_string())?;
        let hits = pred
            .labels
            .iter()
            .zip(test.labels())
            .filter(|(p, t)| p == t)
            .count();
        let acc = 100.0 * hits as f64 / test.len() as f64;
        Ok(format!(
            "{acc:.2}|nu {nu:.3}, gamma {:.3}, lambda {:e}, holdout {:.1}%",
            search.gamma,
            search.lambda,
            100.0 * search.accuracy
        ))
    };
    match run() {
        Ok(summary) => {
            let (acc, rest) = summary.split_once('|').expect("summary");
            let acc: f64 = acc.parse().expect("accuracy");
            let elapsed = start.elapsed();
            Outcome::check(
                acc >= 95.0 && elapsed <= Duration::from_secs(300),
                format!(
                    "{acc:.2}% on 2000 test images (need 95.0), {rest}, {:.1}s of 300s",
                    elapsed.as_secs_f64()
                ),
            )
        }
        Err(e) => Outcome::check(false, e),
    }
}

fn random_features() -> Outcome {
    let g = mc_gate(4096, 256, true, SEED);
    Outcome::check(g.passed, g.detail)
}

fn quadrature() -> Outcome {
    let start = Instant::now();
    let g = quadrature_gate();
    let elapsed = start.elapsed();
    Outcome::check(
        g.passed && elapsed <= Duration::from_secs(10),
        format!("{}, {:.2}s of 10s", g.detail, elapsed.as_secs_f64()),
    )
}

fn loo() -> Outcome {
    let g = loo_gate(&[10, 30], &[0.01, 1.0], 10, SEED);
    Outcome::check(g.passed, g.detail)
}

fn properties() -> Outcome {
    let g = property_gate(100, SEED);
    Outcome::check(g.passed, g.detail)
}

fn engine_equivalence() -> Outcome {
    let engine = engine_with(2, 4);
    let naive = naive_gate(&engine, 25, SEED);
    let tiling = tiling_gate(25, SEED);
    Outcome::check(
        naive.passed && tiling.passed,
        format!("{}; {}", naive.detail, tiling.detail),
    )
}

fn clopper_pearson_60() -> Outcome {
    let (lo, hi) = clopper_pearson(60, 60, 0.95);
    let (lo_pct, hi_pct) = (format!("{:.2}", 100.0 * lo), format!("{:.2}", 100.0 * hi));
    Outcome::check(
        lo_pct == "94.04" && hi_pct == "100.00",
        format!("CP(60, 60, 0.95) = [{lo_pct}, {hi_pct}]"),
    )
}

/// Five datasets, three classifiers; every expected value below was worked
/// out by hand from the table.
fn metrics_block() -> Outcome {
    let table = AccuracyTable::new(
        (1..=5).map(|i| format!("d{i}")).collect(),
        vec!["A".into(), "B".into(), "C".into()],
        vec![
            vec![0.90, 0.80, 0.85],
            vec![0.70, 0.70, 0.60],
            vec![0.50, 0.60, 0.55],
            vec![0.95, 0.90, 0.94],
            vec![0.80, 0.80, 0.80],
        ],
    )
    .expect("table");
    let mut failures = Vec::new();
    let mut expect = |what: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-9 {
            failures.push(format!("{what}: {got} != {want}"));
        }
    };

    // Ranks per dataset: A 1, 1.5, 3, 1, 2; B 3, 1.5, 1, 3, 2; C 2, 3, 2, 2, 2.
    let fr = friedman_rank(&table);
    for (c, want) in [8.5 / 5.0, 10.5 / 5.0, 11.0 / 5.0].into_iter().enumerate() {
        expect("friedman", fr[c], want);
    }

    // Ratios to the dataset maximum:
    //   A: 1, 1, 5/6, 1, 1
    //   B: 8/9, 1, 1, 18/19, 1
    //   C: 17/18, 6/7, 11/12, 94/95, 1
    let p90 = p_at(0.9, &table).expect("p90");
    let p95 = p_at(0.95, &table).expect("p95");
    for (c, (w90, w95)) in [(80.0, 80.0), (80.0, 60.0), (80.0, 40.0)]
        .into_iter()
        .enumerate()
    {
        expect("p90", p90[c], w90);
        expect("p95", p95[c], w95);
    }
    let ratios: [[f64; 5]; 3] = [
        [1.0, 1.0, 5.0 / 6.0, 1.0, 1.0],
        [8.0 / 9.0, 1.0, 1.0, 18.0 / 19.0, 1.0],
        [17.0 / 18.0, 6.0 / 7.0, 11.0 / 12.0, 94.0 / 95.0, 1.0],
    ];
    let got = pma(&table).expect("pma");
    // A by hand: mean 29/30, sample variance (4/900 + 16/900) / 4 = 1/180.
    expect("pma mean A", got[0].0, 100.0 * 29.0 / 30.0);
    expect("pma std A", got[0].1, 100.0 * (1.0f64 / 180.0).sqrt());
    for c in 1..3 {
        let m = ratios[c].iter().sum::<f64>() / 5.0;
        let var = ratios[c].iter().map(|r| (r - m).powi(2)).sum::<f64>() / 4.0;
        expect("pma mean", got[c].0, 100.0 * m);
        expect("pma std", got[c].1, 100.0 * var.sqrt());
    }

    // Gaps to the best: A 0, 0, .1, 0, 0; B .1, 0, 0, .05, 0;
    // C .05, .1, .05, .01, 0. Grid index i is tau = 0.002 i.
    let step = |i: usize, steps: &[(usize, f64)]| {
        steps
            .iter()
            .rev()
            .find(|(from, _)| i >= *from)
            .map(|s| s.1)
            .unwrap()
    };
    let expected: [&[(usize, f64)]; 3] = [
        &[(0, 0.8), (50, 1.0)],
        &[(0, 0.6), (25, 0.8), (50, 1.0)],
        &[(0, 0.2), (5, 0.4), (25, 0.8), (50, 1.0)],
    ];
    let profile = performance_profile(&table);
    let taus = profile_taus();
    for c in 0..3 {
        for (i, &(tau, frac)) in profile[c].iter().enumerate() {
            expect("profile tau", tau, taus[i]);
            expect(
                &format!("profile {c} at {tau:.3}"),
                frac,
                step(i, expected[c]),
            );
        }
    }
    Outcome::check(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "Friedman {fr:.2?}, P90 {p90:?}, P95 {p95:?}, {} profile points",
                3 * taus.len()
            )
        } else {
            failures.join("; ")
        },
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "CIFAR-10 subsets, Myrtle5 kernel", cifar_myrtle5),
    (2, "CIFAR-10 subsets, linear kernel", cifar_linear),
    (3, "MNIST subset, Gaussian kernel", mnist_gaussian),
    (4, "random-feature networks vs closed form", random_features),
    (5, "dual activation quadrature", quadrature),
    (6, "closed-form leave-one-out", loo),
    (7, "PSD, symmetry and diagonal properties", properties),
    (8, "engine vs naive, tiling invariance", engine_equivalence),
    (9, "Clopper-Pearson interval", clopper_pearson_60),
    (10, "comparison metrics block", metrics_block),
];

fn main() -> ExitCode {
    let wanted: Vec<usize> = env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = env::var("COMPKERNEL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    println!();
    for &(id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (label, gating) = match outcome.status {
            Status::Pass => ("PASS", false),
            Status::Fail => ("FAIL", true),
            Status::Blocked => ("FAIL", strict),
        };
        println!(
            "criterion {id:>2} {label}  {name} [{secs:.1}s]: {}",
            outcome.detail
        );
        if gating {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}

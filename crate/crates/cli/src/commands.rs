use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use compkernel::arch::validate_arch;
use compkernel::binio::write_atomic;
use compkernel::engine::{compose_kernel, ComposeOptions, ComposeStats, EngineError, GramMatrix};
use compkernel::evaluation::{clopper_pearson, stratified_folds, DatasetResult, EvalReport};
use compkernel::oracles::{run_suite, EngineFn, VerifyLevel};
use compkernel::regression::{
    default_lambda_grid, gaussian_gram, lambda_sweep, linear_gram, one_hot, predict, ridge_fit,
    tilted_fit, RidgeModel, SweepReport, Validation,
};
use serde_json::json;

use crate::config::{Experiment, ValidationKind, DEFAULT_CONFIDENCE, DEFAULT_FOLDS};
use crate::pipeline::{
    kernel_choice, kernel_key, load_raw, prepare, KernelChoice, Prepared, Split,
};
use crate::{Classify, Failure, Level};

/// Files produced by a command, written only after all work succeeded.
#[derive(Default)]
struct Outputs(Vec<(PathBuf, Vec<u8>)>);

impl Outputs {
    fn add(&mut self, path: PathBuf, data: impl Into<Vec<u8>>) {
        self.0.push((path, data.into()));
    }

    fn write(self) -> Result<(), Failure> {
        for (path, data) in self.0 {
            write_atomic(&path, &data)
                .map_err(|e| anyhow!("{}: {e}", path.display()))
                .runtime()?;
        }
        Ok(())
    }
}

fn splits(exp: &Experiment) -> Result<Vec<Split>, Failure> {
    let raw = load_raw(&exp.config.dataset).runtime()?;
    exp.config
        .dataset
        .seeds
        .iter()
        .map(|&seed| prepare(&exp.config.dataset, &raw, seed).invalid())
        .collect()
}

fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

fn labels_csv(p: &Prepared) -> String {
    let mut out = String::from("index,label\n");
    for (i, l) in p.labels().iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

fn describe(p: &Prepared) -> serde_json::Value {
    json!({
        "examples": p.len(),
        "class_counts": class_counts(p.labels(), p.class_count()),
        "content_sha256": hex::encode(p.content_hash()),
        "provenance": p.provenance(),
    })
}

pub fn prep(exp: &Experiment) -> Result<(), Failure> {
    let splits = splits(exp)?;
    let mut out = Outputs::default();
    let mut seeds = Vec::new();
    for s in &splits {
        let dir = exp.out_dir.join("prep").join(format!("seed-{}", s.seed));
        out.add(dir.join("train_labels.csv"), labels_csv(&s.train));
        out.add(dir.join("test_labels.csv"), labels_csv(&s.test));
        seeds.push(json!({
            "seed": s.seed,
            "train": describe(&s.train),
            "test": describe(&s.test),
        }));
        println!(
            "seed {}: {} training and {} test examples",
            s.seed,
            s.train.len(),
            s.test.len()
        );
    }
    let manifest = json!({ "dataset": exp.dataset_name(), "splits": seeds });
    out.add(
        exp.out_dir.join("prep").join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("json") + "\n",
    );
    out.write()
}

/// Checks the architecture against the image size before any work starts.
fn check_arch(exp: &Experiment, split: &Split) -> Result<(), Failure> {
    let (Some(arch), Some(images)) = (&exp.arch, split.train.images()) else {
        return Ok(());
    };
    let report = validate_arch(arch, images.spatial())
        .map_err(|e| {
            anyhow!(
                "architecture `{}` on {:?} images: {e}",
                arch.name,
                images.spatial()
            )
        })
        .invalid()?;
    if !report.flattens_to_scalar {
        let (d1, d2) = report.final_dims;
        return Err(Failure::Validation(anyhow!(
            "architecture `{}` leaves {d1}x{d2} spatial dims on {:?} images; add pools or gpool",
            arch.name,
            images.spatial()
        )));
    }
    Ok(())
}

fn compose(
    exp: &Experiment,
    a: &Prepared,
    b: &Prepared,
    what: &str,
) -> Result<GramMatrix, Failure> {
    let (arch, ia, ib) = match (&exp.arch, a.images(), b.images()) {
        (Some(arch), Some(ia), Some(ib)) => (arch, ia, ib),
        _ => {
            return Err(Failure::Runtime(anyhow!(
                "compositional kernel without images"
            )))
        }
    };
    let opts = ComposeOptions {
        tile: exp.config.kernel.tile,
        threads: exp.config.kernel.threads,
        cache_dir: Some(
            exp.cache_dir
                .clone()
                .unwrap_or_else(|| exp.out_dir.join("cache")),
        ),
        max_new_tiles: None,
    };
    let (gram, stats) = compose_kernel(ia, ib, arch, &opts).map_err(|e| match e {
        EngineError::Validation { .. } | EngineError::DatasetMismatch(_) => {
            Failure::Validation(e.into())
        }
        other => Failure::Runtime(other.into()),
    })?;
    report_stats(what, &stats);
    Ok(gram)
}

fn report_stats(what: &str, s: &ComposeStats) {
    println!(
        "{what}: {} tiles, {} tiles cached, {} computed in {:.2}s",
        s.tiles,
        s.cached,
        s.computed,
        s.elapsed.as_secs_f64()
    );
}

fn flat_gram(choice: &KernelChoice, a: &Prepared, b: &Prepared) -> Result<GramMatrix, Failure> {
    let (ra, dim) = a.rows();
    let (rb, _) = b.rows();
    match choice {
        KernelChoice::Gaussian { gamma } => gaussian_gram(&ra, &rb, dim, *gamma).runtime(),
        _ => linear_gram(&ra, &rb, dim).runtime(),
    }
}

fn choice_json(exp: &Experiment, choice: &KernelChoice) -> serde_json::Value {
    match choice {
        KernelChoice::Compositional => json!({
            "type": "compositional",
            "arch": exp.arch.as_ref().map(|a| a.render()),
        }),
        KernelChoice::Linear => json!({ "type": "linear" }),
        KernelChoice::Gaussian { gamma } => json!({ "type": "gaussian", "gamma": gamma }),
    }
}

pub fn kernel(exp: &Experiment) -> Result<(), Failure> {
    let splits = splits(exp)?;
    for s in &splits {
        check_arch(exp, s)?;
    }
    let mut out = Outputs::default();
    for s in &splits {
        let choice = kernel_choice(exp, s).runtime()?;
        let start = Instant::now();
        let (train, test) = if choice == KernelChoice::Compositional {
            (
                compose(
                    exp,
                    &s.train,
                    &s.train,
                    &format!("seed {} train x train", s.seed),
                )?,
                compose(
                    exp,
                    &s.test,
                    &s.train,
                    &format!("seed {} test x train", s.seed),
                )?,
            )
        } else {
            (
                flat_gram(&choice, &s.train, &s.train)?,
                flat_gram(&choice, &s.test, &s.train)?,
            )
        };
        println!(
            "seed {}: {}x{} and {}x{} Gram matrices in {:.2}s",
            s.seed,
            train.rows(),
            train.cols(),
            test.rows(),
            test.cols(),
            start.elapsed().as_secs_f64()
        );
        let dir = exp.seed_dir(s.seed);
        out.add(
            dir.join("train.ckgm"),
            train.to_bytes(&kernel_key(exp, &choice, &s.train, &s.train)),
        );
        out.add(
            dir.join("test.ckgm"),
            test.to_bytes(&kernel_key(exp, &choice, &s.test, &s.train)),
        );
        out.add(
            dir.join("kernel.json"),
            serde_json::to_string_pretty(&choice_json(exp, &choice)).expect("json") + "\n",
        );
    }
    out.write()
}

fn read_gram(path: &Path, key: &[u8; 32]) -> Result<GramMatrix, Failure> {
    if !path.exists() {
        return Err(Failure::Validation(anyhow!(
            "{} is missing; run `compkernel kernel` first",
            path.display()
        )));
    }
    let (gram, stored) = GramMatrix::read(path)
        .map_err(|e| anyhow!("{}: {e}", path.display()))
        .runtime()?;
    if &stored != key {
        return Err(Failure::Validation(anyhow!(
            "{} was computed for different examples or a different kernel than this config describes",
            path.display()
        )));
    }
    Ok(gram)
}

struct Solved {
    seed: u64,
    model: RidgeModel,
    sweep: SweepReport,
    predicted: Vec<usize>,
    scores: nalgebra::DMatrix<f64>,
    truth: Vec<usize>,
    correct: usize,
}

fn solve_split(exp: &Experiment, s: &Split) -> Result<Solved, Failure> {
    let choice = kernel_choice(exp, s).runtime()?;
    let dir = exp.seed_dir(s.seed);
    let k_train = read_gram(
        &dir.join("train.ckgm"),
        &kernel_key(exp, &choice, &s.train, &s.train),
    )?;
    let k_test = read_gram(
        &dir.join("test.ckgm"),
        &kernel_key(exp, &choice, &s.test, &s.train),
    )?;
    let labels = s.train.labels();
    let classes = s.train.class_count();
    if k_train.rows() != labels.len() || k_test.rows() != s.test.len() {
        return Err(Failure::Validation(anyhow!(
            "Gram shapes {}x{} / {}x{} do not match {} training and {} test labels",
            k_train.rows(),
            k_train.cols(),
            k_test.rows(),
            k_test.cols(),
            labels.len(),
            s.test.len()
        )));
    }
    let solve = &exp.config.solve;
    let grid = solve.lambdas.clone().unwrap_or_else(default_lambda_grid);
    let validation = match solve.validation {
        ValidationKind::Loo => Validation::LeaveOneOut,
        ValidationKind::Folds => Validation::Folds(stratified_folds(
            labels,
            solve.folds.unwrap_or(DEFAULT_FOLDS),
            s.seed,
        )),
    };
    let sweep = lambda_sweep(&k_train, labels, classes, &validation, &grid).runtime()?;
    let y = one_hot(labels, classes);
    let model = match solve.tilt {
        Some(t) => tilted_fit(&k_train, &y, sweep.best_lambda, Some(t)),
        None => ridge_fit(&k_train, &y, sweep.best_lambda),
    }
    .runtime()?;
    let pred = predict(&model, &k_test).runtime()?;
    let truth = s.test.labels().to_vec();
    let correct = pred
        .labels
        .iter()
        .zip(&truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(Solved {
        seed: s.seed,
        model,
        sweep,
        predicted: pred.labels,
        scores: pred.scores,
        truth,
        correct,
    })
}

fn predictions_csv(s: &Solved) -> String {
    let classes = s.scores.ncols();
    let mut out = String::from("index,label,predicted");
    for c in 0..classes {
        let _ = write!(out, ",score_{c}");
    }
    out.push('\n');
    for (i, (&p, &t)) in s.predicted.iter().zip(&s.truth).enumerate() {
        let _ = write!(out, "{i},{t},{p}");
        for c in 0..classes {
            let _ = write!(out, ",{:.9e}", s.scores[(i, c)]);
        }
        out.push('\n');
    }
    out
}

fn sweep_csv(sweep: &SweepReport) -> String {
    let mut out = String::from("lambda,accuracy,error\n");
    for p in &sweep.points {
        let acc = p.accuracy.map_or(String::new(), |a| format!("{a:.6}"));
        let err = p.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
        let _ = writeln!(out, "{:e},{acc},{err}", p.lambda);
    }
    out
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

pub fn solve(exp: &Experiment) -> Result<(), Failure> {
    let splits = splits(exp)?;
    let solved = splits
        .iter()
        .map(|s| solve_split(exp, s))
        .collect::<Result<Vec<_>, _>>()?;
    let confidence = exp.config.solve.confidence.unwrap_or(DEFAULT_CONFIDENCE);
    let (dataset, classifier) = (exp.dataset_name(), exp.classifier_name());
    let mut out = Outputs::default();
    let mut results =
        String::from("dataset,classifier,seed,correct,n_eval,accuracy_pct,ci_lo_pct,ci_hi_pct\n");
    for s in &solved {
        let n = s.truth.len();
        let (lo, hi) = clopper_pearson(s.correct, n, confidence);
        let acc = s.correct as f64 / n as f64;
        println!(
            "seed {}: lambda {:e}, accuracy {}% [{}, {}] on {n} test examples",
            s.seed,
            s.model.lambda,
            pct(acc),
            pct(lo),
            pct(hi)
        );
        let _ = writeln!(
            results,
            "{dataset},{classifier},{},{},{n},{},{},{}",
            s.seed,
            s.correct,
            pct(acc),
            pct(lo),
            pct(hi)
        );
        let dir = exp.seed_dir(s.seed);
        out.add(dir.join("model.ckrm"), s.model.to_bytes());
        out.add(dir.join("predictions.csv"), predictions_csv(s));
        out.add(dir.join("sweep.csv"), sweep_csv(&s.sweep));
        let summary = json!({
            "seed": s.seed,
            "lambda": s.model.lambda,
            "tilt": s.model.tilt,
            "jitter": s.model.jitter,
            "validation_accuracy": s.sweep.best_accuracy,
            "correct": s.correct,
            "n_eval": n,
            "accuracy": acc,
            "confidence": confidence,
            "ci": [lo, hi],
        });
        out.add(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).expect("json") + "\n",
        );
    }
    out.add(exp.out_dir.join("results.csv"), results);
    out.write()
}

/// Reads result rows, pooling repeated (dataset, classifier) pairs.
fn read_results(inputs: &[PathBuf]) -> Result<Vec<DatasetResult>, Failure> {
    let mut pooled: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for path in inputs {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| anyhow!("{}: {e}", path.display()))
            .invalid()?;
        let headers = reader.headers().invalid()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| {
                Failure::Validation(anyhow!("{}: no `{name}` column", path.display()))
            })
        };
        let (cd, cc, ck, cn) = (
            col("dataset")?,
            col("classifier")?,
            col("correct")?,
            col("n_eval")?,
        );
        for (row, record) in reader.records().enumerate() {
            let record = record
                .map_err(|e| anyhow!("{}: {e}", path.display()))
                .invalid()?;
            let num = |i: usize| -> Result<usize, Failure> {
                record[i].trim().parse().map_err(|_| {
                    Failure::Validation(anyhow!(
                        "{}: row {}: `{}` is not a count",
                        path.display(),
                        row + 2,
                        &record[i]
                    ))
                })
            };
            let key = (record[cd].to_string(), record[cc].to_string());
            let (k, n) = (num(ck)?, num(cn)?);
            let entry = pooled.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (0, 0)
            });
            entry.0 += k;
            entry.1 += n;
        }
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let (correct, n_eval) = pooled[&key];
            DatasetResult {
                dataset: key.0,
                classifier: key.1,
                correct,
                n_eval,
            }
        })
        .collect())
}

pub fn eval(inputs: &[PathBuf], out_dir: &Path, confidence: f64) -> Result<(), Failure> {
    let inputs = if inputs.is_empty() {
        vec![out_dir.join("results.csv")]
    } else {
        inputs.to_vec()
    };
    let results = read_results(&inputs)?;
    let report = EvalReport::build(results, confidence).invalid()?;
    for s in &report.summaries {
        println!(
            "{}: Friedman rank {:.2}, accuracy {:.1}% +- {:.1}, P90 {:.1}, P95 {:.1}, PMA {:.1} +- {:.1}",
            s.classifier,
            s.friedman_rank,
            100.0 * s.avg_accuracy,
            100.0 * s.avg_accuracy_std,
            s.p90,
            s.p95,
            s.pma,
            s.pma_std
        );
    }
    let mut out = Outputs::default();
    out.add(out_dir.join("report.csv"), report.to_csv());
    out.add(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report.to_json()).expect("json") + "\n",
    );
    out.write()
}

pub fn verify(level: Level, engine: &EngineFn, seed: u64) -> Result<(), Failure> {
    let level = match level {
        Level::Quick => VerifyLevel::Quick,
        Level::Full => VerifyLevel::Full,
    };
    let reports = run_suite(level, engine, seed);
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}

//! Experiment configuration: a TOML file with `dataset`, `kernel`, `solve`
//! and `output` sections. Relative paths resolve against the file's
//! directory. Everything is checked up front so that a bad config fails
//! before any output exists.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use compkernel::arch::ArchSpec;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Mnist,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Standardize,
    Zca,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum LabelSpec {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory of batch/IDX files, or the training CSV.
    pub path: PathBuf,
    /// Test CSV (csv datasets only).
    pub test_path: Option<PathBuf>,
    pub name: Option<String>,
    /// Label column of a CSV: index or header name; default last column.
    pub label_column: Option<LabelSpec>,
    #[serde(default)]
    pub header: bool,
    #[serde(default)]
    pub preprocess: Vec<Step>,
    /// Zero-pad images to this spatial size.
    pub pad: Option<[usize; 2]>,
    pub zca_epsilon: Option<f64>,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub flip: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Compositional,
    Linear,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Gamma {
    Value(f64),
    Named(GammaRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaRule {
    Median,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(rename = "type", default)]
    pub kind: KernelKind,
    pub arch: Option<PathBuf>,
    pub gamma: Option<Gamma>,
    pub gamma_scale: Option<f64>,
    pub tile: Option<usize>,
    pub threads: Option<usize>,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationKind {
    #[default]
    Loo,
    Folds,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub validation: ValidationKind,
    pub folds: Option<usize>,
    /// Leave-one-out tilt; absent means a plain fit.
    pub tilt: Option<f64>,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub classifier: Option<String>,
}

pub const DEFAULT_OUT_DIR: &str = "out";
pub const DEFAULT_CONFIDENCE: f64 = 0.95;
pub const DEFAULT_FOLDS: usize = 4;

/// Flag and environment overrides, applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub threads: Option<usize>,
    pub tile: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// A parsed and checked config with its architecture loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: Config,
    pub arch: Option<ArchSpec>,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

impl Experiment {
    pub fn dataset_name(&self) -> String {
        self.config.dataset.name.clone().unwrap_or_else(|| {
            let stem = self.config.dataset.path.file_stem();
            stem.map_or("dataset".into(), |s| s.to_string_lossy().into_owned())
        })
    }

    pub fn classifier_name(&self) -> String {
        if let Some(name) = &self.config.output.classifier {
            return name.clone();
        }
        match (&self.arch, self.config.kernel.kind) {
            (Some(a), _) => a.name.clone(),
            (None, KernelKind::Linear) => "linear".into(),
            (None, _) => "gaussian".into(),
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed-{seed}"))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads, parses and validates `path`.
pub fn load(path: &Path, overrides: &Overrides) -> Result<Experiment> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut config: Config =
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));

    let ds = &mut config.dataset;
    ds.path = resolve(base, &ds.path);
    ds.test_path = ds.test_path.as_ref().map(|p| resolve(base, p));
    if let Some(seed) = overrides.seed {
        ds.seeds = vec![seed];
    }
    let kernel = &mut config.kernel;
    kernel.arch = kernel.arch.as_ref().map(|p| resolve(base, p));
    if overrides.tile.is_some() {
        kernel.tile = overrides.tile;
    }
    if overrides.threads.is_some() {
        kernel.threads = overrides.threads;
    }
    check(&config).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;

    let arch = match (&config.kernel.arch, config.kernel.kind) {
        (Some(p), KernelKind::Compositional) => {
            Some(ArchSpec::load(p).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?)
        }
        _ => None,
    };
    let env_dir = |var: &str| std::env::var_os(var).map(PathBuf::from);
    let out_dir = overrides
        .out_dir
        .clone()
        .or_else(|| env_dir("COMPKERNEL_OUT_DIR"))
        .or_else(|| config.output.dir.as_ref().map(|p| resolve(base, p)))
        .unwrap_or_else(|| base.join(DEFAULT_OUT_DIR));
    let cache_dir = overrides
        .cache_dir
        .clone()
        .or_else(|| env_dir("COMPKERNEL_CACHE_DIR"))
        .or_else(|| config.kernel.cache_dir.as_ref().map(|p| resolve(base, p)));
    Ok(Experiment {
        config,
        arch,
        out_dir,
        cache_dir,
    })
}

fn check(c: &Config) -> Result<()> {
    let ds = &c.dataset;
    let images = ds.kind != DatasetKind::Csv;
    if !ds.path.exists() {
        bail!("dataset.path {} does not exist", ds.path.display());
    }
    match (ds.kind, &ds.test_path) {
        (DatasetKind::Csv, None) => bail!("dataset.test_path is required for csv datasets"),
        (DatasetKind::Csv, Some(p)) if !p.exists() => {
            bail!("dataset.test_path {} does not exist", p.display())
        }
        (DatasetKind::Csv, Some(_)) => {}
        (_, Some(_)) => bail!("dataset.test_path only applies to csv datasets"),
        (_, None) => {}
    }
    if !images {
        if ds.pad.is_some() || ds.flip || ds.preprocess.contains(&Step::Zca) {
            bail!("pad, flip and zca need an image dataset");
        }
        if ds.train_size.is_some() || ds.test_size.is_some() {
            bail!("train_size and test_size need an image dataset");
        }
    } else if ds.label_column.is_some() || ds.header {
        bail!("label_column and header only apply to csv datasets");
    }
    if (ds.train_size.is_some() || ds.test_size.is_some()) && ds.seeds.is_empty() {
        bail!("dataset.seeds must be nonempty when subsampling");
    }
    if ds.seeds.is_empty() {
        bail!("dataset.seeds must be nonempty");
    }
    if matches!(ds.train_size, Some(0)) || matches!(ds.test_size, Some(0)) {
        bail!("subsample sizes must be positive");
    }
    if let Some(eps) = ds.zca_epsilon {
        if !(eps >= 0.0 && eps.is_finite()) {
            bail!("dataset.zca_epsilon must be a nonnegative number");
        }
    }
    if let Some([a, b]) = ds.pad {
        if a == 0 || b == 0 {
            bail!("dataset.pad must be positive");
        }
    }

    let k = &c.kernel;
    match k.kind {
        KernelKind::Compositional => {
            let Some(arch) = &k.arch else {
                bail!("kernel.arch is required for compositional kernels");
            };
            if !arch.exists() {
                bail!("kernel.arch {} does not exist", arch.display());
            }
            if !images {
                bail!("compositional kernels need an image dataset");
            }
            if k.gamma.is_some() || k.gamma_scale.is_some() {
                bail!("kernel.gamma only applies to gaussian kernels");
            }
        }
        KernelKind::Linear => {
            if k.arch.is_some() || k.gamma.is_some() || k.gamma_scale.is_some() {
                bail!("linear kernels take no arch or gamma");
            }
        }
        KernelKind::Gaussian => {
            if k.arch.is_some() {
                bail!("gaussian kernels take no arch");
            }
            if let Some(Gamma::Value(g)) = k.gamma {
                if !(g > 0.0 && g.is_finite()) {
                    bail!("kernel.gamma must be positive");
                }
            }
            if let Some(s) = k.gamma_scale {
                if !(s > 0.0 && s.is_finite()) {
                    bail!("kernel.gamma_scale must be positive");
                }
            }
        }
    }
    if matches!(k.tile, Some(0)) || matches!(k.threads, Some(0)) {
        bail!("tile and threads must be positive");
    }

    let s = &c.solve;
    if let Some(l) = &s.lambdas {
        if l.is_empty() {
            bail!("solve.lambdas must be nonempty");
        }
        if l.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            bail!("solve.lambdas must be finite and nonnegative");
        }
    }
    if let Some(t) = s.tilt {
        if !(0.0..1.0).contains(&t) {
            bail!("solve.tilt must lie in [0, 1)");
        }
    }
    if let Some(conf) = s.confidence {
        if !(conf > 0.0 && conf < 1.0) {
            bail!("solve.confidence must lie in (0, 1)");
        }
    }
    if matches!(s.folds, Some(f) if f < 2) {
        bail!("solve.folds must be at least 2");
    }
    if s.folds.is_some() && s.validation != ValidationKind::Folds {
        bail!("solve.folds needs validation = \"folds\"");
    }
    Ok(())
}

//! Turns a config and a trial seed into preprocessed train and test sets,
//! and fingerprints them so stored Gram matrices can be matched back.

use anyhow::{Context, Result};
use compkernel::data::{
    flip_augment, load_cifar10, load_csv_tabular, load_mnist_idx, pad_to, subsample_balanced,
    zca_apply, zca_fit, ChannelStats, CifarSplit, FeatureStats, ImageDataset, LabelColumn,
    TabularDataset,
};
use compkernel::engine::gram_key;
use compkernel::regression::median_heuristic;
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, DatasetKind, Experiment, Gamma, KernelKind, LabelSpec, Step};

#[derive(Debug, Clone)]
pub enum Prepared {
    Images(ImageDataset),
    Table(TabularDataset),
}

impl Prepared {
    pub fn len(&self) -> usize {
        match self {
            Prepared::Images(d) => d.len(),
            Prepared::Table(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &[usize] {
        match self {
            Prepared::Images(d) => d.labels(),
            Prepared::Table(d) => d.labels(),
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            Prepared::Images(d) => d.class_count(),
            Prepared::Table(d) => d.class_count(),
        }
    }

    /// Flattened feature rows and their dimension.
    pub fn rows(&self) -> (Vec<f64>, usize) {
        match self {
            Prepared::Images(d) => (d.to_rows(), d.feature_dim()),
            Prepared::Table(d) => (d.rows().to_vec(), d.dim()),
        }
    }

    pub fn provenance(&self) -> Vec<String> {
        match self {
            Prepared::Images(d) => d.provenance.clone(),
            Prepared::Table(_) => Vec::new(),
        }
    }

    pub fn content_hash(&self) -> [u8; 32] {
        match self {
            Prepared::Images(d) => d.content_hash(),
            Prepared::Table(d) => {
                let mut h = Sha256::new();
                h.update((d.len() as u64).to_le_bytes());
                h.update((d.dim() as u64).to_le_bytes());
                for &l in d.labels() {
                    h.update((l as u32).to_le_bytes());
                }
                for v in d.rows() {
                    h.update(v.to_le_bytes());
                }
                h.finalize().into()
            }
        }
    }

    pub fn images(&self) -> Option<&ImageDataset> {
        match self {
            Prepared::Images(d) => Some(d),
            Prepared::Table(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub seed: u64,
    pub train: Prepared,
    pub test: Prepared,
}

/// Full (unsubsampled) train and test sets as read from disk.
pub fn load_raw(ds: &DatasetConfig) -> Result<(Prepared, Prepared)> {
    Ok(match ds.kind {
        DatasetKind::Cifar10 => (
            Prepared::Images(load_cifar10(&ds.path, CifarSplit::Train)?),
            Prepared::Images(load_cifar10(&ds.path, CifarSplit::Test)?),
        ),
        DatasetKind::Mnist => {
            let f = |name: &str| ds.path.join(name);
            (
                Prepared::Images(load_mnist_idx(
                    &f("train-images-idx3-ubyte"),
                    &f("train-labels-idx1-ubyte"),
                )?),
                Prepared::Images(load_mnist_idx(
                    &f("t10k-images-idx3-ubyte"),
                    &f("t10k-labels-idx1-ubyte"),
                )?),
            )
        }
        DatasetKind::Csv => {
            let column = match &ds.label_column {
                None => LabelColumn::Last,
                Some(LabelSpec::Index(i)) => LabelColumn::Index(*i),
                Some(LabelSpec::Name(n)) => LabelColumn::Name(n.clone()),
            };
            let test_path = ds
                .test_path
                .as_ref()
                .context("csv dataset without test_path")?;
            let train = load_csv_tabular(&ds.path, &column, ds.header)?;
            let test = load_csv_tabular(test_path, &column, ds.header)?;
            if test.class_names() != train.class_names() {
                // Labels are numbered by first appearance, so both files must
                // introduce the classes in the same order.
                anyhow::bail!(
                    "train and test CSVs list classes differently ({:?} vs {:?})",
                    train.class_names(),
                    test.class_names()
                );
            }
            (Prepared::Table(train), Prepared::Table(test))
        }
    })
}

/// Subsampling, padding, flips and fitted preprocessing for one seed.
pub fn prepare(ds: &DatasetConfig, raw: &(Prepared, Prepared), seed: u64) -> Result<Split> {
    let (train, test) = match raw {
        (Prepared::Images(tr), Prepared::Images(te)) => {
            let (tr, te) = prepare_images(ds, tr, te, seed)?;
            (Prepared::Images(tr), Prepared::Images(te))
        }
        (Prepared::Table(tr), Prepared::Table(te)) => {
            let (mut tr, mut te) = (tr.clone(), te.clone());
            if ds.preprocess.contains(&Step::Standardize) {
                let stats = FeatureStats::fit(&tr);
                tr = stats.apply(&tr);
                te = stats.apply(&te);
            }
            (Prepared::Table(tr), Prepared::Table(te))
        }
        _ => anyhow::bail!("train and test sets have different kinds"),
    };
    Ok(Split { seed, train, test })
}

fn prepare_images(
    ds: &DatasetConfig,
    train: &ImageDataset,
    test: &ImageDataset,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    let mut tr = match ds.train_size {
        Some(n) => subsample_balanced(train, n, seed).context("training subsample")?,
        None => train.clone(),
    };
    let mut te = match ds.test_size {
        Some(n) => subsample_balanced(test, n, seed).context("test subsample")?,
        None => test.clone(),
    };
    if let Some([a, b]) = ds.pad {
        tr = pad_to(&tr, (a, b))?;
        te = pad_to(&te, (a, b))?;
    }
    if ds.flip {
        tr = flip_augment(&tr);
    }
    for step in &ds.preprocess {
        match step {
            Step::Standardize => {
                let stats = ChannelStats::fit(&tr);
                tr = stats.apply(&tr);
                te = stats.apply(&te);
            }
            Step::Zca => {
                let t = zca_fit(&tr, ds.zca_epsilon)?;
                tr = zca_apply(&t, &tr)?;
                te = zca_apply(&t, &te)?;
            }
        }
    }
    Ok((tr, te))
}

/// Resolved kernel for one split; the bandwidth may depend on the data.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelChoice {
    Compositional,
    Linear,
    Gaussian { gamma: f64 },
}

pub fn kernel_choice(exp: &Experiment, split: &Split) -> Result<KernelChoice> {
    Ok(match exp.config.kernel.kind {
        KernelKind::Compositional => KernelChoice::Compositional,
        KernelKind::Linear => KernelChoice::Linear,
        KernelKind::Gaussian => {
            let scale = exp.config.kernel.gamma_scale.unwrap_or(1.0);
            let base = match exp.config.kernel.gamma {
                Some(Gamma::Value(g)) => g,
                Some(Gamma::Named(_)) | None => {
                    let (rows, dim) = split.train.rows();
                    median_heuristic(&rows, dim)?
                }
            };
            KernelChoice::Gaussian {
                gamma: base * scale,
            }
        }
    })
}

/// Fingerprint of (kernel, row set, column set) stored with every Gram file.
pub fn kernel_key(exp: &Experiment, choice: &KernelChoice, a: &Prepared, b: &Prepared) -> [u8; 32] {
    if let (KernelChoice::Compositional, Some(arch), Some(ia), Some(ib)) =
        (choice, &exp.arch, a.images(), b.images())
    {
        return gram_key(ia, ib, arch);
    }
    let mut h = Sha256::new();
    match choice {
        KernelChoice::Gaussian { gamma } => {
            h.update(b"gaussian");
            h.update(gamma.to_le_bytes());
        }
        _ => h.update(b"linear"),
    }
    h.update(a.content_hash());
    h.update(b.content_hash());
    h.finalize().into()
}

//! Image and tabular datasets, their loaders and preprocessing.

mod load;
mod preprocess;

use std::ops::Range;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kernel::ImageBatch;

pub use load::{
    load_cifar10, load_cifar10_file, load_csv_tabular, load_mnist_idx, CifarSplit, LabelColumn,
};
pub use preprocess::{
    flip_augment, pad_to, standardize, standardize_tabular, subsample_balanced, zca_apply, zca_fit,
    ChannelStats, FeatureStats, ZcaTransform,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad header: {message}")]
    BadHeader { path: String, message: String },
    #[error("{path}: truncated record {record} ({got} of {want} bytes)")]
    Truncated {
        path: String,
        record: usize,
        got: usize,
        want: usize,
    },
    #[error("image and label files disagree: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: row {row}: {message}")]
    Csv {
        path: String,
        row: usize,
        message: String,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("cannot draw {wanted} examples of class {class}: only {available} available")]
    InsufficientClass {
        class: usize,
        wanted: usize,
        available: usize,
    },
    #[error("subsample size {n} is not divisible by {classes} classes")]
    Indivisible { n: usize, classes: usize },
    #[error("target {target:?} is smaller than current spatial dims {current:?}")]
    PadTooSmall {
        target: (usize, usize),
        current: (usize, usize),
    },
    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
}

/// `N x D1 x D2 x C` images with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pixels: Vec<f32>,
    len: usize,
    spatial: (usize, usize),
    channels: usize,
    labels: Vec<usize>,
    class_count: usize,
    /// Source followed by every preprocessing step applied so far.
    pub provenance: Vec<String>,
}

impl ImageDataset {
    pub fn new(
        pixels: Vec<f32>,
        spatial: (usize, usize),
        channels: usize,
        labels: Vec<usize>,
        class_count: usize,
        source: impl Into<String>,
    ) -> Result<Self, DataError> {
        let per_image = spatial.0 * spatial.1 * channels;
        if per_image == 0 {
            return Err(DataError::Invalid("empty image shape".into()));
        }
        if pixels.len() != labels.len() * per_image {
            return Err(DataError::Invalid(format!(
                "{} pixel values for {} images of {}x{}x{}",
                pixels.len(),
                labels.len(),
                spatial.0,
                spatial.1,
                channels
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite pixel value".into()));
        }
        Ok(Self {
            len: labels.len(),
            pixels,
            spatial,
            channels,
            labels,
            class_count,
            provenance: vec![source.into()],
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.spatial
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Values per image (`D1 * D2 * C`).
    pub fn feature_dim(&self) -> usize {
        self.spatial.0 * self.spatial.1 * self.channels
    }

    pub fn image(&self, idx: usize) -> &[f32] {
        let d = self.feature_dim();
        &self.pixels[idx * d..(idx + 1) * d]
    }

    /// Borrowed view of a contiguous image range for the kernel operators.
    pub fn batch(&self, range: Range<usize>) -> ImageBatch<'_> {
        let d = self.feature_dim();
        ImageBatch {
            pixels: &self.pixels[range.start * d..range.end * d],
            start: range.start,
            len: range.len(),
            spatial: self.spatial,
            channels: self.channels,
        }
    }

    /// Images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageDataset {
        let d = self.feature_dim();
        let mut pixels = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageDataset {
            pixels,
            len: indices.len(),
            spatial: self.spatial,
            channels: self.channels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            provenance: self.provenance.clone(),
        }
    }

    /// Same metadata, new pixel values (used by the preprocessing steps).
    pub(crate) fn with_pixels(
        &self,
        pixels: Vec<f32>,
        spatial: (usize, usize),
        step: String,
    ) -> ImageDataset {
        let mut provenance = self.provenance.clone();
        provenance.push(step);
        ImageDataset {
            len: pixels.len() / (spatial.0 * spatial.1 * self.channels),
            pixels,
            spatial,
            channels: self.channels,
            labels: self.labels.clone(),
            class_count: self.class_count,
            provenance,
        }
    }

    /// SHA-256 over shape, labels and pixel bits.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for v in [self.len, self.spatial.0, self.spatial.1, self.channels] {
            hasher.update((v as u64).to_le_bytes());
        }
        for &l in &self.labels {
            hasher.update((l as u32).to_le_bytes());
        }
        for v in &self.pixels {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Flattened images as an `N x d` row-major `f64` matrix.
    pub fn to_rows(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }
}

/// Rows of real-valued features with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    rows: Vec<f64>,
    len: usize,
    dim: usize,
    labels: Vec<usize>,
    class_names: Vec<String>,
    folds: Option<Vec<usize>>,
}

impl TabularDataset {
    pub fn new(
        rows: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if rows.len() != labels.len() * dim {
            return Err(DataError::Invalid(format!(
                "{} values for {} rows of dimension {dim}",
                rows.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DataError::Invalid(format!("label {bad} has no class name")));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("missing or non-finite feature".into()));
        }
        Ok(Self {
            len: labels.len(),
            rows,
            dim,
            labels,
            class_names,
            folds: None,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.rows[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn folds(&self) -> Option<&[usize]> {
        self.folds.as_deref()
    }

    /// Attaches fold ids; every id in `0..max+1` must be used.
    pub fn with_folds(mut self, folds: Vec<usize>) -> Result<Self, DataError> {
        if folds.len() != self.len {
            return Err(DataError::Invalid(format!(
                "{} fold ids for {} rows",
                folds.len(),
                self.len
            )));
        }
        let k = folds.iter().max().map_or(0, |m| m + 1);
        for f in 0..k {
            if !folds.contains(&f) {
                return Err(DataError::Invalid(format!("fold {f} is empty")));
            }
        }
        self.folds = Some(folds);
        Ok(self)
    }

    pub fn select(&self, indices: &[usize]) -> TabularDataset {
        let mut rows = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            rows.extend_from_slice(self.row(i));
        }
        TabularDataset {
            rows,
            len: indices.len(),
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            folds: self
                .folds
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i]).collect()),
        }
    }

    pub(crate) fn with_rows(&self, rows: Vec<f64>) -> TabularDataset {
        TabularDataset {
            rows,
            ..self.clone()
        }
    }
}

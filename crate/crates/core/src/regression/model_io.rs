//! `CKRM` model files: magic, format version, lambda, tilt, `N`, classes,
//! `alpha` (row-major f64), then training ids and training labels (u32 each)
//! and a trailing CRC32.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::{argmax_rows, one_hot, RidgeModel};
use crate::binio::{self, FormatError, Reader, Writer, FORMAT_VERSION};

pub const MODEL_MAGIC: &[u8; 4] = b"CKRM";

impl RidgeModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, c) = self.alpha.shape();
        let mut w = Writer::new(MODEL_MAGIC);
        w.u32(FORMAT_VERSION)
            .f64(self.lambda)
            .f64(self.tilt)
            .u32(n as u32)
            .u32(c as u32);
        let row_major: Vec<f64> = (0..n)
            .flat_map(|r| (0..c).map(move |col| (r, col)))
            .map(|ix| self.alpha[ix])
            .collect();
        w.f64_slice(&row_major);
        for &id in &self.train_ids {
            w.u32(id as u32);
        }
        for l in argmax_rows(&self.labels) {
            w.u32(l as u32);
        }
        w.f64(self.jitter);
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::open(data, MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version(version));
        }
        let lambda = r.f64()?;
        let tilt = r.f64()?;
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        let alpha = DMatrix::from_row_slice(n, c, &r.f64_vec(n * c)?);
        let train_ids = r.u32_vec(n)?.into_iter().map(|v| v as usize).collect();
        let labels: Vec<usize> = r.u32_vec(n)?.into_iter().map(|v| v as usize).collect();
        if labels.iter().any(|&l| l >= c) {
            return Err(FormatError::Malformed("label out of class range".into()));
        }
        let jitter = r.f64()?;
        r.expect_end()?;
        Ok(Self {
            alpha,
            lambda,
            tilt,
            tilted: tilt != 0.0,
            jitter,
            labels: one_hot(&labels, c),
            train_ids,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        Ok(binio::write_atomic(path, &self.to_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

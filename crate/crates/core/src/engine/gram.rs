use std::path::Path;

use nalgebra::DMatrix;

use crate::binio::{self, FormatError, Reader, Writer, DTYPE_F64, FORMAT_VERSION};

pub const GRAM_MAGIC: &[u8; 4] = b"CKGM";

/// Dense matrix of final kernel values. Rows index query examples, columns
/// index reference examples.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: Vec<f64>,
    pub row_ids: Vec<usize>,
    pub col_ids: Vec<usize>,
    pub symmetric: bool,
}

impl GramMatrix {
    pub fn new(
        values: Vec<f64>,
        row_ids: Vec<usize>,
        col_ids: Vec<usize>,
        symmetric: bool,
    ) -> Result<Self, FormatError> {
        if values.len() != row_ids.len() * col_ids.len() {
            return Err(FormatError::Malformed(format!(
                "{} values for a {}x{} matrix",
                values.len(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        if symmetric && row_ids != col_ids {
            return Err(FormatError::Malformed(
                "symmetric matrix with different row and column ids".into(),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(FormatError::Malformed(format!("non-finite entry {bad}")));
        }
        Ok(Self {
            values,
            row_ids,
            col_ids,
            symmetric,
        })
    }

    pub fn from_dmatrix(m: &DMatrix<f64>, symmetric: bool) -> Result<Self, FormatError> {
        let mut values = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            values.extend(m.row(r).iter().copied());
        }
        Self::new(
            values,
            (0..m.nrows()).collect(),
            (0..m.ncols()).collect(),
            symmetric,
        )
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols()..(r + 1) * self.cols()]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows(), self.cols(), &self.values)
    }

    /// Largest `|K - K^T|` entry, relative to the largest `|K|` entry.
    pub fn asymmetry(&self) -> f64 {
        if self.rows() != self.cols() {
            return f64::INFINITY;
        }
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let n = self.rows();
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in r + 1..n {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        if scale > 0.0 {
            worst / scale
        } else {
            worst
        }
    }

    /// Sub-matrix at the given row and column positions.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> GramMatrix {
        let mut values = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            let row = self.row(r);
            values.extend(cols.iter().map(|&c| row[c]));
        }
        GramMatrix {
            values,
            row_ids: rows.iter().map(|&r| self.row_ids[r]).collect(),
            col_ids: cols.iter().map(|&c| self.col_ids[c]).collect(),
            symmetric: self.symmetric && rows == cols,
        }
    }

    /// `CKGM` record: version, 32-byte key, dims, symmetric flag, dtype,
    /// row ids, column ids, row-major `f64` payload, CRC32.
    pub fn to_bytes(&self, key: &[u8; 32]) -> Vec<u8> {
        let mut w = Writer::new(GRAM_MAGIC);
        w.u32(FORMAT_VERSION)
            .bytes(key)
            .u32(self.rows() as u32)
            .u32(self.cols() as u32)
            .u8(self.symmetric as u8)
            .u8(DTYPE_F64);
        for &id in self.row_ids.iter().chain(&self.col_ids) {
            w.u32(id as u32);
        }
        w.f64_slice(&self.values);
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<(Self, [u8; 32]), FormatError> {
        let mut r = Reader::open(data, GRAM_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version(version));
        }
        let key = r.array::<32>()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let symmetric = r.u8()? != 0;
        let dtype = r.u8()?;
        let row_ids = r.u32_vec(rows)?.into_iter().map(|v| v as usize).collect();
        let col_ids = r.u32_vec(cols)?.into_iter().map(|v| v as usize).collect();
        let values = match dtype {
            DTYPE_F64 => r.f64_vec(rows * cols)?,
            binio::DTYPE_F32 => r
                .f32_vec(rows * cols)?
                .into_iter()
                .map(|v| v as f64)
                .collect(),
            other => return Err(FormatError::Malformed(format!("dtype tag {other}"))),
        };
        r.expect_end()?;
        Ok((Self::new(values, row_ids, col_ids, symmetric)?, key))
    }

    pub fn write(&self, path: &Path, key: &[u8; 32]) -> Result<(), FormatError> {
        Ok(binio::write_atomic(path, &self.to_bytes(key))?)
    }

    pub fn read(path: &Path) -> Result<(Self, [u8; 32]), FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

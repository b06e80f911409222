//! Little-endian record framing shared by the tile cache, Gram and model files.
//!
//! Every file is `magic (4 bytes) | body | crc32 (u32 LE)`, where the CRC covers
//! magic and body.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("checksum mismatch")]
    Checksum,
    #[error("truncated record: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const FORMAT_VERSION: u32 = 1;

pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn f32_slice(&mut self, v: &[f32]) -> &mut Self {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn f64_slice(&mut self, v: &[f64]) -> &mut Self {
        self.buf.reserve(v.len() * 8);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    /// Appends the CRC and returns the finished record.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

/// Cursor over a record whose CRC has already been verified.
pub struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and trailing CRC; the cursor starts right after the magic.
    pub fn open(data: &'a [u8], magic: &[u8; 4]) -> Result<Self, FormatError> {
        if data.len() < 8 {
            return Err(FormatError::Truncated {
                needed: 8 - data.len(),
            });
        }
        let found: [u8; 4] = data[..4].try_into().unwrap();
        if &found != magic {
            return Err(FormatError::BadMagic {
                expected: *magic,
                found,
            });
        }
        let (body, crc) = data.split_at(data.len() - 4);
        let crc = u32::from_le_bytes(crc.try_into().unwrap());
        if crc32fast::hash(body) != crc {
            return Err(FormatError::Checksum);
        }
        Ok(Self { body, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.body.len() {
            return Err(FormatError::Truncated {
                needed: end - self.body.len(),
            });
        }
        let out = &self.body[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u32_vec(&mut self, n: usize) -> Result<Vec<u32>, FormatError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn expect_end(&self) -> Result<(), FormatError> {
        if self.pos == self.body.len() {
            Ok(())
        } else {
            Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.body.len() - self.pos
            )))
        }
    }
}

/// Writes `data` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, data: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let mut w = Writer::new(b"TEST");
        w.u32(7).f64(1.5).u8(3).f32_slice(&[1.0, -2.0]);
        let data = w.finish();
        let mut r = Reader::open(&data, b"TEST").unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f64().unwrap(), 1.5);
        assert_eq!(r.u8().unwrap(), 3);
        assert_eq!(r.f32_vec(2).unwrap(), vec![1.0, -2.0]);
        r.expect_end().unwrap();
    }

    #[test]
    fn detects_corruption_and_wrong_magic() {
        let mut w = Writer::new(b"TEST");
        w.u32(42);
        let mut data = w.finish();
        assert!(matches!(
            Reader::open(&data, b"NOPE"),
            Err(FormatError::BadMagic { .. })
        ));
        data[5] ^= 0x10;
        assert!(matches!(
            Reader::open(&data, b"TEST"),
            Err(FormatError::Checksum)
        ));
        assert!(matches!(
            Reader::open(&data[..3], b"TEST"),
            Err(FormatError::Truncated { .. })
        ));
    }
}

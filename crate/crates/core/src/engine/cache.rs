//! On-disk cache of finished tiles.
//!
//! One `CKTL` file per tile: magic, format version (u32), 32-byte key,
//! tile coordinates `a_start, a_end, b_start, b_end` (4 x u32), dtype tag,
//! row-major payload and a trailing CRC32. Files are written to a temp name
//! and renamed into place.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::arch::ArchSpec;
use crate::binio::{self, FormatError, Reader, Writer, DTYPE_F32, DTYPE_F64, FORMAT_VERSION};
use crate::kernel::KernelBlock;

pub const TILE_MAGIC: &[u8; 4] = b"CKTL";

/// Content key of a kernel computation: architecture text, both datasets and
/// storage precision.
pub fn cache_key(arch: &ArchSpec, hash_a: &[u8; 32], hash_b: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"compkernel-tile\0");
    h.update(arch.render().as_bytes());
    h.update(b"\0");
    h.update(hash_a);
    h.update(hash_b);
    h.update(b"f32");
    h.finalize().into()
}

#[derive(Debug, Clone)]
pub struct TileCache {
    dir: PathBuf,
    key: [u8; 32],
}

/// Outcome of a cache lookup.
#[derive(Debug)]
pub enum CacheLookup {
    Hit(KernelBlock),
    Miss,
    /// File existed but failed validation; treated as a miss.
    Corrupt(FormatError),
}

impl TileCache {
    pub fn new(root: &Path, key: [u8; 32]) -> Self {
        Self {
            dir: root.join(hex::encode(&key[..8])),
            key,
        }
    }

    pub fn key(&self) -> &[u8; 32] {
        &self.key
    }

    pub fn path(&self, batch_a: &Range<usize>, batch_b: &Range<usize>) -> PathBuf {
        self.dir.join(format!(
            "tile_{}_{}_{}_{}.cktl",
            batch_a.start, batch_a.end, batch_b.start, batch_b.end
        ))
    }

    /// Persists a finished (1x1 spatial) tile.
    pub fn put(&self, block: &KernelBlock) -> Result<(), FormatError> {
        let bytes = encode_tile(&self.key, block);
        binio::write_atomic(&self.path(&block.batch_a(), &block.batch_b()), &bytes)?;
        Ok(())
    }

    pub fn get(&self, batch_a: &Range<usize>, batch_b: &Range<usize>, stage: usize) -> CacheLookup {
        let path = self.path(batch_a, batch_b);
        let data = match fs::read(&path) {
            Ok(d) => d,
            Err(_) => return CacheLookup::Miss,
        };
        match decode_tile(&data, &self.key, batch_a, batch_b, stage) {
            Ok(block) => CacheLookup::Hit(block),
            Err(e) => CacheLookup::Corrupt(e),
        }
    }
}

pub fn encode_tile(key: &[u8; 32], block: &KernelBlock) -> Vec<u8> {
    let (a, b) = (block.batch_a(), block.batch_b());
    let mut w = Writer::new(TILE_MAGIC);
    w.u32(FORMAT_VERSION)
        .bytes(key)
        .u32(a.start as u32)
        .u32(a.end as u32)
        .u32(b.start as u32)
        .u32(b.end as u32)
        .u8(DTYPE_F32)
        .f32_slice(block.values());
    w.finish()
}

pub fn decode_tile(
    data: &[u8],
    key: &[u8; 32],
    batch_a: &Range<usize>,
    batch_b: &Range<usize>,
    stage: usize,
) -> Result<KernelBlock, FormatError> {
    let mut r = Reader::open(data, TILE_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    if &r.array::<32>()? != key {
        return Err(FormatError::Malformed(
            "tile belongs to another computation".into(),
        ));
    }
    let coords = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
    if coords != [batch_a.start, batch_a.end, batch_b.start, batch_b.end] {
        return Err(FormatError::Malformed(format!(
            "tile coordinates {coords:?}"
        )));
    }
    let n = batch_a.len() * batch_b.len();
    let values = match r.u8()? {
        DTYPE_F32 => r.f32_vec(n)?,
        DTYPE_F64 => r.f64_vec(n)?.into_iter().map(|v| v as f32).collect(),
        other => return Err(FormatError::Malformed(format!("dtype tag {other}"))),
    };
    r.expect_end()?;
    KernelBlock::from_values(values, batch_a.clone(), batch_b.clone(), (1, 1), stage)
        .map_err(|e| FormatError::Malformed(e.to_string()))
}

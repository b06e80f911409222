//! Drives an architecture over every required pair of image batches and
//! assembles the final Gram matrix.
//!
//! Tiles span the full spatial extent and are split only over images. Each
//! tile runs the whole layer list on a single thread; tiles run concurrently
//! on a dedicated pool and the assembler is the only writer into the result.

mod cache;
mod gram;
mod schedule;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::arch::{validate_arch, ArchError, ArchSpec};
use crate::binio::FormatError;
use crate::data::ImageDataset;
use crate::kernel::{self, DiagCache, KernelBlock, KernelError};

pub use cache::{cache_key, decode_tile, encode_tile, CacheLookup, TileCache, TILE_MAGIC};
pub use gram::{GramMatrix, GRAM_MAGIC};
pub use schedule::{schedule_tiles, JobStatus, TileJob};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("architecture `{arch}` rejected for {d1}x{d2} images: {source}")]
    Validation {
        arch: String,
        d1: usize,
        d2: usize,
        #[source]
        source: ArchError,
    },
    #[error("datasets disagree: {0}")]
    DatasetMismatch(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("cache: {0}")]
    Cache(#[from] FormatError),
    #[error("stopped after {completed} of {total} tiles")]
    Interrupted { completed: usize, total: usize },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Memory budget for one tile's kernel block.
pub const TILE_BUDGET_BYTES: usize = 256 << 20;

/// Largest square tile whose `f32` block fits [`TILE_BUDGET_BYTES`]
/// (8 at 32x32 images), capped at 64.
pub fn default_tile(spatial: (usize, usize)) -> usize {
    let pair_bytes = (spatial.0 * spatial.1).pow(2) * std::mem::size_of::<f32>();
    let per_side = ((TILE_BUDGET_BYTES / pair_bytes.max(1)) as f64).sqrt() as usize;
    per_side.clamp(1, 64)
}

#[derive(Debug, Clone, Default)]
pub struct ComposeOptions {
    /// Images per tile side; `None` picks [`default_tile`].
    pub tile: Option<usize>,
    /// Worker threads; `None` uses the available parallelism.
    pub threads: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    /// Stop with [`EngineError::Interrupted`] after computing this many tiles.
    pub max_new_tiles: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposeStats {
    pub tiles: usize,
    pub cached: usize,
    pub computed: usize,
    pub elapsed: Duration,
}

/// Per-layer norm caches of a whole dataset (`Some` at embedding layers).
#[derive(Debug, Clone)]
pub struct StageNorms {
    caches: Vec<Option<DiagCache>>,
}

impl StageNorms {
    /// Runs every image against itself through the layer list, recording
    /// `sqrt(diag)` at each embedding layer.
    pub fn compute(ds: &ImageDataset, arch: &ArchSpec) -> Result<Self, EngineError> {
        let per_image: Vec<Vec<Option<DiagCache>>> = (0..ds.len())
            .into_par_iter()
            .map(|i| self_pipeline(ds, i, arch))
            .collect::<Result<_, _>>()?;
        let mut caches = Vec::with_capacity(arch.layers.len());
        for (idx, layer) in arch.layers.iter().enumerate() {
            if layer.is_embedding() {
                let parts: Vec<DiagCache> = per_image
                    .iter()
                    .map(|stages| stages[idx].clone().expect("embedding stage norms"))
                    .collect();
                caches.push(if parts.is_empty() {
                    None
                } else {
                    Some(DiagCache::concat(&parts)?)
                });
            } else {
                caches.push(None);
            }
        }
        Ok(Self { caches })
    }

    pub fn at(&self, layer: usize) -> Option<&DiagCache> {
        self.caches.get(layer).and_then(|c| c.as_ref())
    }
}

fn self_pipeline(
    ds: &ImageDataset,
    image: usize,
    arch: &ArchSpec,
) -> Result<Vec<Option<DiagCache>>, EngineError> {
    let batch = ds.batch(image..image + 1);
    let mut block = kernel::input_kernel(&batch, &batch)?;
    let mut out = Vec::with_capacity(arch.layers.len());
    for layer in &arch.layers {
        if layer.is_embedding() {
            let cache = kernel::update_diag(&block)?;
            block = kernel::apply_layer(&block, layer, Some((&cache, &cache)))?;
            out.push(Some(cache));
        } else {
            block = kernel::apply_layer(&block, layer, None)?;
            out.push(None);
        }
    }
    Ok(out)
}

/// Runs the full layer list on one tile.
pub fn run_tile(
    a: &ImageDataset,
    b: &ImageDataset,
    arch: &ArchSpec,
    norms_a: &StageNorms,
    norms_b: &StageNorms,
    job: &TileJob,
) -> Result<KernelBlock, EngineError> {
    let mut block =
        kernel::input_kernel(&a.batch(job.batch_a.clone()), &b.batch(job.batch_b.clone()))?;
    for (idx, layer) in arch.layers.iter().enumerate() {
        let diags = match (norms_a.at(idx), norms_b.at(idx)) {
            (Some(x), Some(y)) => Some((x, y)),
            _ => None,
        };
        block = kernel::apply_layer(&block, layer, diags)?;
    }
    Ok(block)
}

fn check_arch(ds: &ImageDataset, arch: &ArchSpec) -> Result<(), EngineError> {
    let spatial = ds.spatial();
    let invalid = |source| EngineError::Validation {
        arch: arch.name.clone(),
        d1: spatial.0,
        d2: spatial.1,
        source,
    };
    let report = validate_arch(arch, spatial).map_err(invalid)?;
    if !report.flattens_to_scalar {
        return Err(invalid(ArchError::NotScalar {
            d1: report.final_dims.0,
            d2: report.final_dims.1,
        }));
    }
    Ok(())
}

/// Compositional kernel between every image of `a` (rows) and `b` (columns).
///
/// When `a` and `b` hold identical content only the upper block triangle is
/// computed and the result is mirrored and marked symmetric.
pub fn compose_kernel(
    a: &ImageDataset,
    b: &ImageDataset,
    arch: &ArchSpec,
    opts: &ComposeOptions,
) -> Result<(GramMatrix, ComposeStats), EngineError> {
    let start = Instant::now();
    if a.spatial() != b.spatial() || a.channels() != b.channels() {
        return Err(EngineError::DatasetMismatch(format!(
            "{:?}x{} vs {:?}x{}",
            a.spatial(),
            a.channels(),
            b.spatial(),
            b.channels()
        )));
    }
    check_arch(a, arch)?;
    let hash_a = a.content_hash();
    let hash_b = b.content_hash();
    let symmetric = hash_a == hash_b;
    let key = cache_key(arch, &hash_a, &hash_b);
    let cache = opts.cache_dir.as_ref().map(|dir| TileCache::new(dir, key));
    let tile = opts
        .tile
        .unwrap_or_else(|| default_tile(a.spatial()))
        .max(1);
    let mut jobs = schedule_tiles(a.len(), b.len(), tile, symmetric);
    let total = jobs.len();
    let final_stage = arch.layers.len();

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = opts.threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| EngineError::ThreadPool(e.to_string()))?;

    let computed = AtomicUsize::new(0);
    let cached = AtomicUsize::new(0);
    let results: Vec<Result<KernelBlock, EngineError>> = pool.install(|| {
        // Norms are only needed when some tile misses the cache.
        let lookups: Vec<Option<KernelBlock>> = jobs
            .par_iter()
            .map(|job| match &cache {
                Some(c) => match c.get(&job.batch_a, &job.batch_b, final_stage) {
                    CacheLookup::Hit(block) => Some(block),
                    CacheLookup::Miss => None,
                    CacheLookup::Corrupt(e) => {
                        log::warn!(
                            "cached tile {:?}x{:?} is invalid ({e}); recomputing",
                            job.batch_a,
                            job.batch_b
                        );
                        None
                    }
                },
                None => None,
            })
            .collect();
        let need_norms = lookups.iter().any(Option::is_none);
        let norms = if need_norms {
            let na = StageNorms::compute(a, arch)?;
            let nb = if symmetric {
                na.clone()
            } else {
                StageNorms::compute(b, arch)?
            };
            Some((na, nb))
        } else {
            None
        };
        Ok::<_, EngineError>(
            jobs.par_iter()
                .zip(lookups)
                .map(|(job, hit)| {
                    if let Some(block) = hit {
                        cached.fetch_add(1, Ordering::Relaxed);
                        return Ok(block);
                    }
                    let done = computed.fetch_add(1, Ordering::Relaxed);
                    if opts.max_new_tiles.is_some_and(|limit| done >= limit) {
                        computed.fetch_sub(1, Ordering::Relaxed);
                        return Err(EngineError::Interrupted {
                            completed: 0,
                            total,
                        });
                    }
                    let (na, nb) = norms.as_ref().expect("norms computed on cache miss");
                    let block = run_tile(a, b, arch, na, nb, job)?;
                    if let Some(c) = &cache {
                        c.put(&block)?;
                    }
                    log::debug!("tile {:?}x{:?} done", job.batch_a, job.batch_b);
                    Ok(block)
                })
                .collect(),
        )
    })?;

    let cached = cached.into_inner();
    let computed = computed.into_inner();
    let mut values = vec![0.0f64; a.len() * b.len()];
    let cols = b.len();
    let mut failed = false;
    for (job, result) in jobs.iter_mut().zip(results) {
        let block = match result {
            Ok(block) => block,
            Err(EngineError::Interrupted { .. }) => {
                job.status = JobStatus::Failed;
                failed = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        job.status = JobStatus::Done;
        let scalars = block.scalars().expect("final stage is 1x1");
        let bc = job.batch_b.len();
        for (li, ia) in job.batch_a.clone().enumerate() {
            for (lj, ib) in job.batch_b.clone().enumerate() {
                let v = scalars[li * bc + lj] as f64;
                if symmetric {
                    if ia <= ib {
                        values[ia * cols + ib] = v;
                        values[ib * cols + ia] = v;
                    }
                } else {
                    values[ia * cols + ib] = v;
                }
            }
        }
    }
    if failed {
        return Err(EngineError::Interrupted {
            completed: cached + computed,
            total,
        });
    }
    let stats = ComposeStats {
        tiles: total,
        cached,
        computed,
        elapsed: start.elapsed(),
    };
    let gram = GramMatrix::new(
        values,
        (0..a.len()).collect(),
        (0..b.len()).collect(),
        symmetric,
    )?;
    Ok((gram, stats))
}

/// Cache key of a Gram computation; also stored in exported `CKGM` files.
pub fn gram_key(a: &ImageDataset, b: &ImageDataset, arch: &ArchSpec) -> [u8; 32] {
    cache_key(arch, &a.content_hash(), &b.content_hash())
}

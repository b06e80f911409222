//! Kernel-space operators acting on tiles of the six-index kernel tensor
//! `K[i, j, k, l, m, n]`: image `i` of batch A at pixel `(j, k)` against image
//! `l` of batch B at pixel `(m, n)`.
//!
//! Values are stored as `f32`; every reduction and every embedding is
//! evaluated in `f64` and rounded once on the way out. Each image pair is
//! processed independently, so results do not depend on how pairs are grouped
//! into tiles.

use std::f64::consts::PI;
use std::ops::Range;

use thiserror::Error;

use crate::arch::Layer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pool {width}: spatial dims {d1}x{d2} are not divisible by {width}")]
    PoolIndivisible { width: usize, d1: usize, d2: usize },
    #[error("negative diagonal {value:e} at image {image}, pixel ({j}, {k})")]
    NegativeDiagonal {
        image: usize,
        j: usize,
        k: usize,
        value: f64,
    },
    #[error("diagonal cache does not cover {0}")]
    DiagMismatch(String),
}

/// Borrowed batch of images in `[n, d1, d2, channels]` row-major layout.
#[derive(Debug, Clone, Copy)]
pub struct ImageBatch<'a> {
    pub pixels: &'a [f32],
    /// Dataset index of the first image in the batch.
    pub start: usize,
    pub len: usize,
    pub spatial: (usize, usize),
    pub channels: usize,
}

impl ImageBatch<'_> {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    fn pixel(&self, image: usize, j: usize, k: usize) -> &[f32] {
        let c = self.channels;
        let off = ((image * self.spatial.0 + j) * self.spatial.1 + k) * c;
        &self.pixels[off..off + c]
    }
}

/// Tile of the kernel tensor for one pair of image batches, laid out as
/// `[B1, D1, D2, B2, D1, D2]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlock {
    values: Vec<f32>,
    batch_a: Range<usize>,
    batch_b: Range<usize>,
    spatial: (usize, usize),
    stage: usize,
}

impl KernelBlock {
    pub fn zeros(
        batch_a: Range<usize>,
        batch_b: Range<usize>,
        spatial: (usize, usize),
        stage: usize,
    ) -> Self {
        let len = batch_a.len() * batch_b.len() * (spatial.0 * spatial.1).pow(2);
        Self {
            values: vec![0.0; len],
            batch_a,
            batch_b,
            spatial,
            stage,
        }
    }

    pub fn from_values(
        values: Vec<f32>,
        batch_a: Range<usize>,
        batch_b: Range<usize>,
        spatial: (usize, usize),
        stage: usize,
    ) -> Result<Self, KernelError> {
        let expected = batch_a.len() * batch_b.len() * (spatial.0 * spatial.1).pow(2);
        if values.len() != expected {
            return Err(KernelError::ShapeMismatch(format!(
                "{} values for a {}x{} block at {}x{} (expected {expected})",
                values.len(),
                batch_a.len(),
                batch_b.len(),
                spatial.0,
                spatial.1
            )));
        }
        Ok(Self {
            values,
            batch_a,
            batch_b,
            spatial,
            stage,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn batch_a(&self) -> Range<usize> {
        self.batch_a.clone()
    }

    pub fn batch_b(&self) -> Range<usize> {
        self.batch_b.clone()
    }

    pub fn rows(&self) -> usize {
        self.batch_a.len()
    }

    pub fn cols(&self) -> usize {
        self.batch_b.len()
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.spatial
    }

    /// Index of the last applied layer (0 = input kernel).
    pub fn stage(&self) -> usize {
        self.stage
    }

    /// Both batches are the same image range.
    pub fn is_diagonal(&self) -> bool {
        self.batch_a == self.batch_b
    }

    fn pixels(&self) -> usize {
        self.spatial.0 * self.spatial.1
    }

    /// Flat offset of a local index (batch-relative `i` and `l`).
    pub fn offset(&self, i: usize, j: usize, k: usize, l: usize, m: usize, n: usize) -> usize {
        let (d1, d2) = self.spatial;
        ((((i * d1 + j) * d2 + k) * self.cols() + l) * d1 + m) * d2 + n
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize, m: usize, n: usize) -> f32 {
        self.values[self.offset(i, j, k, l, m, n)]
    }

    /// Copies the `D1*D2 x D1*D2` sub-tensor of pair `(i, l)` into `buf`.
    fn gather_pair(&self, i: usize, l: usize, buf: &mut [f64]) {
        let p = self.pixels();
        for a in 0..p {
            let src = (i * p + a) * self.cols() * p + l * p;
            for (dst, &v) in buf[a * p..(a + 1) * p]
                .iter_mut()
                .zip(&self.values[src..src + p])
            {
                *dst = v as f64;
            }
        }
    }

    fn scatter_pair(&mut self, i: usize, l: usize, buf: &[f64]) {
        let p = self.pixels();
        let cols = self.cols();
        for a in 0..p {
            let dst = (i * p + a) * cols * p + l * p;
            for (out, &v) in self.values[dst..dst + p]
                .iter_mut()
                .zip(&buf[a * p..(a + 1) * p])
            {
                *out = v as f32;
            }
        }
    }

    /// Applies `f` to every image pair. `f` receives the pair's input in
    /// `[j, k, m, n]` order and writes the output pair of `out_spatial`.
    fn map_pairs(
        &self,
        out_spatial: (usize, usize),
        mut f: impl FnMut(&[f64], &mut [f64]),
    ) -> KernelBlock {
        let mut out = KernelBlock::zeros(
            self.batch_a.clone(),
            self.batch_b.clone(),
            out_spatial,
            self.stage + 1,
        );
        let in_len = self.pixels().pow(2);
        let out_len = (out_spatial.0 * out_spatial.1).pow(2);
        let mut src = vec![0.0f64; in_len];
        let mut dst = vec![0.0f64; out_len];
        for i in 0..self.rows() {
            for l in 0..self.cols() {
                self.gather_pair(i, l, &mut src);
                dst.iter_mut().for_each(|v| *v = 0.0);
                f(&src, &mut dst);
                out.scatter_pair(i, l, &dst);
            }
        }
        out
    }

    /// Final `B1 x B2` values of a block whose spatial dims are 1x1.
    pub fn scalars(&self) -> Option<&[f32]> {
        (self.spatial == (1, 1)).then_some(self.values.as_slice())
    }

    /// Diagonal entries `K[i,j,k,i,j,k]` of a diagonal block, per image.
    pub fn diagonal(&self) -> Option<Vec<f64>> {
        if !self.is_diagonal() {
            return None;
        }
        let (d1, d2) = self.spatial;
        let mut out = Vec::with_capacity(self.rows() * d1 * d2);
        for i in 0..self.rows() {
            for j in 0..d1 {
                for k in 0..d2 {
                    out.push(self.get(i, j, k, i, j, k) as f64);
                }
            }
        }
        Some(out)
    }
}

/// Per-pixel feature norms `A[i, j, k] = sqrt(K[i,j,k,i,j,k])` for a range of
/// images at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagCache {
    batch: Range<usize>,
    spatial: (usize, usize),
    norms: Vec<f64>,
}

impl DiagCache {
    pub fn new(
        batch: Range<usize>,
        spatial: (usize, usize),
        norms: Vec<f64>,
    ) -> Result<Self, KernelError> {
        if norms.len() != batch.len() * spatial.0 * spatial.1 {
            return Err(KernelError::ShapeMismatch(format!(
                "{} norms for {} images at {}x{}",
                norms.len(),
                batch.len(),
                spatial.0,
                spatial.1
            )));
        }
        if let Some(bad) = norms.iter().find(|v| !(**v >= 0.0)) {
            return Err(KernelError::ShapeMismatch(format!("invalid norm {bad}")));
        }
        Ok(Self {
            batch,
            spatial,
            norms,
        })
    }

    /// Concatenates caches covering consecutive image ranges.
    pub fn concat(parts: &[DiagCache]) -> Result<Self, KernelError> {
        let first = parts
            .first()
            .ok_or_else(|| KernelError::DiagMismatch("empty cache list".into()))?;
        let mut norms = Vec::new();
        let mut end = first.batch.start;
        for part in parts {
            if part.batch.start != end || part.spatial != first.spatial {
                return Err(KernelError::DiagMismatch(format!(
                    "non-contiguous cache at {:?}",
                    part.batch
                )));
            }
            end = part.batch.end;
            norms.extend_from_slice(&part.norms);
        }
        Self::new(first.batch.start..end, first.spatial, norms)
    }

    pub fn batch(&self) -> Range<usize> {
        self.batch.clone()
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.spatial
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Norms of one image (dataset index) in `[j, k]` order.
    pub fn image(&self, image: usize) -> &[f64] {
        let p = self.spatial.0 * self.spatial.1;
        let local = image - self.batch.start;
        &self.norms[local * p..(local + 1) * p]
    }

    fn covers(&self, range: &Range<usize>, spatial: (usize, usize)) -> Result<(), KernelError> {
        if self.spatial != spatial || range.start < self.batch.start || range.end > self.batch.end {
            return Err(KernelError::DiagMismatch(format!(
                "images {range:?} at {}x{} (cache holds {:?} at {}x{})",
                spatial.0, spatial.1, self.batch, self.spatial.0, self.spatial.1
            )));
        }
        Ok(())
    }
}

/// Pixel-level inner products between every pair of images.
pub fn input_kernel(a: &ImageBatch, b: &ImageBatch) -> Result<KernelBlock, KernelError> {
    if a.spatial != b.spatial || a.channels != b.channels {
        return Err(KernelError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.spatial.0, a.spatial.1, a.channels, b.spatial.0, b.spatial.1, b.channels
        )));
    }
    for batch in [a, b] {
        let expected = batch.len * batch.spatial.0 * batch.spatial.1 * batch.channels;
        if batch.pixels.len() != expected {
            return Err(KernelError::ShapeMismatch(format!(
                "batch holds {} values, expected {expected}",
                batch.pixels.len()
            )));
        }
    }
    let (d1, d2) = a.spatial;
    let mut block = KernelBlock::zeros(a.range(), b.range(), a.spatial, 0);
    let mut idx = 0;
    for i in 0..a.len {
        for j in 0..d1 {
            for k in 0..d2 {
                let x = a.pixel(i, j, k);
                for l in 0..b.len {
                    for m in 0..d1 {
                        for n in 0..d2 {
                            let z = b.pixel(l, m, n);
                            let dot: f64 =
                                x.iter().zip(z).map(|(&p, &q)| p as f64 * q as f64).sum();
                            block.values[idx] = dot as f32;
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(block)
}

/// Zero-padded `(2w+1) x (2w+1)` convolution:
/// `K_out[.,j,k,.,m,n] = sum_{dx,dy} K_in[.,j+dx,k+dy,.,m+dx,n+dy]`.
///
/// The window is separable along the two spatial axes, so the sum is taken
/// over `dy` first and then over `dx`.
pub fn conv(block: &KernelBlock, half_width: usize) -> KernelBlock {
    let (d1, d2) = block.spatial;
    let w = half_width as isize;
    let mut tmp = vec![0.0f64; (d1 * d2).pow(2)];
    let at = move |j: usize, k: usize, m: usize, n: usize| ((j * d2 + k) * d1 + m) * d2 + n;
    // Offsets `o` along an axis of length `d` valid for some index, with the
    // index range `lo..hi` for which `index + o` stays in bounds.
    let span = move |o: isize, d: usize| {
        let lo = (-o).max(0) as usize;
        let hi = (d as isize - o).clamp(0, d as isize) as usize;
        (lo, hi.max(lo))
    };
    block.map_pairs(block.spatial, |src, dst| {
        tmp.iter_mut().for_each(|v| *v = 0.0);
        // Offsets are visited in ascending order so each entry is summed in
        // a fixed order regardless of layout.
        for j in 0..d1 {
            for m in 0..d1 {
                for dy in -w..=w {
                    let (lo, hi) = span(dy, d2);
                    for k in lo..hi {
                        let kk = (k as isize + dy) as usize;
                        let out = at(j, k, m, lo);
                        let inp = at(j, kk, m, (lo as isize + dy) as usize);
                        for (t, &s) in tmp[out..out + hi - lo]
                            .iter_mut()
                            .zip(&src[inp..inp + hi - lo])
                        {
                            *t += s;
                        }
                    }
                }
            }
        }
        for j in 0..d1 {
            for dx in -w..=w {
                let jj = j as isize + dx;
                if jj < 0 || jj as usize >= d1 {
                    continue;
                }
                let jj = jj as usize;
                let (lo, hi) = span(dx, d1);
                for k in 0..d2 {
                    for m in lo..hi {
                        let mm = (m as isize + dx) as usize;
                        let out = at(j, k, m, 0);
                        let inp = at(jj, k, mm, 0);
                        for (t, &s) in dst[out..out + d2].iter_mut().zip(&tmp[inp..inp + d2]) {
                            *t += s;
                        }
                    }
                }
            }
        }
    })
}

/// Average pooling over aligned `w x w` windows on both images.
pub fn pool(block: &KernelBlock, width: usize) -> Result<KernelBlock, KernelError> {
    let (d1, d2) = block.spatial;
    if width == 0 || d1 % width != 0 || d2 % width != 0 {
        return Err(KernelError::PoolIndivisible { width, d1, d2 });
    }
    Ok(pool_rect(block, (width, width)))
}

/// Pools `(w1, w2)` windows; `global_pool` uses the full extent per axis.
fn pool_rect(block: &KernelBlock, (w1, w2): (usize, usize)) -> KernelBlock {
    let (d1, d2) = block.spatial;
    let (o1, o2) = (d1 / w1, d2 / w2);
    let scale = 1.0 / ((w1 * w2) as f64).powi(2);
    block.map_pairs((o1, o2), |src, dst| {
        let mut idx = 0;
        for j in 0..o1 {
            for k in 0..o2 {
                for m in 0..o1 {
                    for n in 0..o2 {
                        let mut acc = 0.0;
                        for a in 0..w1 {
                            for b in 0..w2 {
                                let row = ((j * w1 + a) * d2 + k * w2 + b) * d1 * d2;
                                for c in 0..w1 {
                                    let base = row + (m * w1 + c) * d2 + n * w2;
                                    acc += src[base..base + w2].iter().sum::<f64>();
                                }
                            }
                        }
                        dst[idx] = acc * scale;
                        idx += 1;
                    }
                }
            }
        }
    })
}

/// Averages over every pair of positions, leaving 1x1 spatial dims.
pub fn global_pool(block: &KernelBlock) -> KernelBlock {
    pool_rect(block, block.spatial)
}

/// ReLU dual activation for unit-norm inputs at correlation `rho`:
/// `(sqrt(1 - rho^2) + rho (pi - arccos rho)) / pi`.
pub fn relu_dual(rho: f64) -> f64 {
    let rho = rho.clamp(-1.0, 1.0);
    ((1.0 - rho * rho).max(0.0).sqrt() + rho * (PI - rho.acos())) / PI
}

/// Normalized Gaussian dual `exp(rho - 1)`.
pub fn gauss_dual(rho: f64) -> f64 {
    (rho.clamp(-1.0, 1.0) - 1.0).exp()
}

/// Arc-cosine kernel value from an inner product and the two norms.
pub fn relu_kernel(inner: f64, norm_a: f64, norm_b: f64) -> f64 {
    embed_value(inner, norm_a, norm_b, relu_dual)
}

pub fn gauss_kernel(inner: f64, norm_a: f64, norm_b: f64) -> f64 {
    embed_value(inner, norm_a, norm_b, gauss_dual)
}

#[inline]
fn embed_value(inner: f64, norm_a: f64, norm_b: f64, dual: impl Fn(f64) -> f64) -> f64 {
    let scale = norm_a * norm_b;
    if scale <= 0.0 {
        return 0.0;
    }
    scale * dual(inner / scale)
}

fn embed(
    block: &KernelBlock,
    diag_a: &DiagCache,
    diag_b: &DiagCache,
    dual: impl Fn(f64) -> f64,
) -> Result<KernelBlock, KernelError> {
    diag_a.covers(&block.batch_a, block.spatial)?;
    diag_b.covers(&block.batch_b, block.spatial)?;
    let p = block.pixels();
    let mut out = KernelBlock::zeros(
        block.batch_a.clone(),
        block.batch_b.clone(),
        block.spatial,
        block.stage + 1,
    );
    let cols = block.cols();
    for i in 0..block.rows() {
        let norms_a = diag_a.image(block.batch_a.start + i);
        for (a, &na) in norms_a.iter().enumerate() {
            for l in 0..cols {
                let norms_b = diag_b.image(block.batch_b.start + l);
                let base = ((i * p + a) * cols + l) * p;
                for (b, &nb) in norms_b.iter().enumerate() {
                    let v = block.values[base + b] as f64;
                    out.values[base + b] = embed_value(v, na, nb, &dual) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// ReLU (arc-cosine) embedding: `A A' / pi * (sin B + (pi - B) cos B)` with
/// `B = arccos(K / (A A'))`. Cosines are clamped to `[-1, 1]` and zero-norm
/// pixels map to 0.
pub fn relu_embed(
    block: &KernelBlock,
    diag_a: &DiagCache,
    diag_b: &DiagCache,
) -> Result<KernelBlock, KernelError> {
    embed(block, diag_a, diag_b, relu_dual)
}

/// Normalized Gaussian embedding `A A' exp(rho - 1)`.
pub fn gauss_embed(
    block: &KernelBlock,
    diag_a: &DiagCache,
    diag_b: &DiagCache,
) -> Result<KernelBlock, KernelError> {
    embed(block, diag_a, diag_b, gauss_dual)
}

/// Relative slack below zero tolerated on diagonal entries before they are
/// treated as corruption rather than rounding.
pub const NEGATIVE_DIAGONAL_SLACK: f64 = 1e-4;

/// Norms from the diagonal of a diagonal block; tiny negative diagonals are
/// clamped to 0.
pub fn update_diag(block: &KernelBlock) -> Result<DiagCache, KernelError> {
    let diag = block.diagonal().ok_or_else(|| {
        KernelError::DiagMismatch(format!(
            "block {:?} x {:?} is not a diagonal block",
            block.batch_a, block.batch_b
        ))
    })?;
    norms_from_diagonal(block.batch_a(), block.spatial, &diag)
}

/// Square roots of diagonal entries, rejecting values below
/// `-1e-4 * max(1, max |diag|)`.
pub fn norms_from_diagonal(
    batch: Range<usize>,
    spatial: (usize, usize),
    diag: &[f64],
) -> Result<DiagCache, KernelError> {
    let scale = diag.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let p = spatial.0 * spatial.1;
    let mut norms = Vec::with_capacity(diag.len());
    for (idx, &v) in diag.iter().enumerate() {
        if v < -NEGATIVE_DIAGONAL_SLACK * scale || !v.is_finite() {
            return Err(KernelError::NegativeDiagonal {
                image: batch.start + idx / p,
                j: (idx % p) / spatial.1,
                k: idx % spatial.1,
                value: v,
            });
        }
        norms.push(v.max(0.0).sqrt());
    }
    DiagCache::new(batch, spatial, norms)
}

/// Applies one layer. Embedding layers need the norm caches of both batches
/// at the current stage.
pub fn apply_layer(
    block: &KernelBlock,
    layer: &Layer,
    diags: Option<(&DiagCache, &DiagCache)>,
) -> Result<KernelBlock, KernelError> {
    match *layer {
        Layer::Conv { half_width } => Ok(conv(block, half_width)),
        Layer::Pool { width } => pool(block, width),
        Layer::GlobalPool => Ok(global_pool(block)),
        Layer::ReluEmbed | Layer::GaussEmbed => {
            let (a, b) = diags.ok_or_else(|| {
                KernelError::DiagMismatch("embedding layer without norm caches".into())
            })?;
            if *layer == Layer::ReluEmbed {
                relu_embed(block, a, b)
            } else {
                gauss_embed(block, a, b)
            }
        }
    }
}

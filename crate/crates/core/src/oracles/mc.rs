//! Monte-Carlo estimate of the conv + ReLU kernel from explicit random
//! networks: flatten every zero-padded patch, multiply by a Gaussian weight
//! matrix, apply the normalized ReLU and average feature inner products.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::ImageDataset;
use crate::kernel;
use crate::rng;

use super::OracleError;

/// One kernel-tensor entry estimated over independent networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    /// Sample standard deviation over trials divided by `sqrt(trials)`.
    pub std_error: f64,
    pub trials: usize,
    pub width: usize,
    pub seed: u64,
}

pub const MC_MAX_SIDE: usize = 8;
pub const MC_MAX_WORK: usize = 10_000_000;

/// Trials per deterministic reduction chunk.
const CHUNK: usize = 32;

/// Incremental accumulator so that more trials can be added to a run.
#[derive(Debug, Clone)]
pub struct McRun {
    patches: DMatrix<f64>,
    width: usize,
    seed: u64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    trials: usize,
}

impl McRun {
    pub fn new(
        images: &ImageDataset,
        half_width: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self, OracleError> {
        let (d1, d2) = images.spatial();
        if d1 > MC_MAX_SIDE || d2 > MC_MAX_SIDE || width == 0 {
            return Err(OracleError::Invalid(format!(
                "random features need spatial <= {MC_MAX_SIDE} and width > 0, got {d1}x{d2}, width {width}"
            )));
        }
        let patches = patch_matrix(images, half_width);
        let entries = patches.nrows() * patches.nrows();
        Ok(Self {
            patches,
            width,
            seed,
            sum: vec![0.0; entries],
            sum_sq: vec![0.0; entries],
            trials: 0,
        })
    }

    pub fn trials(&self) -> usize {
        self.trials
    }

    /// Runs `more` trials; trial `t` draws its weights from `seed + t`.
    pub fn extend(&mut self, more: usize) -> Result<(), OracleError> {
        if (self.trials + more) * self.width > MC_MAX_WORK {
            return Err(OracleError::Invalid(format!(
                "{} trials of width {} exceed the work limit",
                self.trials + more,
                self.width
            )));
        }
        let first = self.trials;
        let chunks: Vec<(usize, usize)> = (first..first + more)
            .step_by(CHUNK)
            .map(|s| (s, (s + CHUNK).min(first + more)))
            .collect();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = chunks
            .par_iter()
            .map(|&(s, e)| {
                let mut sum = vec![0.0; self.sum.len()];
                let mut sum_sq = vec![0.0; self.sum.len()];
                for t in s..e {
                    let g = self.trial(t);
                    for ((a, b), v) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(g.iter()) {
                        *a += v;
                        *b += v * v;
                    }
                }
                (sum, sum_sq)
            })
            .collect();
        for (sum, sum_sq) in partials {
            for (a, v) in self.sum.iter_mut().zip(sum) {
                *a += v;
            }
            for (a, v) in self.sum_sq.iter_mut().zip(sum_sq) {
                *a += v;
            }
        }
        self.trials += more;
        Ok(())
    }

    /// Feature Gram matrix of one network, row-major over
    /// `(i, j, k) x (l, m, n)`.
    fn trial(&self, t: usize) -> DMatrix<f64> {
        let mut r = rng::stream(
            self.seed.wrapping_add(t as u64),
            rng::streams::RANDOM_FEATURES,
        );
        let normal = Normal::new(0.0, (1.0 / self.width as f64).sqrt()).expect("valid variance");
        let w = DMatrix::from_fn(self.patches.ncols(), self.width, |_, _| {
            normal.sample(&mut r)
        });
        let mut phi = &self.patches * w;
        phi.apply(|v| *v = super::quadrature::normalized_relu(*v));
        // Symmetric, so column-major storage reads out row-major.
        &phi * phi.transpose()
    }

    pub fn estimates(&self) -> Vec<McEstimate> {
        let n = self.trials as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(&s, &sq)| {
                let mean = s / n;
                let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
                McEstimate {
                    mean,
                    std_error: (var / n).sqrt(),
                    trials: self.trials,
                    width: self.width,
                    seed: self.seed,
                }
            })
            .collect()
    }
}

/// Rows `(image, j, k)`, columns the zero-padded `(2w+1)^2 x C` patch.
fn patch_matrix(images: &ImageDataset, half_width: usize) -> DMatrix<f64> {
    let (d1, d2) = images.spatial();
    let c = images.channels();
    let side = 2 * half_width + 1;
    let cols = side * side * c;
    let w = half_width as isize;
    let mut m = DMatrix::zeros(images.len() * d1 * d2, cols);
    for i in 0..images.len() {
        let img = images.image(i);
        for j in 0..d1 {
            for k in 0..d2 {
                let row = (i * d1 + j) * d2 + k;
                for dx in -w..=w {
                    for dy in -w..=w {
                        let (a, b) = (j as isize + dx, k as isize + dy);
                        if a < 0 || b < 0 || a >= d1 as isize || b >= d2 as isize {
                            continue;
                        }
                        let off = ((a as usize) * d2 + b as usize) * c;
                        let col = (((dx + w) as usize) * side + (dy + w) as usize) * c;
                        for ch in 0..c {
                            m[(row, col + ch)] = img[off + ch] as f64;
                        }
                    }
                }
            }
        }
    }
    m
}

/// Estimates of the relu-of-conv kernel tensor between all images.
pub fn mc_relu_conv(
    images: &ImageDataset,
    half_width: usize,
    trials: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<McEstimate>, OracleError> {
    if trials < 2 {
        return Err(OracleError::Invalid("need at least two trials".into()));
    }
    let mut run = McRun::new(images, half_width, width, seed)?;
    run.extend(trials)?;
    Ok(run.estimates())
}

/// The closed-form tensor the estimates target: input kernel, conv, relu.
pub fn closed_form_relu_conv(
    images: &ImageDataset,
    half_width: usize,
) -> Result<Vec<f64>, OracleError> {
    let all = images.batch(0..images.len());
    let k0 = kernel::input_kernel(&all, &all)?;
    let k1 = kernel::conv(&k0, half_width);
    let norms = kernel::update_diag(&k1)?;
    let k2 = kernel::relu_embed(&k1, &norms, &norms)?;
    Ok(k2.values().iter().map(|&v| v as f64).collect())
}

/// Fraction of entries with `|estimate - exact| <= z * SE`.
pub fn fraction_within(estimates: &[McEstimate], exact: &[f64], z: f64) -> f64 {
    let inside = estimates
        .iter()
        .zip(exact)
        .filter(|(e, &x)| {
            let d = (e.mean - x).abs();
            d <= z * e.std_error || d <= 1e-9 * x.abs().max(1e-12)
        })
        .count();
    inside as f64 / exact.len().max(1) as f64
}

pub fn mean_std_error(estimates: &[McEstimate]) -> f64 {
    estimates.iter().map(|e| e.std_error).sum::<f64>() / estimates.len().max(1) as f64
}

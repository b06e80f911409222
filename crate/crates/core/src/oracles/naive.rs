//! Whole-tensor reference pipeline in `f64`: plain loops, no tiling, no
//! caching, no separable tricks.
//!
//! Both datasets are stacked into one tensor so that every image's
//! self-similarity sits on the tensor diagonal; the norms used by the
//! embedding layers are read straight from there.

use std::f64::consts::PI;

use crate::arch::{ArchSpec, Layer};
use crate::data::ImageDataset;
use crate::engine::GramMatrix;

use super::OracleError;

/// `K[i, j, k, l, m, n]` over `n` images on a `d1 x d2` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor6 {
    pub n: usize,
    pub d1: usize,
    pub d2: usize,
    pub data: Vec<f64>,
}

impl Tensor6 {
    fn zeros(n: usize, d1: usize, d2: usize) -> Self {
        Self {
            n,
            d1,
            d2,
            data: vec![0.0; (n * d1 * d2).pow(2)],
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize, l: usize, m: usize, n: usize) -> usize {
        ((((i * self.d1 + j) * self.d2 + k) * self.n + l) * self.d1 + m) * self.d2 + n
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize, m: usize, n: usize) -> f64 {
        self.data[self.idx(i, j, k, l, m, n)]
    }

    /// Visits every index tuple in storage order.
    fn for_each_index(&self, mut f: impl FnMut([usize; 6])) {
        for i in 0..self.n {
            for j in 0..self.d1 {
                for k in 0..self.d2 {
                    for l in 0..self.n {
                        for m in 0..self.d1 {
                            for n in 0..self.d2 {
                                f([i, j, k, l, m, n]);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn naive_input(images: &ImageDataset) -> Tensor6 {
    let (d1, d2) = images.spatial();
    let c = images.channels();
    let mut t = Tensor6::zeros(images.len(), d1, d2);
    let px = |i: usize, j: usize, k: usize| {
        let off = (j * d2 + k) * c;
        &images.image(i)[off..off + c]
    };
    let mut out = Vec::with_capacity(t.data.len());
    t.for_each_index(|[i, j, k, l, m, n]| {
        let dot: f64 = px(i, j, k)
            .iter()
            .zip(px(l, m, n))
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        out.push(dot);
    });
    t.data = out;
    t
}

pub fn naive_conv(t: &Tensor6, half_width: usize) -> Tensor6 {
    let w = half_width as isize;
    let (d1, d2) = (t.d1 as isize, t.d2 as isize);
    let mut out = Tensor6::zeros(t.n, t.d1, t.d2);
    let mut vals = Vec::with_capacity(out.data.len());
    out.for_each_index(|[i, j, k, l, m, n]| {
        let mut acc = 0.0;
        for dx in -w..=w {
            for dy in -w..=w {
                let (a, b) = (j as isize + dx, k as isize + dy);
                let (c, d) = (m as isize + dx, n as isize + dy);
                if a < 0 || b < 0 || c < 0 || d < 0 || a >= d1 || c >= d1 || b >= d2 || d >= d2 {
                    continue;
                }
                acc += t.get(i, a as usize, b as usize, l, c as usize, d as usize);
            }
        }
        vals.push(acc);
    });
    out.data = vals;
    out
}

/// Average pooling over `w1 x w2` windows, `1/(w1 w2)^2` per pair.
pub fn naive_pool(t: &Tensor6, w1: usize, w2: usize) -> Tensor6 {
    let mut out = Tensor6::zeros(t.n, t.d1 / w1, t.d2 / w2);
    let scale = 1.0 / ((w1 * w2) as f64).powi(2);
    let mut vals = Vec::with_capacity(out.data.len());
    out.for_each_index(|[i, j, k, l, m, n]| {
        let mut acc = 0.0;
        for a in 0..w1 {
            for b in 0..w2 {
                for c in 0..w1 {
                    for d in 0..w2 {
                        acc += t.get(i, j * w1 + a, k * w2 + b, l, m * w1 + c, n * w2 + d);
                    }
                }
            }
        }
        vals.push(acc * scale);
    });
    out.data = vals;
    out
}

/// `A A' / pi * (sin B + (pi - B) cos B)`, `B = arccos(K / (A A'))`.
fn relu_formula(k: f64, a: f64, a2: f64) -> f64 {
    if a * a2 == 0.0 {
        return 0.0;
    }
    let b = (k / (a * a2)).clamp(-1.0, 1.0).acos();
    a * a2 / PI * (b.sin() + (PI - b) * b.cos())
}

/// `A A' exp(K / (A A') - 1)`.
fn gauss_formula(k: f64, a: f64, a2: f64) -> f64 {
    if a * a2 == 0.0 {
        return 0.0;
    }
    a * a2 * ((k / (a * a2)).clamp(-1.0, 1.0) - 1.0).exp()
}

fn naive_embed(t: &Tensor6, f: fn(f64, f64, f64) -> f64) -> Tensor6 {
    let norm = |i: usize, j: usize, k: usize| t.get(i, j, k, i, j, k).max(0.0).sqrt();
    let mut out = t.clone();
    let mut vals = Vec::with_capacity(t.data.len());
    t.for_each_index(|[i, j, k, l, m, n]| {
        vals.push(f(t.get(i, j, k, l, m, n), norm(i, j, k), norm(l, m, n)));
    });
    out.data = vals;
    out
}

pub fn naive_layer(t: &Tensor6, layer: &Layer) -> Result<Tensor6, OracleError> {
    Ok(match *layer {
        Layer::Conv { half_width } => naive_conv(t, half_width),
        Layer::Pool { width } => {
            if !t.d1.is_multiple_of(width) || !t.d2.is_multiple_of(width) {
                return Err(OracleError::Invalid(format!(
                    "pool {width} on {}x{}",
                    t.d1, t.d2
                )));
            }
            naive_pool(t, width, width)
        }
        Layer::GlobalPool => naive_pool(t, t.d1, t.d2),
        Layer::ReluEmbed => naive_embed(t, relu_formula),
        Layer::GaussEmbed => naive_embed(t, gauss_formula),
    })
}

/// Runs `arch` over the stacked images and returns the final tensor.
pub fn naive_tensor(images: &ImageDataset, arch: &ArchSpec) -> Result<Tensor6, OracleError> {
    let mut t = naive_input(images);
    for layer in &arch.layers {
        t = naive_layer(&t, layer)?;
    }
    Ok(t)
}

/// Largest stacked tensor side (`images x D1 x D2`) the reference accepts.
pub const NAIVE_MAX_POSITIONS: usize = 4096;

/// Reference Gram matrix between `a` (rows) and `b` (columns).
pub fn naive_compose(
    a: &ImageDataset,
    b: &ImageDataset,
    arch: &ArchSpec,
) -> Result<GramMatrix, OracleError> {
    if a.spatial() != b.spatial() || a.channels() != b.channels() {
        return Err(OracleError::Invalid("datasets differ in shape".into()));
    }
    let (d1, d2) = a.spatial();
    let same = a.content_hash() == b.content_hash();
    let images = if same { a.len() } else { a.len() + b.len() };
    if images * d1 * d2 > NAIVE_MAX_POSITIONS {
        return Err(OracleError::Invalid(format!(
            "{images} images of {d1}x{d2} exceed the reference limit of {NAIVE_MAX_POSITIONS} positions"
        )));
    }
    let (t, offset) = if same {
        (naive_tensor(a, arch)?, 0)
    } else {
        (naive_tensor(&stack(a, b), arch)?, a.len())
    };
    if (t.d1, t.d2) != (1, 1) {
        return Err(OracleError::Invalid(format!(
            "architecture leaves {}x{} spatial dims",
            t.d1, t.d2
        )));
    }
    let mut values = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        for l in 0..b.len() {
            values.push(t.get(i, 0, 0, offset + l, 0, 0));
        }
    }
    GramMatrix::new(values, (0..a.len()).collect(), (0..b.len()).collect(), same)
        .map_err(|e| OracleError::Invalid(e.to_string()))
}

fn stack(a: &ImageDataset, b: &ImageDataset) -> ImageDataset {
    let mut pixels = a.pixels().to_vec();
    pixels.extend_from_slice(b.pixels());
    let mut labels = a.labels().to_vec();
    labels.extend_from_slice(b.labels());
    let classes = a.class_count().max(b.class_count());
    ImageDataset::new(
        pixels,
        a.spatial(),
        a.channels(),
        labels,
        classes,
        "stacked",
    )
    .expect("stacking two valid datasets")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, side: usize, c: usize, f: impl Fn(usize) -> f32) -> ImageDataset {
        let pixels = (0..n * side * side * c).map(f).collect();
        ImageDataset::new(pixels, (side, side), c, vec![0; n], 1, "test").unwrap()
    }

    #[test]
    fn empty_arch_is_input_kernel() {
        let ds = images(2, 1, 3, |i| i as f32);
        let g = naive_compose(&ds, &ds, &ArchSpec::new("id", vec![])).unwrap();
        // Images (0,1,2) and (3,4,5).
        assert_eq!(g.values(), &[5.0, 14.0, 14.0, 50.0]);
    }

    #[test]
    fn pooling_constant_images_is_constant() {
        let ds = images(3, 4, 1, |_| 0.5);
        let arch = ArchSpec::new("p", vec![Layer::pool(2), Layer::GlobalPool]);
        let g = naive_compose(&ds, &ds, &arch).unwrap();
        assert!(g.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn printed_relu_form_matches_dual() {
        for rho in [-1.0, -0.3, 0.0, 0.5, 1.0] {
            let v = relu_formula(rho * 6.0, 2.0, 3.0);
            assert!((v - 6.0 * crate::kernel::relu_dual(rho)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_large_inputs() {
        let a = images(5, 20, 1, |i| i as f32);
        let b = images(6, 20, 1, |i| i as f32 * 0.5);
        assert!(naive_compose(&a, &b, &ArchSpec::new("g", vec![Layer::GlobalPool])).is_err());
    }
}

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;

use super::{DataError, ImageDataset, TabularDataset};
use crate::rng;

/// Floor applied to standard deviations before dividing.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and standard deviation of an image dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn fit(ds: &ImageDataset) -> Self {
        let c = ds.channels();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for px in ds.pixels().chunks_exact(c) {
            for (ch, &v) in px.iter().enumerate() {
                sum[ch] += v as f64;
                sq[ch] += (v as f64).powi(2);
            }
        }
        let count = (ds.pixels().len() / c).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &ImageDataset) -> ImageDataset {
        let c = ds.channels();
        let pixels = ds
            .pixels()
            .chunks_exact(c)
            .flat_map(|px| {
                px.iter().enumerate().map(|(ch, &v)| {
                    ((v as f64 - self.mean[ch]) / self.std[ch].max(STD_FLOOR)) as f32
                })
            })
            .collect();
        ds.with_pixels(pixels, ds.spatial(), "standardize(per-channel)".into())
    }
}

/// Per-channel zero mean, unit standard deviation.
pub fn standardize(ds: &ImageDataset) -> ImageDataset {
    ChannelStats::fit(ds).apply(ds)
}

/// Per-feature mean and standard deviation of a tabular dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(ds: &TabularDataset) -> Self {
        let d = ds.dim();
        let n = ds.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for row in ds.rows().chunks_exact(d.max(1)) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in ds.rows().chunks_exact(d.max(1)) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt()).collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &TabularDataset) -> TabularDataset {
        let d = ds.dim();
        let rows = ds
            .rows()
            .chunks_exact(d.max(1))
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(f, v)| (v - self.mean[f]) / self.std[f].max(STD_FLOOR))
            })
            .collect();
        ds.with_rows(rows)
    }
}

pub fn standardize_tabular(ds: &TabularDataset) -> TabularDataset {
    FeatureStats::fit(ds).apply(ds)
}

/// Symmetric whitening `U diag((lambda + eps)^-1/2) U^T` of mean-centred,
/// flattened images.
#[derive(Debug, Clone)]
pub struct ZcaTransform {
    pub mean: Vec<f64>,
    pub whitening: DMatrix<f64>,
    pub epsilon: f64,
    /// Eigenvalues of the sample covariance, ascending.
    pub eigenvalues: Vec<f64>,
}

/// Relative eigenvalue floor used when none is given: `eps = 1e-5 * trace / d`.
pub const ZCA_RELATIVE_EPSILON: f64 = 1e-5;

/// Fits ZCA on the flattened images (`d = D1 * D2 * C`). `epsilon = None`
/// selects the scale-relative default.
///
/// With fewer images than features the spectrum comes from the `N x N` Gram
/// matrix of the centred data; every direction outside its span has
/// eigenvalue 0 and is scaled by `eps^-1/2`. Otherwise the covariance is
/// decomposed directly, with zero-variance features split off first.
pub fn zca_fit(ds: &ImageDataset, epsilon: Option<f64>) -> Result<ZcaTransform, DataError> {
    let n = ds.len();
    if n < 2 {
        return Err(DataError::Invalid(format!(
            "ZCA needs at least 2 images, got {n}"
        )));
    }
    let d = ds.feature_dim();
    let mut x = DMatrix::<f64>::from_row_slice(n, d, &ds.to_rows());
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
    for (j, m) in mean.iter().enumerate() {
        x.column_mut(j).add_scalar_mut(-m);
    }
    let denom = n as f64 - 1.0;
    let trace = x.norm_squared() / denom;
    let epsilon = epsilon.unwrap_or(ZCA_RELATIVE_EPSILON * trace / d as f64);
    if !(epsilon >= 0.0) {
        return Err(DataError::Invalid(format!(
            "ZCA epsilon {epsilon} must be >= 0"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DataError::Eigen(
            "centred data has non-finite entries".into(),
        ));
    }
    let scale = |lambda: f64| {
        let lambda = lambda.max(0.0);
        if lambda + epsilon > 0.0 {
            (lambda + epsilon).powf(-0.5)
        } else {
            0.0
        }
    };
    let (mut whitening, mut eigenvalues) = if n <= d {
        gram_spectrum(&x, denom, &scale)?
    } else {
        covariance_spectrum(&x, denom, &scale)?
    };
    eigenvalues.sort_by(f64::total_cmp);
    // Symmetrize away rounding.
    let wt = whitening.transpose();
    whitening = (whitening + wt) * 0.5;
    Ok(ZcaTransform {
        mean,
        whitening,
        epsilon,
        eigenvalues,
    })
}

fn symmetric_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, DataError> {
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 0)
        .ok_or_else(|| DataError::Eigen("symmetric eigensolver did not converge".into()))?;
    if eig
        .eigenvalues
        .iter()
        .chain(eig.eigenvectors.iter())
        .any(|v| !v.is_finite())
    {
        return Err(DataError::Eigen(
            "eigensolver produced non-finite values".into(),
        ));
    }
    Ok(eig)
}

/// `W = s(0) I + sum_i (s(lambda_i) - s(0)) v_i v_i^T` over the nonzero
/// spectrum of the centred `n x d` data `x`.
fn gram_spectrum(
    x: &DMatrix<f64>,
    denom: f64,
    scale: &dyn Fn(f64) -> f64,
) -> Result<(DMatrix<f64>, Vec<f64>), DataError> {
    let (n, d) = x.shape();
    let eig = symmetric_eigen(x * x.transpose() / denom)?;
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    // Directions below this are numerically in the null space.
    let floor = top * (n as f64) * f64::EPSILON * 16.0;
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > floor).collect();
    let base = scale(0.0);
    let mut v = DMatrix::<f64>::zeros(d, keep.len());
    let mut weights = Vec::with_capacity(keep.len());
    for (col, &i) in keep.iter().enumerate() {
        let lambda = eig.eigenvalues[i];
        // Right singular vector: X^T q / sqrt(lambda (n - 1)).
        let u = x.transpose() * eig.eigenvectors.column(i) / (lambda * denom).sqrt();
        v.set_column(col, &u);
        weights.push(scale(lambda) - base);
    }
    let mut vw = v.clone();
    for (col, w) in weights.iter().enumerate() {
        vw.column_mut(col).scale_mut(*w);
    }
    let mut whitening = vw * v.transpose();
    for i in 0..d {
        whitening[(i, i)] += base;
    }
    let mut eigenvalues: Vec<f64> = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
    eigenvalues.resize(d, 0.0);
    Ok((whitening, eigenvalues))
}

fn covariance_spectrum(
    x: &DMatrix<f64>,
    denom: f64,
    scale: &dyn Fn(f64) -> f64,
) -> Result<(DMatrix<f64>, Vec<f64>), DataError> {
    let d = x.ncols();
    // Constant features decouple exactly; the eigensolver mishandles
    // all-zero rows, so they are handled by hand.
    let live: Vec<usize> = (0..d)
        .filter(|&j| x.column(j).iter().any(|&v| v != 0.0))
        .collect();
    let xl = x.select_columns(&live);
    let eig = symmetric_eigen(xl.transpose() * &xl / denom)?;
    let mut scaled = eig.eigenvectors.clone();
    for (col, &lambda) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(col).scale_mut(scale(lambda));
    }
    let wl = scaled * eig.eigenvectors.transpose();
    let mut whitening = DMatrix::<f64>::identity(d, d) * scale(0.0);
    for (a, &i) in live.iter().enumerate() {
        for (b, &j) in live.iter().enumerate() {
            whitening[(i, j)] = wl[(a, b)];
        }
    }
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.resize(d, 0.0);
    Ok((whitening, eigenvalues))
}

pub fn zca_apply(t: &ZcaTransform, ds: &ImageDataset) -> Result<ImageDataset, DataError> {
    let d = ds.feature_dim();
    if t.mean.len() != d {
        return Err(DataError::Invalid(format!(
            "ZCA fitted on {} features, dataset has {d}",
            t.mean.len()
        )));
    }
    let mut x = DMatrix::<f64>::from_row_slice(ds.len(), d, &ds.to_rows());
    for (j, m) in t.mean.iter().enumerate() {
        x.column_mut(j).add_scalar_mut(-m);
    }
    let y = x * &t.whitening;
    let mut pixels = Vec::with_capacity(ds.len() * d);
    for row in y.row_iter() {
        pixels.extend(row.iter().map(|&v| v as f32));
    }
    Ok(ds.with_pixels(pixels, ds.spatial(), format!("zca(eps={:e})", t.epsilon)))
}

/// Originals followed by their horizontal mirrors; labels are duplicated.
pub fn flip_augment(ds: &ImageDataset) -> ImageDataset {
    let (d1, d2) = ds.spatial();
    let c = ds.channels();
    let mut pixels = ds.pixels().to_vec();
    pixels.reserve(ds.pixels().len());
    for i in 0..ds.len() {
        let img = ds.image(i);
        for r in 0..d1 {
            for col in (0..d2).rev() {
                let off = (r * d2 + col) * c;
                pixels.extend_from_slice(&img[off..off + c]);
            }
        }
    }
    let mut out = ds.with_pixels(pixels, ds.spatial(), "flip-augment".into());
    out.labels = ds.labels().iter().chain(ds.labels()).copied().collect();
    out
}

/// Zero-pads each image to `target`, centred with the smaller margin first.
pub fn pad_to(ds: &ImageDataset, target: (usize, usize)) -> Result<ImageDataset, DataError> {
    let (d1, d2) = ds.spatial();
    if target.0 < d1 || target.1 < d2 {
        return Err(DataError::PadTooSmall {
            target,
            current: (d1, d2),
        });
    }
    if target == (d1, d2) {
        return Ok(ds.clone());
    }
    let c = ds.channels();
    let (top, left) = ((target.0 - d1) / 2, (target.1 - d2) / 2);
    let per = target.0 * target.1 * c;
    let mut pixels = vec![0.0f32; ds.len() * per];
    for i in 0..ds.len() {
        let img = ds.image(i);
        for r in 0..d1 {
            let src = r * d2 * c;
            let dst = i * per + ((r + top) * target.1 + left) * c;
            pixels[dst..dst + d2 * c].copy_from_slice(&img[src..src + d2 * c]);
        }
    }
    Ok(ds.with_pixels(
        pixels,
        target,
        format!("pad({}x{} -> {}x{})", d1, d2, target.0, target.1),
    ))
}

/// Draws `n / classes` images per class uniformly without replacement.
/// The result keeps the original dataset order.
pub fn subsample_balanced(
    ds: &ImageDataset,
    n: usize,
    seed: u64,
) -> Result<ImageDataset, DataError> {
    let classes = ds.class_count();
    if classes == 0 || !n.is_multiple_of(classes) {
        return Err(DataError::Indivisible { n, classes });
    }
    let per_class = n / classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng::stream(seed, rng::streams::SUBSAMPLE);
    let mut chosen = Vec::with_capacity(n);
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(DataError::InsufficientClass {
                class,
                wanted: per_class,
                available: members.len(),
            });
        }
        chosen.extend(
            index::sample(&mut rng, members.len(), per_class)
                .into_iter()
                .map(|k| members[k]),
        );
    }
    chosen.sort_unstable();
    let mut out = ds.select(&chosen);
    out.provenance
        .push(format!("subsample_balanced(n={n}, seed={seed})"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_images(n: usize, spatial: (usize, usize), c: usize, seed: u64) -> ImageDataset {
        let mut r = stream(seed, 99);
        let pixels = (0..n * spatial.0 * spatial.1 * c)
            .map(|_| r.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let labels = (0..n).map(|i| i % 2).collect();
        ImageDataset::new(pixels, spatial, c, labels, 2, "random").unwrap()
    }

    #[test]
    fn standardize_constant_and_pair() {
        let ds = ImageDataset::new(vec![5.0; 4], (1, 1), 1, vec![0; 4], 1, "const").unwrap();
        assert!(standardize(&ds).pixels().iter().all(|&v| v == 0.0));
        let ds = ImageDataset::new(vec![0.0, 2.0], (1, 1), 1, vec![0, 0], 1, "pair").unwrap();
        assert_eq!(standardize(&ds).pixels(), &[-1.0, 1.0]);
    }

    #[test]
    fn standardize_moments() {
        let ds = random_images(20, (3, 3), 3, 1);
        let stats = ChannelStats::fit(&standardize(&ds));
        for (m, s) in stats.mean.iter().zip(&stats.std) {
            assert!(m.abs() < 1e-6);
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert_eq!(standardize(&ds).provenance.len(), 2);
    }

    #[test]
    fn tabular_standardize_pair_and_constant() {
        let ds =
            TabularDataset::new(vec![0.0, 3.0, 2.0, 3.0], 2, vec![0, 0], vec!["a".into()]).unwrap();
        assert_eq!(standardize_tabular(&ds).rows(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn zca_whitens_the_fitting_set() {
        let ds = random_images(200, (2, 2), 2, 2);
        // Correlate the features to make whitening non-trivial.
        let mixed: Vec<f32> = ds
            .pixels()
            .chunks_exact(8)
            .flat_map(|x| {
                (0..8)
                    .map(|j| (x[j] as f64 * (j as f64 + 1.0) + 0.7 * x[(j + 1) % 8] as f64) as f32)
                    .collect::<Vec<_>>()
            })
            .collect();
        let ds = ds.with_pixels(mixed, (2, 2), "mixed".into());
        let t = zca_fit(&ds, Some(0.0)).unwrap();
        let w = zca_apply(&t, &ds).unwrap();
        let n = w.len();
        let x = DMatrix::<f64>::from_row_slice(n, 8, &w.to_rows());
        let mean: Vec<f64> = (0..8).map(|j| x.column(j).mean()).collect();
        let mut xc = x.clone();
        for (j, m) in mean.iter().enumerate() {
            xc.column_mut(j).add_scalar_mut(-m);
        }
        let cov = (xc.transpose() * &xc) / (n as f64 - 1.0);
        let err = (cov - DMatrix::<f64>::identity(8, 8)).abs().max();
        assert!(err < 1e-4, "covariance deviates from identity by {err}");
        assert!((t.whitening.clone() - t.whitening.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn zca_on_white_data_is_near_identity() {
        let ds = random_images(4000, (1, 1), 3, 3);
        let t = zca_fit(&ds, Some(0.0)).unwrap();
        let err = (t.whitening.clone() - DMatrix::<f64>::identity(3, 3))
            .abs()
            .max();
        assert!(err < 0.1, "whitening differs from identity by {err}");
    }

    #[test]
    fn zca_large_epsilon_is_a_rescale() {
        let ds = random_images(50, (2, 1), 2, 4);
        let eps = 1e8;
        let t = zca_fit(&ds, Some(eps)).unwrap();
        let expected = DMatrix::<f64>::identity(4, 4) * eps.powf(-0.5);
        let err = (t.whitening.clone() - expected).abs().max();
        assert!(err < 1e-7 * eps.powf(-0.5) * 10.0);
    }

    #[test]
    fn zca_default_epsilon_is_scale_relative() {
        let ds = random_images(30, (2, 2), 1, 5);
        let t = zca_fit(&ds, None).unwrap();
        let trace: f64 = t.eigenvalues.iter().sum();
        assert!((t.epsilon - 1e-5 * trace / 4.0).abs() < 1e-12 * trace);
        assert!(zca_fit(&random_images(1, (2, 2), 1, 5), None).is_err());
    }

    #[test]
    fn flip_doubles_and_is_an_involution() {
        let ds = random_images(3, (2, 3), 2, 6);
        let f = flip_augment(&ds);
        assert_eq!(f.len(), 6);
        assert_eq!(f.labels(), &[0, 1, 0, 0, 1, 0]);
        let mirrored = f.select(&[3, 4, 5]);
        let back = flip_augment(&mirrored).select(&[3, 4, 5]);
        assert_eq!(back.pixels(), ds.pixels());
    }

    #[test]
    fn flip_mirrors_columns() {
        let (d1, d2, c) = (3, 4, 2);
        let pixels: Vec<f32> = (0..d1 * d2 * c).map(|v| v as f32).collect();
        let ds = ImageDataset::new(pixels, (d1, d2), c, vec![0], 1, "ramp").unwrap();
        let f = flip_augment(&ds);
        let (orig, mirror) = (f.image(0), f.image(1));
        for r in 0..d1 {
            for col in 0..d2 {
                for ch in 0..c {
                    assert_eq!(
                        mirror[(r * d2 + col) * c + ch],
                        orig[(r * d2 + (d2 - 1 - col)) * c + ch]
                    );
                }
            }
        }
    }

    #[test]
    fn padding_centres_and_keeps_mass() {
        let ds = random_images(2, (28, 28), 1, 7);
        let p = pad_to(&ds, (32, 32)).unwrap();
        assert_eq!(p.spatial(), (32, 32));
        assert_eq!(p.image(0)[0], 0.0);
        assert_eq!(p.image(0)[2 * 32 + 2], ds.image(0)[0]);
        let s0: f64 = ds.pixels().iter().map(|&v| v as f64).sum();
        let s1: f64 = p.pixels().iter().map(|&v| v as f64).sum();
        assert!((s0 - s1).abs() < 1e-9);
        assert_eq!(pad_to(&ds, (28, 28)).unwrap(), ds);
        assert!(matches!(
            pad_to(&ds, (27, 30)),
            Err(DataError::PadTooSmall { .. })
        ));
        // Odd margin: the extra row/column goes after the image.
        let odd = pad_to(&random_images(1, (1, 1), 1, 8), (4, 4)).unwrap();
        assert_ne!(odd.image(0)[4 + 1], 0.0);
    }

    #[test]
    fn balanced_subsample_contract() {
        let pixels = vec![0.0f32; 100];
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let ds = ImageDataset::new(pixels, (1, 1), 1, labels, 10, "ten").unwrap();
        let one_each = subsample_balanced(&ds, 10, 0).unwrap();
        let mut hist = [0usize; 10];
        one_each.labels().iter().for_each(|&l| hist[l] += 1);
        assert_eq!(hist, [1; 10]);
        let a = subsample_balanced(&ds, 50, 3).unwrap();
        let b = subsample_balanced(&ds, 50, 3).unwrap();
        assert_eq!(a, b);
        let mut hist = [0usize; 10];
        a.labels().iter().for_each(|&l| hist[l] += 1);
        assert_eq!(hist, [5; 10]);
        assert!(matches!(
            subsample_balanced(&ds, 15, 0),
            Err(DataError::Indivisible { .. })
        ));
        assert!(matches!(
            subsample_balanced(&ds, 110, 0),
            Err(DataError::InsufficientClass { .. })
        ));
    }
    #[test]
    fn zca_paths_agree_and_survive_constant_features() {
        // 6 images of 2x2x1 padded to 4x4: border features are constant 0.
        let ds = pad_to(&random_images(6, (2, 2), 1, 31), (4, 4)).unwrap();
        let x = {
            let t = zca_fit(&ds, Some(1e-3)).unwrap();
            let n = ds.len();
            let d = ds.feature_dim();
            let mut x = DMatrix::<f64>::from_row_slice(n, d, &ds.to_rows());
            for (j, m) in t.mean.iter().enumerate() {
                x.column_mut(j).add_scalar_mut(-m);
            }
            x
        };
        let scale = |l: f64| (l.max(0.0) + 1e-3).powf(-0.5);
        let (wg, eg) = gram_spectrum(&x, 5.0, &scale).unwrap();
        let (wc, ec) = covariance_spectrum(&x, 5.0, &scale).unwrap();
        assert!((&wg - &wc).amax() < 1e-8, "{}", (&wg - &wc).amax());
        let (mut eg, mut ec) = (eg, ec);
        eg.sort_by(f64::total_cmp);
        ec.sort_by(f64::total_cmp);
        for (a, b) in eg.iter().zip(&ec) {
            assert!((a - b).abs() < 1e-9);
        }
        let t = zca_fit(&ds, None).unwrap();
        assert!(t.whitening.iter().all(|v| v.is_finite()));
    }
}

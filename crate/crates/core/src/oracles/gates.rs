//! Pass/fail checks that pit the implementation against the oracles. Each
//! gate takes what it tests as an argument so that a deliberately broken
//! implementation can be shown to fail it.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arch::{ArchSpec, Layer};
use crate::data::ImageDataset;
use crate::engine::{compose_kernel, ComposeOptions, GramMatrix};
use crate::kernel::{self, KernelBlock};
use crate::regression::{loo_predict, one_hot};
use crate::rng;

use super::{
    brute_loo, closed_form_relu_conv, fraction_within, mean_std_error, naive_compose,
    quad_dual_gauss, quad_dual_relu, rho_grid, McRun,
};

/// Outcome of one gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl GateReport {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Something that computes a Gram matrix the way the engine does.
pub type EngineFn<'a> =
    dyn Fn(&ImageDataset, &ImageDataset, &ArchSpec) -> Result<GramMatrix, String> + Sync + 'a;

/// The real engine with fixed tile and thread counts.
pub fn engine_with(
    tile: usize,
    threads: usize,
) -> impl Fn(&ImageDataset, &ImageDataset, &ArchSpec) -> Result<GramMatrix, String> + Sync {
    move |a, b, arch| {
        let opts = ComposeOptions {
            tile: Some(tile),
            threads: Some(threads),
            ..Default::default()
        };
        compose_kernel(a, b, arch, &opts)
            .map(|(g, _)| g)
            .map_err(|e| e.to_string())
    }
}

/// `max |a - b| / max |b|`.
pub fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gap = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale > 0.0 {
        gap / scale
    } else {
        gap
    }
}

fn random_images(r: &mut ChaCha8Rng, n: usize, spatial: (usize, usize), c: usize) -> ImageDataset {
    let count = n * spatial.0 * spatial.1 * c;
    let pixels: Vec<f32> = (0..count)
        .map(|_| StandardNormal.sample(r))
        .map(|v: f64| v as f32)
        .collect();
    let labels = (0..n).map(|_| r.random_range(0..3)).collect();
    ImageDataset::new(pixels, spatial, c, labels, 3, "random").expect("valid random images")
}

/// Random layer list that reduces `spatial` to 1x1.
pub fn random_arch(r: &mut ChaCha8Rng, spatial: (usize, usize), max_layers: usize) -> ArchSpec {
    let mut dims = spatial;
    let mut layers = Vec::new();
    let count = r.random_range(1..=max_layers);
    for _ in 0..count {
        let pools: Vec<usize> = (2..=dims.0.min(dims.1))
            .filter(|w| dims.0.is_multiple_of(*w) && dims.1.is_multiple_of(*w))
            .collect();
        let layer = match r.random_range(0..5) {
            0 => Layer::conv(3),
            1 => Layer::conv(if r.random_bool(0.5) { 3 } else { 5 }),
            2 => Layer::ReluEmbed,
            3 => Layer::GaussEmbed,
            _ if !pools.is_empty() => Layer::pool(pools[r.random_range(0..pools.len())]),
            _ => Layer::ReluEmbed,
        };
        if let Layer::Pool { width } = layer {
            dims = (dims.0 / width, dims.1 / width);
        }
        layers.push(layer);
    }
    if dims != (1, 1) {
        layers.push(Layer::GlobalPool);
    }
    ArchSpec::new("random", layers)
}

/// A random (arch, rows, columns) triple within the reference limits. About
/// half the cases pair a dataset with itself.
pub fn random_case(
    seed: u64,
    max_images: usize,
    max_side: usize,
) -> (ArchSpec, ImageDataset, ImageDataset) {
    let mut r = rng::stream(seed, rng::streams::VERIFY);
    let sides: Vec<usize> = (1..=max_side).collect();
    let spatial = (
        sides[r.random_range(0..sides.len())],
        sides[r.random_range(0..sides.len())],
    );
    let c = r.random_range(1..=3);
    let n_a = r.random_range(1..=max_images);
    let a = random_images(&mut r, n_a, spatial, c);
    let b = if r.random_bool(0.5) {
        a.clone()
    } else {
        let n_b = r.random_range(1..=max_images);
        random_images(&mut r, n_b, spatial, c)
    };
    let arch = random_arch(&mut r, spatial, 6);
    (arch, a, b)
}

/// Tolerance of the engine-vs-reference comparison (relative to the largest
/// reference entry).
pub const NAIVE_TOLERANCE: f64 = 1e-5;

/// Engine equals the naive reference on `cases` random instances.
pub fn naive_gate(engine: &EngineFn, cases: usize, seed: u64) -> GateReport {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..cases as u64 {
        let (arch, a, b) = random_case(seed.wrapping_add(case), 6, 8);
        let reference = match naive_compose(&a, &b, &arch) {
            Ok(g) => g,
            Err(e) => {
                failures.push(format!("case {case}: reference failed: {e}"));
                continue;
            }
        };
        match engine(&a, &b, &arch) {
            Ok(g) if g.rows() == reference.rows() && g.cols() == reference.cols() => {
                let gap = relative_gap(g.values(), reference.values());
                worst = worst.max(gap);
                if !(gap <= NAIVE_TOLERANCE) {
                    failures.push(format!(
                        "case {case} [{}]: gap {gap:.2e}",
                        arch.render().trim().replace('\n', "; ")
                    ));
                }
            }
            Ok(g) => failures.push(format!("case {case}: shape {}x{}", g.rows(), g.cols())),
            Err(e) => failures.push(format!("case {case}: engine failed: {e}")),
        }
    }
    let detail = if failures.is_empty() {
        format!("{cases} cases, worst relative gap {worst:.2e}")
    } else {
        format!(
            "{} of {cases} cases failed: {}",
            failures.len(),
            failures.join(", ")
        )
    };
    GateReport::new("engine-vs-naive", failures.is_empty(), detail)
}

/// Engine output is bitwise identical across tile sizes and thread counts.
pub fn tiling_gate(cases: usize, seed: u64) -> GateReport {
    let mut failures = Vec::new();
    for case in 0..cases as u64 {
        let (arch, a, b) = random_case(seed.wrapping_add(case), 6, 8);
        let base = match engine_with(1, 1)(&a, &b, &arch) {
            Ok(g) => g,
            Err(e) => {
                failures.push(format!("case {case}: {e}"));
                continue;
            }
        };
        for tile in [1, 2, 5] {
            for threads in [1, 4] {
                match engine_with(tile, threads)(&a, &b, &arch) {
                    Ok(g) if g.values() == base.values() => {}
                    Ok(_) => failures.push(format!(
                        "case {case}: tile {tile}, threads {threads} differ"
                    )),
                    Err(e) => failures.push(format!("case {case}: {e}")),
                }
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("{cases} cases x tile {{1,2,5}} x threads {{1,4}} bitwise identical")
    } else {
        failures.join(", ")
    };
    GateReport::new("tile-thread-invariance", failures.is_empty(), detail)
}

/// Worst closed-form vs quadrature gap over the rho grid, for both duals.
pub fn quadrature_gate() -> GateReport {
    let mut worst_relu = 0.0f64;
    let mut worst_gauss = 0.0f64;
    for rho in rho_grid() {
        worst_relu = worst_relu.max((kernel::relu_dual(rho) - quad_dual_relu(rho)).abs());
        worst_gauss = worst_gauss.max((kernel::gauss_dual(rho) - quad_dual_gauss(rho)).abs());
    }
    GateReport::new(
        "dual-quadrature",
        worst_relu <= 1e-4 && worst_gauss <= 1e-4,
        format!("max |closed - quadrature|: relu {worst_relu:.2e}, gauss {worst_gauss:.2e}"),
    )
}

fn random_spd(r: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(r));
    let m = &a * a.transpose() / n as f64;
    (&m + m.transpose()) * 0.5
}

/// Closed-form LOO equals brute-force refits on random SPD systems.
pub fn loo_gate(sizes: &[usize], lambdas: &[f64], systems: usize, seed: u64) -> GateReport {
    let mut r = rng::stream(seed, rng::streams::VERIFY);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for s in 0..systems {
        for &n in sizes {
            let k = random_spd(&mut r, n);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
            let y = one_hot(&labels, 3);
            let g = GramMatrix::from_dmatrix(&k, true).expect("finite SPD matrix");
            for &lambda in lambdas {
                let closed = loo_predict(&g, &y, lambda).map(|l| l.y_loo);
                let brute = brute_loo(&k, &y, lambda);
                match (closed, brute) {
                    (Ok(c), Ok(b)) => {
                        let gap = (c - b).abs().max();
                        worst = worst.max(gap);
                        if !(gap <= 1e-8) {
                            failures.push(format!("system {s}, N {n}, lambda {lambda}: {gap:.2e}"));
                        }
                    }
                    (c, b) => failures.push(format!(
                        "system {s}, N {n}, lambda {lambda}: {:?} / {:?}",
                        c.err(),
                        b.err()
                    )),
                }
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("max |closed - brute| {worst:.2e}")
    } else {
        failures.join(", ")
    };
    GateReport::new("loo-closed-form", failures.is_empty(), detail)
}

/// Monte-Carlo random networks against the conv + relu closed form; with
/// `quadruple`, the standard error must also halve (+-20%) at 4x trials.
pub fn mc_gate(trials: usize, width: usize, quadruple: bool, seed: u64) -> GateReport {
    let mut r = rng::stream(seed, rng::streams::VERIFY);
    let images = random_images(&mut r, 4, (6, 6), 3);
    let exact = match closed_form_relu_conv(&images, 1) {
        Ok(v) => v,
        Err(e) => return GateReport::new("random-features", false, e.to_string()),
    };
    let mut run = match McRun::new(&images, 1, width, seed) {
        Ok(run) => run,
        Err(e) => return GateReport::new("random-features", false, e.to_string()),
    };
    if let Err(e) = run.extend(trials) {
        return GateReport::new("random-features", false, e.to_string());
    }
    let est = run.estimates();
    let within = fraction_within(&est, &exact, 4.0);
    let se = mean_std_error(&est);
    let mut passed = within >= 0.95;
    let mut detail = format!(
        "{} entries, {:.2}% within 4 SE at {trials} trials (mean SE {se:.3e})",
        exact.len(),
        100.0 * within
    );
    if quadruple {
        if let Err(e) = run.extend(3 * trials) {
            return GateReport::new("random-features", false, e.to_string());
        }
        let est4 = run.estimates();
        let ratio = mean_std_error(&est4) / se;
        let within4 = fraction_within(&est4, &exact, 4.0);
        passed &= (0.4..=0.6).contains(&ratio) && within4 >= 0.95;
        detail.push_str(&format!(
            "; at {} trials {:.2}% within, SE ratio {ratio:.3}",
            4 * trials,
            100.0 * within4
        ));
    }
    GateReport::new("random-features", passed, detail)
}

/// `(N D1 D2) x (N D1 D2)` view of a self block.
fn block_matrix(block: &KernelBlock) -> DMatrix<f64> {
    let side = block.rows() * block.spatial().0 * block.spatial().1;
    DMatrix::from_row_slice(
        side,
        side,
        &block.values().iter().map(|&v| v as f64).collect::<Vec<_>>(),
    )
}

/// Checks one self block: symmetry, PSD and Cauchy-Schwarz.
fn check_block(block: &KernelBlock, what: &str) -> Result<(), String> {
    let m = block_matrix(block);
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let asym = (&m - m.transpose()).abs().max();
    if asym > 1e-5 * scale.max(f64::MIN_POSITIVE) {
        return Err(format!("{what}: asymmetry {asym:.2e}"));
    }
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let norm = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.min();
    if min < -1e-6 * norm {
        return Err(format!(
            "{what}: min eigenvalue {min:.3e} (norm {norm:.3e})"
        ));
    }
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let bound = (m[(r, r)].max(0.0) * m[(c, c)].max(0.0)).sqrt() + 1e-5 * scale;
            if m[(r, c)].abs() > bound {
                return Err(format!("{what}: Cauchy-Schwarz fails at ({r}, {c})"));
            }
        }
    }
    Ok(())
}

/// Per-layer PSD, symmetry and embedding diagonal preservation on tiny
/// random instances (`N <= 4`, spatial `<= 4x4`).
pub fn property_gate(cases: usize, seed: u64) -> GateReport {
    let mut failures = Vec::new();
    for case in 0..cases as u64 {
        let (arch, a, _) = random_case(seed.wrapping_add(case), 4, 4);
        if let Err(e) = check_properties(&a, &arch) {
            failures.push(format!("case {case}: {e}"));
        }
    }
    let detail = if failures.is_empty() {
        format!("{cases} instances, 0 violations")
    } else {
        format!("{} violations: {}", failures.len(), failures.join(", "))
    };
    GateReport::new("kernel-properties", failures.is_empty(), detail)
}

/// Runs `arch` on the full self block of `images`, checking every stage.
pub fn check_properties(images: &ImageDataset, arch: &ArchSpec) -> Result<(), String> {
    let all = images.batch(0..images.len());
    let mut block = kernel::input_kernel(&all, &all).map_err(|e| e.to_string())?;
    check_block(&block, "input")?;
    for (idx, layer) in arch.layers.iter().enumerate() {
        let what = format!("layer {} ({layer})", idx + 1);
        let next = if layer.is_embedding() {
            let d = kernel::update_diag(&block).map_err(|e| e.to_string())?;
            let out =
                kernel::apply_layer(&block, layer, Some((&d, &d))).map_err(|e| e.to_string())?;
            let (before, after) = (block.diagonal().unwrap(), out.diagonal().unwrap());
            for (x, y) in before.iter().zip(&after) {
                if (x.max(0.0) - y).abs() > 1e-6 * x.abs().max(1e-30) {
                    return Err(format!("{what}: diagonal {x} became {y}"));
                }
            }
            out
        } else {
            kernel::apply_layer(&block, layer, None).map_err(|e| e.to_string())?
        };
        check_block(&next, &what)?;
        block = next;
    }
    Ok(())
}

/// How much of the suite to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyLevel {
    /// Seconds: reduced case counts.
    Quick,
    /// Minutes: the full acceptance settings.
    Full,
}

/// Every gate at the given level, with `engine` as the implementation under
/// test for the reference comparison.
pub fn run_suite(level: VerifyLevel, engine: &EngineFn, seed: u64) -> Vec<GateReport> {
    match level {
        VerifyLevel::Quick => vec![
            quadrature_gate(),
            loo_gate(&[10], &[0.01, 1.0], 2, seed),
            property_gate(10, seed),
            naive_gate(engine, 5, seed),
            mc_gate(256, 64, false, seed),
        ],
        VerifyLevel::Full => vec![
            quadrature_gate(),
            loo_gate(&[10, 30], &[0.01, 1.0], 10, seed),
            property_gate(100, seed),
            naive_gate(engine, 25, seed),
            tiling_gate(5, seed),
            mc_gate(4096, 256, true, seed),
        ],
    }
}

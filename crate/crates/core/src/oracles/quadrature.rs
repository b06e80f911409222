//! Two-dimensional quadrature of `E[s(X) s(Y)]` for standard normals with
//! correlation `rho`.
//!
//! Smooth activations use a tensor-product Gauss-Hermite rule. The ReLU is
//! kinked along `X = 0` and `Y = 0`, where a Hermite rule converges only
//! like `1/n`; its dual is integrated in polar coordinates instead, with a
//! Gauss-Laguerre rule along the radius and Gauss-Legendre rules on each
//! angular arc between kinks.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes per axis.
pub const QUAD_NODES: usize = 64;

/// Golub-Welsch: nodes and weights from the Jacobi matrix of a three-term
/// recurrence with total weight `mu0`.
fn golub_welsch(diag: &[f64], off: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let jacobi = DMatrix::from_fn(n, n, |r, c| match r.abs_diff(c) {
        0 => diag[r],
        1 => off[r.min(c)],
        _ => 0.0,
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Rule for `int exp(-x^2) f(x) dx` over the real line.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let off: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    golub_welsch(&vec![0.0; n], &off, PI.sqrt())
}

/// Rule for `int_0^inf exp(-u) f(u) du`.
pub fn gauss_laguerre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let diag: Vec<f64> = (0..n).map(|k| (2 * k + 1) as f64).collect();
    let off: Vec<f64> = (1..n).map(|k| k as f64).collect();
    golub_welsch(&diag, &off, 1.0)
}

/// Rule for `int_{-1}^{1} f(x) dx`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&vec![0.0; n], &off, 2.0)
}

/// Tensor-product Gauss-Hermite estimate with
/// `X = Z1`, `Y = rho Z1 + sqrt(1 - rho^2) Z2`.
pub fn quad_dual(rho: f64, nodes: usize, s: impl Fn(f64) -> f64) -> f64 {
    let rho = rho.clamp(-1.0, 1.0);
    let (x, w) = gauss_hermite(nodes);
    let tail = (1.0 - rho * rho).max(0.0).sqrt();
    let root2 = std::f64::consts::SQRT_2;
    let mut acc = 0.0;
    for (&xi, &wi) in x.iter().zip(&w) {
        let z1 = root2 * xi;
        let sx = s(z1);
        if sx == 0.0 {
            continue;
        }
        let inner: f64 = x
            .iter()
            .zip(&w)
            .map(|(&xj, &wj)| wj * s(rho * z1 + tail * root2 * xj))
            .sum();
        acc += wi * sx * inner;
    }
    acc / PI
}

/// Polar-coordinate estimate. With `(Z1, Z2) = r (cos phi, sin phi)`,
/// `X = r cos phi` and `Y = r cos(phi - theta)` where `cos theta = rho`.
/// The angle is split wherever `X` or `Y` changes sign.
pub fn quad_dual_polar(rho: f64, nodes: usize, s: impl Fn(f64) -> f64) -> f64 {
    let theta = rho.clamp(-1.0, 1.0).acos();
    let (u, wu) = gauss_laguerre(nodes);
    let (t, wt) = gauss_legendre(nodes);
    let tau = 2.0 * PI;
    let mut cuts: Vec<f64> = [PI / 2.0, 1.5 * PI, theta + PI / 2.0, theta + 1.5 * PI]
        .iter()
        .map(|c| c.rem_euclid(tau))
        .collect();
    cuts.push(0.0);
    cuts.push(tau);
    cuts.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    for arc in cuts.windows(2) {
        let (a, b) = (arc[0], arc[1]);
        if b - a < 1e-15 {
            continue;
        }
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for (&ti, &wi) in t.iter().zip(&wt) {
            let phi = mid + half * ti;
            let (cx, cy) = (phi.cos(), (phi - theta).cos());
            // int_0^inf r exp(-r^2/2) g(r) dr with u = r^2 / 2.
            let radial: f64 = u
                .iter()
                .zip(&wu)
                .map(|(&uj, &wj)| {
                    let r = (2.0 * uj).sqrt();
                    wj * s(r * cx) * s(r * cy)
                })
                .sum();
            acc += half * wi * radial;
        }
    }
    acc / tau
}

/// ReLU scaled by `sqrt 2` so that `E[s(X)^2] = 1`.
pub fn normalized_relu(x: f64) -> f64 {
    std::f64::consts::SQRT_2 * x.max(0.0)
}

/// `exp(x - 1)`, whose dual is `exp(rho - 1)`.
pub fn normalized_gauss_feature(x: f64) -> f64 {
    (x - 1.0).exp()
}

pub fn quad_dual_relu(rho: f64) -> f64 {
    quad_dual_polar(rho, QUAD_NODES, normalized_relu)
}

pub fn quad_dual_gauss(rho: f64) -> f64 {
    quad_dual(rho, QUAD_NODES, normalized_gauss_feature)
}

/// `rho` in `{-1.0, -0.9, ..., 1.0}`.
pub fn rho_grid() -> Vec<f64> {
    (-10..=10).map(|i| i as f64 / 10.0).collect()
}

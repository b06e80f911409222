//! Independent reference implementations used to check the kernel code:
//! random-feature networks, Gauss-Hermite quadrature of dual activations,
//! a whole-tensor loop pipeline and brute-force leave-one-out.

mod gates;
mod loo;
mod mc;
mod naive;
mod quadrature;

use thiserror::Error;

use crate::kernel::KernelError;

pub use gates::{
    check_properties, engine_with, loo_gate, mc_gate, naive_gate, property_gate, quadrature_gate,
    random_arch, random_case, relative_gap, run_suite, tiling_gate, EngineFn, GateReport,
    VerifyLevel, NAIVE_TOLERANCE,
};
pub use loo::{brute_loo, BRUTE_LOO_MAX};
pub use mc::{
    closed_form_relu_conv, fraction_within, mc_relu_conv, mean_std_error, McEstimate, McRun,
    MC_MAX_SIDE, MC_MAX_WORK,
};
pub use naive::{
    naive_compose, naive_conv, naive_input, naive_layer, naive_pool, naive_tensor, Tensor6,
    NAIVE_MAX_POSITIONS,
};
pub use quadrature::{
    gauss_hermite, gauss_laguerre, gauss_legendre, normalized_gauss_feature, normalized_relu,
    quad_dual, quad_dual_gauss, quad_dual_polar, quad_dual_relu, rho_grid, QUAD_NODES,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle input: {0}")]
    Invalid(String),
    #[error("submatrix without example {left_out} is singular")]
    Singular { left_out: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

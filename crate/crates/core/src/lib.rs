//! Compositional convolutional kernels computed exactly on image pairs,
//! kernel ridge regression on top of them, evaluation statistics and the
//! numerical oracles used to check all of it.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod binio;
pub mod data;
pub mod engine;
pub mod evaluation;
pub mod kernel;
pub mod oracles;
pub mod regression;
pub mod rng;

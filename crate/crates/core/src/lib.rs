//! Minimum density power divergence estimation for Gaussian linear mixed
//! models.
//!
//! The crate is `no_std` with `alloc`. It covers the objective and its
//! gradient, the fitting routines, sandwich asymptotics, influence functions
//! and sensitivities, and the data generators and loss measures used in
//! simulation studies. File formats, the CLI and the parallel study driver
//! live in the `mdpde` crate.

#![no_std]
// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod asymptotics;
pub mod divergence;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod model;
mod optim;
pub mod robustness;
pub mod simulation;

pub use divergence::{eval_objective, eval_weights, DpdConfig, ObjectiveEval};
pub use error::{Error, Result};
pub use estimator::{fit, fit_alpha_path, fit_balanced_fixed_point, initial_theta, FitResult, SolverConfig};
pub use model::{assemble_covariances, GroupBlock, GroupedDesign, ThetaParams};
pub use asymptotics::{are_curve, asymptotic_info, wald_tests, AsymptoticInfo, WaldTest};
pub use robustness::{influence_all, influence_beta, influence_sigma, sensitivities, Sensitivity, SensitivityReport};

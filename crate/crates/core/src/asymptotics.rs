//! Sandwich asymptotics `avar = Psi_n^-1 Omega_n Psi_n^-1 / n`.
//!
//! With `A_j = V_i^-1 U_ij`, `t_j = tr(A_j)`, `T(c) = c a^2 t_j t_k + 2 tr(A_j A_k)`
//! and `eta_i = (2 pi)^(-n_i a/2) |V_i|^(-a/2)`, each group contributes
//!
//! ```text
//! Psi_11   += eta   X^T V^-1 X / (1+a)^(n_i/2+1)
//! Psi_22   += eta/4 T(1) / (1+a)^(n_i/2+2)
//! Omega_11 += eta^2 X^T V^-1 X / (1+2a)^(n_i/2+1)
//! Omega_22 += eta^2/4 [T(4) / (1+2a)^(n_i/2+2) - a^2 t_j t_k / (1+a)^(n_i+2)]
//! ```
//!
//! and both are divided by `n`. The mixed `(beta, sigma2)` blocks vanish.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::divergence::{log_eta, DpdConfig};
use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::linalg::{spd_inverse, symmetrize, trace_of_product, two_sided_normal_p};
use crate::model::{assemble_covariances, GroupedDesign, ThetaParams};

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticInfo {
    pub alpha: f64,
    pub psi_n: DMatrix<f64>,
    pub omega_n: DMatrix<f64>,
    /// Covariance of `theta_hat`. Rows and columns of boundary components are zero.
    pub avar: DMatrix<f64>,
    /// `None` for components on the boundary.
    pub se: Vec<Option<f64>>,
    /// `sum_i eta_i X_i^T V_i^-1 X_i / (1+a)^(n_i/2+1)`.
    pub x_prime_gram: DMatrix<f64>,
    /// `sum_i eta_i^2 X_i^T V_i^-1 X_i / (1+2a)^(n_i/2+1)`.
    pub x_star_gram: DMatrix<f64>,
    /// Indices (into the flat parameter vector) of variance components fixed at
    /// zero and excluded from the inversion.
    pub boundary: Vec<usize>,
}

impl AsymptoticInfo {
    pub fn is_boundary(&self) -> bool {
        !self.boundary.is_empty()
    }
}

fn t_form(c: f64, alpha: f64, ti: f64, tk: f64, trab: f64) -> f64 {
    c * alpha * alpha * ti * tk + 2.0 * trab
}

/// Evaluates `Psi_n`, `Omega_n` and the sandwich covariance at `theta`.
///
/// Variance components `sigma_j^2 = 0` (`j >= 1`) are treated as known: their
/// rows and columns are dropped before inverting and listed in `boundary`.
pub fn asymptotic_info(design: &GroupedDesign, theta: &ThetaParams, cfg: DpdConfig) -> Result<AsymptoticInfo> {
    let covs = assemble_covariances(design, theta)?;
    let k = design.k();
    let m = design.r() + 1;
    let dim = k + m;
    let a = cfg.alpha;
    let n = design.n_groups() as f64;

    // per class: A_j and the trace tables
    let class_tables: Vec<(Vec<f64>, DMatrix<f64>)> = (0..design.n_classes())
        .map(|c| {
            let cov = &covs.classes()[c];
            let rep = (0..design.n_groups()).find(|&i| design.class_of(i) == c).unwrap_or(0);
            let aj: Vec<DMatrix<f64>> = design.u(rep).iter().map(|u| cov.v_inv() * u).collect();
            let mut tt = DMatrix::zeros(m, m);
            for j in 0..m {
                for l in j..m {
                    let v = trace_of_product(&aj[j], &aj[l]);
                    tt[(j, l)] = v;
                    tt[(l, j)] = v;
                }
            }
            (cov.traces().to_vec(), tt)
        })
        .collect();

    let mut psi = DMatrix::<f64>::zeros(dim, dim);
    let mut omega = DMatrix::<f64>::zeros(dim, dim);
    let mut x_prime = DMatrix::<f64>::zeros(k, k);
    let mut x_star = DMatrix::<f64>::zeros(k, k);
    for i in 0..design.n_groups() {
        let g = design.group(i);
        let cov = covs.group(i);
        let ni = g.len() as f64;
        let eta = libm::exp(log_eta(g.len(), cov.logdet(), a));
        let (t, tt) = &class_tables[design.class_of(i)];
        let xvx = symmetrize(&(g.x().tr_mul(cov.v_inv()) * g.x()));

        let p1 = eta / libm::pow(1.0 + a, 0.5 * ni + 1.0);
        let o1 = eta * eta / libm::pow(1.0 + 2.0 * a, 0.5 * ni + 1.0);
        x_prime += &xvx * p1;
        x_star += &xvx * o1;

        let p2 = 0.25 * eta / libm::pow(1.0 + a, 0.5 * ni + 2.0);
        let o2 = 0.25 * eta * eta / libm::pow(1.0 + 2.0 * a, 0.5 * ni + 2.0);
        let o2xi = 0.25 * eta * eta * a * a / libm::pow(1.0 + a, ni + 2.0);
        for j in 0..m {
            for l in j..m {
                let pv = p2 * t_form(1.0, a, t[j], t[l], tt[(j, l)]);
                let ov = o2 * t_form(4.0, a, t[j], t[l], tt[(j, l)]) - o2xi * t[j] * t[l];
                psi[(k + j, k + l)] += pv;
                omega[(k + j, k + l)] += ov;
                if l != j {
                    psi[(k + l, k + j)] += pv;
                    omega[(k + l, k + j)] += ov;
                }
            }
        }
    }
    psi.view_mut((0, 0), (k, k)).copy_from(&x_prime);
    omega.view_mut((0, 0), (k, k)).copy_from(&x_star);
    psi /= n;
    omega /= n;

    let boundary: Vec<usize> = (1..m).filter(|&j| theta.sigma2[j] == 0.0).map(|j| k + j).collect();
    let keep: Vec<usize> = (0..dim).filter(|ix| !boundary.contains(ix)).collect();
    let sub = |mat: &DMatrix<f64>| DMatrix::from_fn(keep.len(), keep.len(), |a, b| mat[(keep[a], keep[b])]);
    let psi_inv = spd_inverse(&sub(&psi)).ok_or(Error::SingularPsi)?;
    let avar_sub = symmetrize(&(&psi_inv * sub(&omega) * &psi_inv)) / n;

    let mut avar = DMatrix::zeros(dim, dim);
    for (a_ix, &ra) in keep.iter().enumerate() {
        for (b_ix, &rb) in keep.iter().enumerate() {
            avar[(ra, rb)] = avar_sub[(a_ix, b_ix)];
        }
    }
    let se = (0..dim)
        .map(|ix| {
            if boundary.contains(&ix) {
                None
            } else {
                Some(libm::sqrt(avar[(ix, ix)].max(0.0)))
            }
        })
        .collect();

    Ok(AsymptoticInfo {
        alpha: a,
        psi_n: psi,
        omega_n: omega,
        avar,
        se,
        x_prime_gram: x_prime,
        x_star_gram: x_star,
        boundary,
    })
}

/// Asymptotic relative efficiency `100 avar_0[j,j] / avar_a[j,j]` at a fixed
/// `theta` for every `alpha` in the grid.
pub fn are_curve(design: &GroupedDesign, theta: &ThetaParams, alphas: &[f64], param_index: usize) -> Result<Vec<f64>> {
    if param_index >= design.n_params() {
        return Err(Error::InvalidConfig(alloc::format!(
            "parameter index {param_index} out of range for {} parameters",
            design.n_params()
        )));
    }
    let base = asymptotic_info(design, theta, DpdConfig::new(0.0)?)?.avar[(param_index, param_index)];
    alphas
        .iter()
        .map(|&a| {
            if a == 0.0 {
                return Ok(100.0);
            }
            let v = asymptotic_info(design, theta, DpdConfig::new(a)?)?.avar[(param_index, param_index)];
            Ok(100.0 * base / v)
        })
        .collect()
}

/// Per-parameter Wald test of `theta_j = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldTest {
    pub estimate: f64,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    /// Variance component estimated at zero: the normal reference does not apply.
    pub boundary: bool,
}

impl WaldTest {
    pub fn new(estimate: f64, se: f64) -> Self {
        let z = if estimate == 0.0 { 0.0 } else { estimate / se };
        Self {
            estimate,
            se: Some(se),
            z: Some(z),
            p_value: Some(two_sided_normal_p(z)),
            boundary: false,
        }
    }

    fn on_boundary(estimate: f64) -> Self {
        Self {
            estimate,
            se: None,
            z: None,
            p_value: None,
            boundary: true,
        }
    }
}

/// Wald statistics for every entry of `(beta, sigma2)`.
pub fn wald_tests(fit: &FitResult, info: &AsymptoticInfo) -> Vec<WaldTest> {
    let k = fit.theta_hat.beta.len();
    fit.theta_hat
        .to_vec()
        .into_iter()
        .enumerate()
        .map(|(ix, est)| {
            let boundary = ix > k && est == 0.0;
            match info.se.get(ix).copied().flatten() {
                Some(se) if !boundary => WaldTest::new(est, se),
                _ => WaldTest::on_boundary(est),
            }
        })
        .collect()
}

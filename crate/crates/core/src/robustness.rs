//! Influence functions and sensitivity measures of the estimating functional.
//!
//! For contamination of group `i0` at the point `t`, with `r = t - X_i0 beta`,
//! `f^a = eta exp(-a r^T V^-1 r / 2)`, `s_j = r^T V^-1 U_j V^-1 r` and
//! `t_j = tr(V^-1 U_j)`:
//!
//! ```text
//! IF_beta  = (X'^T X')^-1 X_i0^T V^-1 r f^a
//! IF_sigma = M^-1 [ f^a (s_j - t_j) / 2 + eta a t_j / (2 (1+a)^(n_i0/2+1)) ]
//! M_jk     = sum_i eta_i T(A_j, A_k) / (4 (1+a)^(n_i/2+2))
//! ```
//!
//! `IF_sigma` has the sign of the derivative of the functional: for `a = 0`,
//! scalar groups and no random factors it reduces to `(r^2 - sigma^2) / n`.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::divergence::{log_eta, DpdConfig};
use crate::error::{Error, Result};
use crate::linalg::{max_eigenvalue, max_generalized_eigenvalue, spd_inverse, symmetrize, trace_of_product};
use crate::model::{assemble_covariances, CovarianceSet, GroupedDesign, ThetaParams};

/// A sensitivity value, infinite for the maximum likelihood case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sensitivity {
    Finite(f64),
    Infinite,
}

impl Sensitivity {
    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Finite(v) => Some(*v),
            Self::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Self::Infinite)
    }
}

impl fmt::Display for Sensitivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(v) => write!(f, "{v}"),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

/// The same sensitivities evaluated through the common-covariance closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalancedSensitivities {
    pub ges: Sensitivity,
    pub sss: Sensitivity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub alpha: f64,
    /// Gross-error sensitivity of the fixed-effect functional.
    pub ges: Sensitivity,
    /// Self-standardized sensitivity of the fixed-effect functional.
    pub sss: Sensitivity,
    /// Contaminated group (0-based).
    pub direction: usize,
    /// `1 / (p + 1)` for balanced designs with group size `p`.
    pub alpha_star: Option<f64>,
    /// `2 / p` for balanced designs with group size `p`.
    pub alpha_bar: Option<f64>,
    pub balanced: Option<BalancedSensitivities>,
}

/// `(1+a)^(p/2+1) / sqrt(a)`, minimized at `a = 1/(p+1)`.
pub fn ges_alpha_factor(alpha: f64, p: usize) -> f64 {
    libm::pow(1.0 + alpha, 0.5 * p as f64 + 1.0) / libm::sqrt(alpha)
}

/// `(1+a)^((p+2)/4) / sqrt(a)`, minimized at `a = 2/p`.
pub fn sss_alpha_factor(alpha: f64, p: usize) -> f64 {
    libm::pow(1.0 + alpha, (p as f64 + 2.0) / 4.0) / libm::sqrt(alpha)
}

fn check_direction(design: &GroupedDesign, i0: usize, t: &DVector<f64>) -> Result<()> {
    if i0 >= design.n_groups() {
        return Err(Error::InvalidConfig(alloc::format!(
            "direction {i0} out of range for {} groups",
            design.n_groups()
        )));
    }
    if t.len() != design.group(i0).len() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "contamination point has length {}, group {i0} has {} observations",
            t.len(),
            design.group(i0).len()
        )));
    }
    Ok(())
}

fn eta(design: &GroupedDesign, covs: &CovarianceSet, i: usize, alpha: f64) -> f64 {
    libm::exp(log_eta(design.group(i).len(), covs.group(i).logdet(), alpha))
}

/// `sum_i w(eta_i, n_i) X_i^T V_i^-1 X_i`.
fn weighted_gram(design: &GroupedDesign, covs: &CovarianceSet, alpha: f64, w: impl Fn(f64, f64) -> f64) -> DMatrix<f64> {
    let k = design.k();
    let mut out = DMatrix::zeros(k, k);
    for i in 0..design.n_groups() {
        let g = design.group(i);
        let xvx = g.x().tr_mul(covs.group(i).v_inv()) * g.x();
        out += xvx * w(eta(design, covs, i, alpha), g.len() as f64);
    }
    symmetrize(&out)
}

fn x_prime_gram(design: &GroupedDesign, covs: &CovarianceSet, alpha: f64) -> DMatrix<f64> {
    weighted_gram(design, covs, alpha, |e, n| e / libm::pow(1.0 + alpha, 0.5 * n + 1.0))
}

/// Gram matrix standardizing the self-standardized sensitivity,
/// `sum_i eta_i^2 X_i^T V_i^-1 X_i / (1+a)^(n_i/2+1)`.
fn sss_gram(design: &GroupedDesign, covs: &CovarianceSet, alpha: f64) -> DMatrix<f64> {
    weighted_gram(design, covs, alpha, |e, n| e * e / libm::pow(1.0 + alpha, 0.5 * n + 1.0))
}

/// `M_jk = sum_i eta_i T(A_j, A_k) / (4 (1+a)^(n_i/2+2))`.
fn sigma_normalizer(design: &GroupedDesign, covs: &CovarianceSet, alpha: f64) -> DMatrix<f64> {
    let m = design.r() + 1;
    let mut out = DMatrix::zeros(m, m);
    for i in 0..design.n_groups() {
        let cov = covs.group(i);
        let aj: Vec<DMatrix<f64>> = design.u(i).iter().map(|u| cov.v_inv() * u).collect();
        let t = cov.traces();
        let c = 0.25 * eta(design, covs, i, alpha) / libm::pow(1.0 + alpha, 0.5 * design.group(i).len() as f64 + 2.0);
        for j in 0..m {
            for l in j..m {
                let v = c * (alpha * alpha * t[j] * t[l] + 2.0 * trace_of_product(&aj[j], &aj[l]));
                out[(j, l)] += v;
                if l != j {
                    out[(l, j)] += v;
                }
            }
        }
    }
    out
}

/// `f_i(t)^a` and the residual pieces used by both influence functions.
struct PointTerms {
    f_alpha: f64,
    xvr: DVector<f64>,
    sigma_numerator: DVector<f64>,
}

fn point_terms(design: &GroupedDesign, covs: &CovarianceSet, theta: &ThetaParams, alpha: f64, i: usize, t: &DVector<f64>) -> PointTerms {
    let g = design.group(i);
    let cov = covs.group(i);
    let r = t - g.x() * &theta.beta;
    let vr = cov.v_inv() * &r;
    let q = r.dot(&vr).max(0.0);
    let e = eta(design, covs, i, alpha);
    let f_alpha = if alpha == 0.0 { 1.0 } else { e * libm::exp(-0.5 * alpha * q) };
    let traces = cov.traces();
    let ni = g.len() as f64;
    let xi_scale = e * alpha / (2.0 * libm::pow(1.0 + alpha, 0.5 * ni + 1.0));
    let sigma_numerator = DVector::from_fn(design.r() + 1, |j, _| {
        let s = if j == 0 { vr.norm_squared() } else { g.z()[j - 1].tr_mul(&vr).norm_squared() };
        0.5 * f_alpha * (s - traces[j]) + xi_scale * traces[j]
    });
    PointTerms {
        f_alpha,
        xvr: g.x().tr_mul(&vr),
        sigma_numerator,
    }
}

fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = m.clone().cholesky().ok_or(Error::SingularPsi)?;
    Ok(chol.solve(b))
}

/// Influence function of the fixed-effect functional for contamination of
/// group `i0` at `t`.
pub fn influence_beta(design: &GroupedDesign, theta: &ThetaParams, cfg: DpdConfig, i0: usize, t: &DVector<f64>) -> Result<DVector<f64>> {
    check_direction(design, i0, t)?;
    let covs = assemble_covariances(design, theta)?;
    let pt = point_terms(design, &covs, theta, cfg.alpha, i0, t);
    solve_spd(&x_prime_gram(design, &covs, cfg.alpha), &(pt.xvr * pt.f_alpha))
}

/// Influence function of the variance-component functional for contamination
/// of group `i0` at `t`.
pub fn influence_sigma(design: &GroupedDesign, theta: &ThetaParams, cfg: DpdConfig, i0: usize, t: &DVector<f64>) -> Result<DVector<f64>> {
    check_direction(design, i0, t)?;
    let covs = assemble_covariances(design, theta)?;
    let pt = point_terms(design, &covs, theta, cfg.alpha, i0, t);
    solve_spd(&sigma_normalizer(design, &covs, cfg.alpha), &pt.sigma_numerator)
}

/// Influence functions for simultaneous contamination of every group, group
/// `i` at `t_list[i]`. Returns `(IF_beta, IF_sigma)`.
pub fn influence_all(design: &GroupedDesign, theta: &ThetaParams, cfg: DpdConfig, t_list: &[DVector<f64>]) -> Result<(DVector<f64>, DVector<f64>)> {
    if t_list.len() != design.n_groups() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "{} contamination points for {} groups",
            t_list.len(),
            design.n_groups()
        )));
    }
    for (i, t) in t_list.iter().enumerate() {
        check_direction(design, i, t)?;
    }
    let covs = assemble_covariances(design, theta)?;
    let mut num_beta = DVector::zeros(design.k());
    let mut num_sigma = DVector::zeros(design.r() + 1);
    for (i, t) in t_list.iter().enumerate() {
        let pt = point_terms(design, &covs, theta, cfg.alpha, i, t);
        num_beta += pt.xvr * pt.f_alpha;
        num_sigma += pt.sigma_numerator;
    }
    let beta_if = solve_spd(&x_prime_gram(design, &covs, cfg.alpha), &num_beta)?;
    let sigma_if = solve_spd(&sigma_normalizer(design, &covs, cfg.alpha), &num_sigma)?;
    Ok((beta_if, sigma_if))
}

/// `influence_all` along the constant path `t_i = c 1` for each `c`.
pub fn influence_path(design: &GroupedDesign, theta: &ThetaParams, cfg: DpdConfig, cs: &[f64]) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    cs.iter()
        .map(|&c| {
            let t: Vec<DVector<f64>> = design.groups().iter().map(|g| DVector::from_element(g.len(), c)).collect();
            influence_all(design, theta, cfg, &t)
        })
        .collect()
}

/// Gross-error and self-standardized sensitivities of the fixed-effect
/// functional for contamination of group `i0`.
pub fn sensitivities(design: &GroupedDesign, theta: &ThetaParams, cfg: DpdConfig, i0: usize) -> Result<SensitivityReport> {
    if i0 >= design.n_groups() {
        return Err(Error::InvalidConfig(alloc::format!(
            "direction {i0} out of range for {} groups",
            design.n_groups()
        )));
    }
    let p = design.balanced_size();
    let alpha = cfg.alpha;
    let mut report = SensitivityReport {
        alpha,
        ges: Sensitivity::Infinite,
        sss: Sensitivity::Infinite,
        direction: i0,
        alpha_star: p.map(|p| 1.0 / (p as f64 + 1.0)),
        alpha_bar: p.map(|p| 2.0 / p as f64),
        balanced: p.map(|_| BalancedSensitivities {
            ges: Sensitivity::Infinite,
            sss: Sensitivity::Infinite,
        }),
    };
    if alpha == 0.0 {
        return Ok(report);
    }

    let covs = assemble_covariances(design, theta)?;
    let n = design.n_groups() as f64;
    let g0 = design.group(i0);
    let b = symmetrize(&(g0.x().tr_mul(covs.group(i0).v_inv()) * g0.x()));
    let e0 = eta(design, &covs, i0, alpha);
    let denom = libm::sqrt(alpha) * libm::exp(0.5);

    let cinv = spd_inverse(&x_prime_gram(design, &covs, alpha)).ok_or(Error::SingularPsi)?;
    let lam_u = max_eigenvalue(&(&cinv * &b * &cinv));
    report.ges = Sensitivity::Finite(e0 * libm::sqrt(lam_u.max(0.0)) / denom);

    let lam_s = max_generalized_eigenvalue(&sss_gram(design, &covs, alpha), &b).ok_or(Error::SingularPsi)?;
    report.sss = Sensitivity::Finite(e0 * libm::sqrt(lam_s.max(0.0)) / (n * denom));

    if let Some(p) = p {
        let s = weighted_gram(design, &covs, alpha, |_, _| 1.0);
        let sinv = spd_inverse(&s).ok_or(Error::SingularPsi)?;
        let lam_u = max_eigenvalue(&(&sinv * &b * &sinv));
        let lam_s = max_generalized_eigenvalue(&s, &b).ok_or(Error::SingularPsi)?;
        report.balanced = Some(BalancedSensitivities {
            ges: Sensitivity::Finite(ges_alpha_factor(alpha, p) * libm::sqrt(lam_u.max(0.0)) * libm::exp(-0.5)),
            sss: Sensitivity::Finite(sss_alpha_factor(alpha, p) / n * libm::sqrt(lam_s.max(0.0)) * libm::exp(-0.5)),
        });
    }
    Ok(report)
}

//! Density power divergence objective for the Gaussian linear mixed model.
//!
//! For `alpha > 0` each group contributes
//!
//! ```text
//! H_i = eta_i (1+alpha)^(-n_i/2) - (1 + 1/alpha) eta_i exp(-alpha q_i / 2)
//! eta_i = (2 pi)^(-n_i alpha/2) |V_i|^(-alpha/2)
//! ```
//!
//! with `q_i` the Mahalanobis form of the group residual. `alpha = 0` is the
//! negative log-likelihood, evaluated on its own branch. The constant
//! `int g^(1+alpha)` term never enters.

use alloc::vec::Vec;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{assemble_covariances, CovarianceSet, GroupedDesign, ThetaParams};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Tuning parameter of the divergence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpdConfig {
    pub alpha: f64,
}

impl DpdConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "alpha must be finite and >= 0, got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn is_mle(&self) -> bool {
        self.alpha == 0.0
    }
}

/// Objective value, analytic gradient and the per-group weights `w_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad_beta: DVector<f64>,
    pub grad_sigma2: DVector<f64>,
    pub per_group_weights: Vec<f64>,
}

impl ObjectiveEval {
    /// Gradient flattened in `(beta, sigma2)` order.
    pub fn gradient(&self) -> Vec<f64> {
        self.grad_beta
            .iter()
            .chain(self.grad_sigma2.iter())
            .copied()
            .collect()
    }
}

/// Unscaled contribution of one group (not divided by `n`).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTerm {
    pub value: f64,
    pub grad_beta: DVector<f64>,
    pub grad_sigma2: DVector<f64>,
    pub weight: f64,
    pub quad_form: f64,
}

/// `log eta_i = -(n_i alpha / 2) ln 2pi - (alpha/2) log|V_i|`.
pub(crate) fn log_eta(n_i: usize, logdet: f64, alpha: f64) -> f64 {
    -0.5 * alpha * (n_i as f64 * LN_2PI + logdet)
}

/// `int f^(1+a) dy = eta (1+a)^(-n_i/2)` for a Gaussian density with the given
/// dimension and covariance log-determinant.
pub fn density_power_integral(n_i: usize, logdet: f64, alpha: f64) -> f64 {
    libm::exp(log_eta(n_i, logdet, alpha) - 0.5 * n_i as f64 * libm::log1p(alpha))
}

pub fn group_term(
    design: &GroupedDesign,
    covs: &CovarianceSet,
    theta: &ThetaParams,
    cfg: DpdConfig,
    i: usize,
) -> GroupTerm {
    let block = design.group(i);
    let cov = covs.group(i);
    let n_i = block.len();
    let alpha = cfg.alpha;

    let resid = block.residual(&theta.beta);
    let vr = cov.v_inv() * &resid;
    let q = resid.dot(&vr).max(0.0);
    let xvr = block.x().tr_mul(&vr);
    let mut s = Vec::with_capacity(design.r() + 1);
    s.push(vr.norm_squared());
    for zj in block.z() {
        s.push(zj.tr_mul(&vr).norm_squared());
    }
    let traces = cov.traces();

    if alpha == 0.0 {
        let value = 0.5 * (n_i as f64 * LN_2PI + cov.logdet() + q);
        let grad_beta = -xvr;
        let grad_sigma2 = DVector::from_iterator(s.len(), (0..s.len()).map(|j| 0.5 * (traces[j] - s[j])));
        return GroupTerm {
            value,
            grad_beta,
            grad_sigma2,
            weight: 1.0,
            quad_form: q,
        };
    }

    let le = log_eta(n_i, cov.logdet(), alpha);
    let term1 = density_power_integral(n_i, cov.logdet(), alpha);
    let e = libm::exp(le - 0.5 * alpha * q);
    let value = term1 - (1.0 + 1.0 / alpha) * e;
    let grad_beta = xvr * (-(1.0 + alpha) * e);
    let grad_sigma2 = DVector::from_iterator(
        s.len(),
        (0..s.len()).map(|j| -0.5 * alpha * traces[j] * term1 + 0.5 * (1.0 + alpha) * e * (traces[j] - s[j])),
    );
    GroupTerm {
        value,
        grad_beta,
        grad_sigma2,
        weight: libm::exp(-0.5 * alpha * q),
        quad_form: q,
    }
}

/// Objective from an already assembled covariance set.
pub fn eval_with_covariances(
    design: &GroupedDesign,
    covs: &CovarianceSet,
    theta: &ThetaParams,
    cfg: DpdConfig,
) -> ObjectiveEval {
    let n = design.n_groups() as f64;
    let mut value = 0.0;
    let mut grad_beta = DVector::zeros(design.k());
    let mut grad_sigma2 = DVector::zeros(design.r() + 1);
    let mut weights = Vec::with_capacity(design.n_groups());
    for i in 0..design.n_groups() {
        let t = group_term(design, covs, theta, cfg, i);
        value += t.value;
        grad_beta += &t.grad_beta;
        grad_sigma2 += &t.grad_sigma2;
        weights.push(t.weight);
    }
    ObjectiveEval {
        value: value / n,
        grad_beta: grad_beta / n,
        grad_sigma2: grad_sigma2 / n,
        per_group_weights: weights,
    }
}

pub fn eval_objective(design: &GroupedDesign, theta: &ThetaParams, cfg: DpdConfig) -> Result<ObjectiveEval> {
    let covs = assemble_covariances(design, theta)?;
    Ok(eval_with_covariances(design, &covs, theta, cfg))
}

/// `w_i = exp(-(alpha/2) (y_i - X_i beta)^T V_i^-1 (y_i - X_i beta))`.
pub fn eval_weights(design: &GroupedDesign, theta: &ThetaParams, cfg: DpdConfig) -> Result<Vec<f64>> {
    let covs = assemble_covariances(design, theta)?;
    if cfg.alpha == 0.0 {
        return Ok(alloc::vec![1.0; design.n_groups()]);
    }
    Ok((0..design.n_groups())
        .map(|i| {
            let block = design.group(i);
            let resid = block.residual(&theta.beta);
            let q = resid.dot(&(covs.group(i).v_inv() * &resid)).max(0.0);
            libm::exp(-0.5 * cfg.alpha * q)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GroupBlock;
    use alloc::vec;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn single(y: &[f64], x: DMatrix<f64>) -> GroupedDesign {
        GroupedDesign::new(vec![GroupBlock::new(DVector::from_column_slice(y), x, vec![]).unwrap()]).unwrap()
    }

    #[test]
    fn standard_normal_log_density() {
        let d = single(&[0.0], DMatrix::from_element(1, 1, 1.0));
        let theta = ThetaParams::from_slices(&[0.0], &[1.0]);
        let ev = eval_objective(&d, &theta, DpdConfig::new(0.0).unwrap()).unwrap();
        assert_relative_eq!(ev.value, 0.5 * LN_2PI, max_relative = 1e-15);
    }

    #[test]
    fn weights_trivial_cases() {
        let d = single(&[1.0, 2.0], DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
        let at_fit = ThetaParams::from_slices(&[1.0], &[1.0]);
        let w = eval_weights(&d, &at_fit, DpdConfig::new(0.7).unwrap()).unwrap();
        assert_eq!(w, vec![1.0]);

        let off = ThetaParams::from_slices(&[0.0], &[2.5]);
        let w = eval_weights(&d, &off, DpdConfig::new(0.0).unwrap()).unwrap();
        assert_eq!(w, vec![1.0]);

        // q = (1 + 4) / 2.5 = 2
        let w = eval_weights(&d, &off, DpdConfig::new(1.0).unwrap()).unwrap();
        assert_relative_eq!(w[0], libm::exp(-1.0), max_relative = 1e-15);
    }

    #[test]
    fn negative_alpha_rejected() {
        assert!(DpdConfig::new(-0.1).is_err());
        assert!(DpdConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn weights_decrease_with_quadratic_form() {
        let cfg = DpdConfig::new(0.4).unwrap();
        let theta = ThetaParams::from_slices(&[0.0], &[1.0]);
        let mut last = 1.0;
        for c in [0.5, 1.0, 2.0, 4.0] {
            let d = single(&[c], DMatrix::from_element(1, 1, 1.0));
            let w = eval_weights(&d, &theta, cfg).unwrap()[0];
            assert!(w > 0.0 && w < last);
            last = w;
        }
    }
}

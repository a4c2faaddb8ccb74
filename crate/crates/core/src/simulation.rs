//! Data generation, contamination and loss measures for simulation studies.
//!
//! The generator produces a two-way crossed classification with interaction:
//! each group holds `p = F G H` responses in lexicographic order (`h` fastest,
//! then `g`, then `f`) with random effects `a_f`, `b_g`, `c_fg` and error `e`,
//! so that
//!
//! ```text
//! Sigma_0 = s_e I + s_a (I_F x J_G x J_H) + s_b (J_F x I_G x J_H) + s_c (I_F x I_G x J_H)
//! ```

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{kron, ones, smallest_eigenvector};
use crate::model::{GroupBlock, GroupedDesign};

/// Crossed classification layout and true parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossedDesignSpec {
    pub f: usize,
    pub g: usize,
    pub h: usize,
    pub k: usize,
    pub beta0: Vec<f64>,
    pub sigma_a2: f64,
    pub sigma_b2: f64,
    pub sigma_c2: f64,
    pub sigma_e2: f64,
    pub n: usize,
}

impl Default for CrossedDesignSpec {
    fn default() -> Self {
        Self {
            f: 2,
            g: 2,
            h: 3,
            k: 6,
            beta0: alloc::vec![0.0, 2.0, 2.0, 2.0, 2.0, 2.0],
            sigma_a2: 1.0 / 16.0,
            sigma_b2: 1.0 / 16.0,
            sigma_c2: 1.0 / 8.0,
            sigma_e2: 0.25,
            n: 100,
        }
    }
}

impl CrossedDesignSpec {
    /// Group size `F G H`.
    pub fn p(&self) -> usize {
        self.f * self.g * self.h
    }

    pub fn validate(&self) -> Result<()> {
        if self.f == 0 || self.g == 0 || self.h == 0 || self.n == 0 || self.k == 0 {
            return Err(Error::InvalidConfig("level counts, k and n must be positive".into()));
        }
        if self.beta0.len() != self.k {
            return Err(Error::InvalidConfig(alloc::format!(
                "beta0 has {} entries, k = {}",
                self.beta0.len(),
                self.k
            )));
        }
        let vars = [self.sigma_a2, self.sigma_b2, self.sigma_c2];
        if vars.iter().any(|v| !v.is_finite() || *v < 0.0) || !(self.sigma_e2 > 0.0) || !self.sigma_e2.is_finite() {
            return Err(Error::InvalidConfig("variances must be finite, sigma_e2 > 0".into()));
        }
        Ok(())
    }

    /// True variance components in model order `(s_e, s_a, s_b, s_c)`.
    pub fn sigma2(&self) -> [f64; 4] {
        [self.sigma_e2, self.sigma_a2, self.sigma_b2, self.sigma_c2]
    }

    /// Ratios `(s_a, s_b, s_c) / s_e`.
    pub fn gamma0(&self) -> [f64; 3] {
        [self.sigma_a2 / self.sigma_e2, self.sigma_b2 / self.sigma_e2, self.sigma_c2 / self.sigma_e2]
    }

    /// Indicator matrices of `f`, `g` and the `(f, g)` cell, `p` rows each.
    pub fn random_design(&self) -> Vec<DMatrix<f64>> {
        let col = |n: usize| DMatrix::from_element(n, 1, 1.0);
        let id = |n: usize| DMatrix::<f64>::identity(n, n);
        let za = kron(&kron(&id(self.f), &col(self.g)), &col(self.h));
        let zb = kron(&kron(&col(self.f), &id(self.g)), &col(self.h));
        let zc = kron(&id(self.f * self.g), &col(self.h));
        alloc::vec![za, zb, zc]
    }

    /// `Sigma = s_e I + s_a V_1 + s_b V_2 + s_c V_3` for components in model order.
    pub fn covariance(&self, sigma2: &[f64]) -> Result<DMatrix<f64>> {
        if sigma2.len() != 4 {
            return Err(Error::DimensionMismatch(alloc::format!(
                "crossed covariance needs 4 variance components, got {}",
                sigma2.len()
            )));
        }
        let id = |n: usize| DMatrix::<f64>::identity(n, n);
        let (f, g, h) = (self.f, self.g, self.h);
        let v1 = kron(&kron(&id(f), &ones(g)), &ones(h));
        let v2 = kron(&kron(&ones(f), &id(g)), &ones(h));
        let v3 = kron(&kron(&id(f), &id(g)), &ones(h));
        Ok(id(self.p()) * sigma2[0] + v1 * sigma2[1] + v2 * sigma2[2] + v3 * sigma2[3])
    }

    /// True covariance `Sigma_0`.
    pub fn sigma0(&self) -> DMatrix<f64> {
        self.covariance(&self.sigma2()).expect("four components")
    }
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws `n` groups from the crossed model. Covariates: a column of ones and
/// standard normal entries. Returns the design and `Sigma_0`.
pub fn generate_crossed<R: Rng + ?Sized>(spec: &CrossedDesignSpec, rng: &mut R) -> Result<(GroupedDesign, DMatrix<f64>)> {
    spec.validate()?;
    let p = spec.p();
    let z = spec.random_design();
    let beta = DVector::from_column_slice(&spec.beta0);
    let sds = [spec.sigma_a2, spec.sigma_b2, spec.sigma_c2].map(libm::sqrt);
    let se = libm::sqrt(spec.sigma_e2);
    let mut groups = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x = DMatrix::from_fn(p, spec.k, |_, c| if c == 0 { 1.0 } else { std_normal(rng) });
        let mut y = &x * &beta;
        for (zj, sd) in z.iter().zip(sds) {
            let u = DVector::from_fn(zj.ncols(), |_, _| sd * std_normal(rng));
            y += zj * u;
        }
        for v in y.iter_mut() {
            *v += se * std_normal(rng);
        }
        groups.push(GroupBlock::new(y, x, z.clone())?);
    }
    Ok((GroupedDesign::new(groups)?, spec.sigma0()))
}

/// Location of the covariates of replaced groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Leverage {
    Lev1,
    Lev20,
}

impl Leverage {
    pub fn phi0(&self) -> f64 {
        match self {
            Self::Lev1 => 1.0,
            Self::Lev20 => 20.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Lev1 => "lev1",
            Self::Lev20 => "lev20",
        }
    }
}

/// Casewise contamination: a fraction `epsilon` of groups is replaced by
/// `y0 ~ N(x0 beta0 + omega0 1, Sigma_0)` with non-intercept covariates
/// `N(phi0, covariate_sd^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContaminationSpec {
    pub epsilon: f64,
    pub omega0: f64,
    pub leverage: Leverage,
    pub covariate_sd: f64,
}

impl ContaminationSpec {
    pub fn new(epsilon: f64, omega0: f64, leverage: Leverage) -> Self {
        Self {
            epsilon,
            omega0,
            leverage,
            covariate_sd: 0.005,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(Error::InvalidConfig("epsilon must lie in [0, 0.5)".into()));
        }
        if !self.omega0.is_finite() || !(self.covariate_sd >= 0.0) {
            return Err(Error::InvalidConfig("omega0 and covariate_sd must be finite, sd >= 0".into()));
        }
        Ok(())
    }

    /// Number of replaced groups, `round(n epsilon)`.
    pub fn count(&self, n: usize) -> usize {
        libm::round(n as f64 * self.epsilon) as usize
    }
}

/// Replaces `round(n epsilon)` groups, chosen by a seeded shuffle, with
/// outlying responses and covariates. `epsilon = 0` returns an identical copy.
pub fn contaminate_casewise<R: Rng + ?Sized>(
    design: &GroupedDesign,
    spec: &ContaminationSpec,
    sigma0: &DMatrix<f64>,
    beta0: &[f64],
    rng: &mut R,
) -> Result<GroupedDesign> {
    spec.validate()?;
    let count = spec.count(design.n_groups());
    if count == 0 {
        return Ok(design.clone());
    }
    if beta0.len() != design.k() {
        return Err(Error::DimensionMismatch("beta0 length differs from k".into()));
    }
    let l = sigma0.clone().cholesky().ok_or(Error::SingularSigma0)?.l();
    let beta = DVector::from_column_slice(beta0);
    let mut order: Vec<usize> = (0..design.n_groups()).collect();
    order.shuffle(rng);

    let mut groups = design.groups().to_vec();
    for &i in &order[..count] {
        let g = &groups[i];
        let p = g.len();
        if sigma0.nrows() != p {
            return Err(Error::DimensionMismatch(alloc::format!(
                "Sigma_0 is {}x{}, group {i} has {p} observations",
                sigma0.nrows(),
                sigma0.ncols()
            )));
        }
        let phi0 = spec.leverage.phi0();
        let x0 = DMatrix::from_fn(p, design.k(), |_, c| {
            if c == 0 {
                1.0
            } else {
                phi0 + spec.covariate_sd * std_normal(rng)
            }
        });
        let z = DVector::from_fn(p, |_, _| std_normal(rng));
        let y0 = &x0 * &beta + DVector::from_element(p, spec.omega0) + &l * z;
        groups[i] = g.with_data(y0, x0)?;
    }
    design.with_groups(groups)
}

/// Replaces `m` distinct response cells with draws from `N(k_mult v_j, 0.1^2)`,
/// `v` the unit eigenvector of the smallest eigenvalue of `mle_cov`.
///
/// Cells are taken as a prefix of one shuffled list, so the replaced set for
/// `m` contains the set for `m - 1` under the same seed.
pub fn contaminate_cellwise<R: Rng + ?Sized>(
    design: &GroupedDesign,
    m: usize,
    k_mult: f64,
    mle_cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<GroupedDesign> {
    let p = mle_cov.nrows();
    if mle_cov.ncols() != p || design.groups().iter().any(|g| g.len() != p) {
        return Err(Error::DimensionMismatch(
            "cellwise contamination needs every group of the covariance's size".into(),
        ));
    }
    let total = design.n_groups() * p;
    if m > total {
        return Err(Error::InvalidConfig(alloc::format!("{m} cells requested, only {total} available")));
    }
    if m == 0 {
        return Ok(design.clone());
    }
    let v = smallest_eigenvector(mle_cov);
    let mut cells: Vec<usize> = (0..total).collect();
    cells.shuffle(rng);
    let mut ys: Vec<DVector<f64>> = design.groups().iter().map(|g| g.y().clone()).collect();
    for &c in &cells[..m] {
        let (i, j) = (c / p, c % p);
        ys[i][j] = k_mult * v[j] + 0.1 * std_normal(rng);
    }
    let groups = design
        .groups()
        .iter()
        .zip(ys)
        .map(|(g, y)| g.with_response(y))
        .collect::<Result<Vec<_>>>()?;
    design.with_groups(groups)
}

/// Mean of `(b - beta0)^T A (b - beta0)` with `A = tr(Sigma_0^-1) I_k`.
pub fn msmd(beta_hats: &[DVector<f64>], beta0: &[f64], sigma0: &DMatrix<f64>) -> Result<f64> {
    if beta_hats.is_empty() {
        return Err(Error::InvalidConfig("no estimates".into()));
    }
    let scale = sigma0.clone().cholesky().ok_or(Error::SingularSigma0)?.inverse().trace();
    let b0 = DVector::from_column_slice(beta0);
    let mut acc = 0.0;
    for b in beta_hats {
        if b.len() != b0.len() {
            return Err(Error::DimensionMismatch("estimate and beta0 differ in length".into()));
        }
        acc += scale * (b - &b0).norm_squared();
    }
    Ok(acc / beta_hats.len() as f64)
}

fn chol_logdet(m: &DMatrix<f64>) -> Option<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let chol = m.clone().cholesky()?;
    let l = chol.l_dirty();
    let ld = 2.0 * (0..m.nrows()).map(|d| libm::log(l[(d, d)])).sum::<f64>();
    ld.is_finite().then_some((chol, ld))
}

/// `KLD(S1, S0) = tr(S1 S0^-1) - log det(S1 S0^-1) - p`.
pub fn kld(sigma1: &DMatrix<f64>, sigma0: &DMatrix<f64>) -> Result<f64> {
    if sigma1.shape() != sigma0.shape() || !sigma0.is_square() {
        return Err(Error::DimensionMismatch("covariances differ in shape".into()));
    }
    let (c0, ld0) = chol_logdet(sigma0).ok_or(Error::SingularSigma0)?;
    let (_, ld1) = chol_logdet(sigma1).ok_or(Error::SingularEstimate { replication: 0 })?;
    let tr = c0.solve(sigma1).trace();
    Ok(tr - (ld1 - ld0) - sigma0.nrows() as f64)
}

/// Mean KLD over replications. Replications with a singular estimate are
/// listed in `singular` and excluded from `mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct MkldSummary {
    pub mean: f64,
    pub used: usize,
    pub singular: Vec<usize>,
}

pub fn mkld(sigma_hats: &[DMatrix<f64>], sigma0: &DMatrix<f64>) -> Result<MkldSummary> {
    if sigma_hats.is_empty() {
        return Err(Error::InvalidConfig("no estimates".into()));
    }
    let mut acc = 0.0;
    let mut used = 0;
    let mut singular = Vec::new();
    for (rep, s) in sigma_hats.iter().enumerate() {
        match kld(s, sigma0) {
            Ok(v) => {
                acc += v;
                used += 1;
            }
            Err(Error::SingularEstimate { .. }) => singular.push(rep),
            Err(e) => return Err(e),
        }
    }
    let mean = if used == 0 { f64::NAN } else { acc / used as f64 };
    Ok(MkldSummary { mean, used, singular })
}

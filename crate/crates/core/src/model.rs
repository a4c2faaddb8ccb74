//! Grouped linear mixed model data and the per-group marginal covariances
//! `V_i = s0 I + sum_j s_j Z_ij Z_ij^T`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// One group (subject, cluster) of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBlock {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: Vec<DMatrix<f64>>,
}

impl GroupBlock {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::DimensionMismatch("group has no observations".into()));
        }
        if x.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "X has {} rows but y has {} entries",
                x.nrows(),
                n
            )));
        }
        for (j, zj) in z.iter().enumerate() {
            if zj.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "Z_{} has {} rows but y has {} entries",
                    j + 1,
                    zj.nrows(),
                    n
                )));
            }
        }
        Ok(Self { y, x, z })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Random-effect design matrices `Z_i1 .. Z_ir`.
    pub fn z(&self) -> &[DMatrix<f64>] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Same block with the response replaced.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        Self::new(y, self.x.clone(), self.z.clone())
    }

    /// Same block with response and fixed-effect rows replaced.
    pub fn with_data(&self, y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        if x.ncols() != self.x.ncols() {
            return Err(Error::DimensionMismatch("replacement X changes k".into()));
        }
        Self::new(y, x, self.z.clone())
    }

    /// Residual `y - X beta`.
    pub fn residual(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.x * beta
    }
}

/// The full data set consumed by a fit.
///
/// Construction precomputes `U_ij = Z_ij Z_ij^T` (with `U_i0 = I`) and
/// partitions groups into structure classes: groups whose size and random
/// design matrices are exactly equal share one covariance factorization.
#[derive(Debug, Clone)]
pub struct GroupedDesign {
    groups: Vec<GroupBlock>,
    k: usize,
    r: usize,
    u: Vec<Vec<DMatrix<f64>>>,
    class_of: Vec<usize>,
    class_rep: Vec<usize>,
}

impl PartialEq for GroupedDesign {
    fn eq(&self, other: &Self) -> bool {
        self.groups == other.groups
    }
}

impl GroupedDesign {
    pub fn new(groups: Vec<GroupBlock>) -> Result<Self> {
        let first = groups
            .first()
            .ok_or_else(|| Error::DimensionMismatch("design has no groups".into()))?;
        let k = first.x.ncols();
        let r = first.z.len();
        for (i, g) in groups.iter().enumerate() {
            if g.x.ncols() != k {
                return Err(Error::DimensionMismatch(format!(
                    "group {i} has {} fixed-effect columns, expected {k}",
                    g.x.ncols()
                )));
            }
            if g.z.len() != r {
                return Err(Error::DimensionMismatch(format!(
                    "group {i} has {} random factors, expected {r}",
                    g.z.len()
                )));
            }
        }

        let mut class_of = Vec::with_capacity(groups.len());
        let mut class_rep: Vec<usize> = Vec::new();
        for (i, g) in groups.iter().enumerate() {
            let found = class_rep.iter().position(|&rep| {
                let h = &groups[rep];
                h.len() == g.len() && h.z == g.z
            });
            match found {
                Some(c) => class_of.push(c),
                None => {
                    class_of.push(class_rep.len());
                    class_rep.push(i);
                }
            }
        }

        let u = groups
            .iter()
            .map(|g| {
                let mut list = Vec::with_capacity(r + 1);
                list.push(DMatrix::identity(g.len(), g.len()));
                list.extend(g.z.iter().map(|zj| zj * zj.transpose()));
                list
            })
            .collect();

        Ok(Self {
            groups,
            k,
            r,
            u,
            class_of,
            class_rep,
        })
    }

    pub fn groups(&self) -> &[GroupBlock] {
        &self.groups
    }

    pub fn group(&self, i: usize) -> &GroupBlock {
        &self.groups[i]
    }

    /// Number of groups `n`.
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Total observation count `N = sum n_i`.
    pub fn n_obs(&self) -> usize {
        self.groups.iter().map(GroupBlock::len).sum()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// Length of the parameter vector `(beta, sigma2)`.
    pub fn n_params(&self) -> usize {
        self.k + self.r + 1
    }

    /// `U_i0 = I, U_ij = Z_ij Z_ij^T`.
    pub fn u(&self, i: usize) -> &[DMatrix<f64>] {
        &self.u[i]
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.class_of[i]
    }

    pub fn n_classes(&self) -> usize {
        self.class_rep.len()
    }

    /// Common group size when every group shares one covariance structure.
    pub fn balanced_size(&self) -> Option<usize> {
        (self.class_rep.len() == 1).then(|| self.groups[0].len())
    }

    /// Copy of the design with one group replaced.
    pub fn with_group(&self, i: usize, block: GroupBlock) -> Result<Self> {
        let mut groups = self.groups.clone();
        groups[i] = block;
        Self::new(groups)
    }

    /// Rebuilds a design from groups sharing this design's structure.
    pub fn with_groups(&self, groups: Vec<GroupBlock>) -> Result<Self> {
        Self::new(groups)
    }

    pub fn into_groups(self) -> Vec<GroupBlock> {
        self.groups
    }
}

/// Fixed effects and variance components `(sigma_0^2, ..., sigma_r^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    pub beta: DVector<f64>,
    pub sigma2: DVector<f64>,
}

impl ThetaParams {
    pub fn new(beta: DVector<f64>, sigma2: DVector<f64>) -> Self {
        Self { beta, sigma2 }
    }

    pub fn from_slices(beta: &[f64], sigma2: &[f64]) -> Self {
        Self {
            beta: DVector::from_column_slice(beta),
            sigma2: DVector::from_column_slice(sigma2),
        }
    }

    /// Flattened `(beta, sigma2)`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.beta.iter().chain(self.sigma2.iter()).copied().collect()
    }

    pub fn from_flat(flat: &[f64], k: usize) -> Self {
        Self::from_slices(&flat[..k], &flat[k..])
    }

    pub fn check_dims(&self, design: &GroupedDesign) -> Result<()> {
        if self.beta.len() != design.k() || self.sigma2.len() != design.r() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} fixed effects and {} variances, design needs {} and {}",
                self.beta.len(),
                self.sigma2.len(),
                design.k(),
                design.r() + 1
            )));
        }
        Ok(())
    }

    /// Variance ratios `gamma_j = sigma_j^2 / sigma_0^2`, `j = 1..r`.
    pub fn gamma(&self) -> Vec<f64> {
        let s0 = self.sigma2[0];
        self.sigma2.iter().skip(1).map(|s| s / s0).collect()
    }
}

/// Factorized covariance of one structure class.
#[derive(Debug, Clone)]
pub struct GroupCovariance {
    v: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    v_inv: DMatrix<f64>,
    logdet: f64,
    traces: Vec<f64>,
}

impl GroupCovariance {
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Lower-triangular factor `L` with `L L^T = V`.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn v_inv(&self) -> &DMatrix<f64> {
        &self.v_inv
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// `Tr(V^-1 U_j)` for `j = 0..r`.
    pub fn traces(&self) -> &[f64] {
        &self.traces
    }

    /// `V^-1 v` by two triangular solves.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn dim(&self) -> usize {
        self.v.nrows()
    }
}

/// Covariances for every group of a design at one parameter value.
#[derive(Debug, Clone)]
pub struct CovarianceSet {
    classes: Vec<GroupCovariance>,
    class_of: Vec<usize>,
    gamma: Vec<f64>,
}

impl CovarianceSet {
    pub fn group(&self, i: usize) -> &GroupCovariance {
        &self.classes[self.class_of[i]]
    }

    pub fn classes(&self) -> &[GroupCovariance] {
        &self.classes
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }
}

/// Builds and factorizes `V_i = sigma_0^2 I + sum_j sigma_j^2 U_ij` for every group.
pub fn assemble_covariances(design: &GroupedDesign, theta: &ThetaParams) -> Result<CovarianceSet> {
    theta.check_dims(design)?;
    if theta.sigma2.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidParameter(
            "variance components must be finite and non-negative".into(),
        ));
    }
    let mut classes = Vec::with_capacity(design.n_classes());
    for &rep in &design.class_rep {
        let u = design.u(rep);
        let n = design.group(rep).len();
        let mut v = DMatrix::<f64>::zeros(n, n);
        for (uj, s) in u.iter().zip(theta.sigma2.iter()) {
            if *s != 0.0 {
                v += uj * *s;
            }
        }
        let chol = Cholesky::new(v.clone()).ok_or(Error::NotPositiveDefinite { group: rep })?;
        let l = chol.l_dirty();
        let logdet = 2.0 * (0..n).map(|d| libm::log(l[(d, d)])).sum::<f64>();
        if !logdet.is_finite() {
            return Err(Error::NotPositiveDefinite { group: rep });
        }
        let v_inv = chol.inverse();
        let traces = u.iter().map(|uj| v_inv.component_mul(uj).sum()).collect();
        classes.push(GroupCovariance {
            v,
            chol,
            v_inv,
            logdet,
            traces,
        });
    }
    Ok(CovarianceSet {
        classes,
        class_of: design.class_of.clone(),
        gamma: theta.gamma(),
    })
}

/// `(y - X beta)^T V^-1 (y - X beta)` through a forward solve against the Cholesky factor.
pub fn mahalanobis_residual(
    block: &GroupBlock,
    beta: &DVector<f64>,
    cov: &GroupCovariance,
) -> Result<f64> {
    if block.x.ncols() != beta.len() || cov.dim() != block.len() {
        return Err(Error::DimensionMismatch(
            "block, beta and covariance disagree in size".into(),
        ));
    }
    let resid = block.residual(beta);
    let z = cov
        .chol
        .l_dirty()
        .solve_lower_triangular(&resid)
        .ok_or(Error::NotPositiveDefinite { group: 0 })?;
    Ok(z.norm_squared())
}

//! Minimizers of the divergence objective.
//!
//! [`fit`] runs a projected BFGS on the full `(beta, sigma2)` vector from a
//! moment-based start plus randomly perturbed restarts and keeps the root with
//! the lowest objective. [`fit_balanced_fixed_point`] uses the closed-form
//! weighted least squares update for `beta` when all groups share one
//! covariance matrix, alternating with a sub-minimization over the variance
//! components.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::divergence::{eval_with_covariances, DpdConfig};
use crate::error::{Error, Result};
use crate::model::{assemble_covariances, GroupedDesign, ThetaParams};
use crate::optim::{self, Settings};

/// Smallest admissible error variance during fitting.
pub const SIGMA0_FLOOR: f64 = 1e-10;
const INIT_VARIANCE_FLOOR: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub tol_theta: f64,
    pub tol_obj: f64,
    /// Increasing grid starting at 0, used for warm-started continuation.
    pub alpha_path: Option<Vec<f64>>,
    pub restarts: usize,
    /// Seed of the restart perturbations.
    pub seed: u64,
    pub keep_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol_theta: 1e-8,
            tol_obj: 1e-10,
            alpha_path: None,
            restarts: 3,
            seed: 0,
            keep_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_theta > 0.0) || !(self.tol_obj > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if let Some(path) = &self.alpha_path {
            validate_alpha_grid(path)?;
        }
        Ok(())
    }

    fn settings(&self) -> Settings {
        Settings {
            max_iter: self.max_iter,
            tol_step: self.tol_theta,
            tol_obj: self.tol_obj,
            tol_grad: GRAD_TOL,
        }
    }
}

/// Checks that a grid is strictly increasing and starts at zero.
pub fn validate_alpha_grid(alphas: &[f64]) -> Result<()> {
    if alphas.first() != Some(&0.0) {
        return Err(Error::InvalidConfig("alpha grid must start at 0".into()));
    }
    if alphas.windows(2).any(|w| !(w[1] > w[0])) || alphas.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidConfig("alpha grid must be strictly increasing".into()));
    }
    Ok(())
}

/// One iteration of the convergence log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub objective: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub alpha: f64,
    pub theta_hat: ThetaParams,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Infinity norm of the projected gradient at `theta_hat`.
    pub grad_norm: f64,
    pub weights: Vec<f64>,
    pub trace: Option<Vec<TraceEntry>>,
    /// Final objective of every start that produced a result.
    pub restart_objectives: Vec<f64>,
}

fn lower_bounds(design: &GroupedDesign) -> Vec<f64> {
    let mut lower = alloc::vec![f64::NEG_INFINITY; design.k()];
    lower.push(SIGMA0_FLOOR);
    lower.extend(core::iter::repeat_n(0.0, design.r()));
    lower
}

fn check_rank(design: &GroupedDesign) -> Result<()> {
    let k = design.k();
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    for g in design.groups() {
        xtx += g.x().tr_mul(g.x());
    }
    let svd = xtx.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-12 {
        return Err(Error::RankDeficient);
    }
    Ok(())
}

/// Pooled ordinary least squares.
pub fn ols(design: &GroupedDesign) -> Result<DVector<f64>> {
    let k = design.k();
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    for g in design.groups() {
        xtx += g.x().tr_mul(g.x());
        xty += g.x().tr_mul(g.y());
    }
    let chol = xtx.cholesky().ok_or(Error::RankDeficient)?;
    Ok(chol.solve(&xty))
}

/// Moment-based starting value: OLS for `beta`, within-group residual variance
/// for `sigma_0^2`, and for each random factor the positive part of the
/// between-level mean square minus `sigma_0^2`, divided by the mean level size
/// `tr(U_ij) / rank(Z_ij)`.
pub fn initial_theta(design: &GroupedDesign) -> Result<ThetaParams> {
    let beta = ols(design)?;
    let resid: Vec<DVector<f64>> = design.groups().iter().map(|g| g.residual(&beta)).collect();
    let n_obs = design.n_obs() as f64;
    let rss: f64 = resid.iter().map(|e| e.norm_squared()).sum();

    let mut sigma2 = Vec::with_capacity(design.r() + 1);
    let s0 = if design.r() == 0 {
        rss / n_obs
    } else {
        let dof: usize = design.groups().iter().map(|g| g.len() - 1).sum();
        if dof == 0 {
            rss / n_obs
        } else {
            let within: f64 = resid
                .iter()
                .map(|e| {
                    let m = e.mean();
                    e.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                })
                .sum();
            within / dof as f64
        }
    };
    let s0 = if s0.is_finite() { s0.max(INIT_VARIANCE_FLOOR) } else { 1.0 };
    sigma2.push(s0);

    for j in 0..design.r() {
        let mut ss = 0.0;
        let mut levels = 0usize;
        let mut diag = 0.0;
        for (i, (g, e)) in design.groups().iter().zip(&resid).enumerate() {
            let z = &g.z()[j];
            let ztz = z.tr_mul(z);
            let svd = ztz.clone().svd(true, true);
            let tol = svd.singular_values.max() * 1e-10;
            let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
            if rank == 0 {
                continue;
            }
            let pinv = svd.pseudo_inverse(tol).map_err(|_| Error::RankDeficient)?;
            let zte = z.tr_mul(e);
            ss += zte.dot(&(pinv * &zte));
            levels += rank;
            diag += design.u(i)[j + 1].trace();
        }
        let value = if levels == 0 || diag <= 0.0 {
            INIT_VARIANCE_FLOOR
        } else {
            // E[ms] = s0 + sigma_j^2 * (mean level size)
            let ms = ss / levels as f64;
            let level_size = diag / levels as f64;
            ((ms - s0).max(0.0) / level_size).max(INIT_VARIANCE_FLOOR)
        };
        sigma2.push(value);
    }
    Ok(ThetaParams::new(beta, DVector::from_vec(sigma2)))
}

struct RunOutcome {
    theta: ThetaParams,
    objective: f64,
    converged: bool,
    iterations: usize,
    grad_norm: f64,
    trace: Vec<(f64, f64)>,
}

fn run_bfgs(design: &GroupedDesign, cfg: DpdConfig, solver: &SolverConfig, start: &ThetaParams) -> Result<RunOutcome> {
    let k = design.k();
    let lower = lower_bounds(design);
    let objective = |x: &[f64]| {
        let theta = ThetaParams::from_flat(x, k);
        let covs = assemble_covariances(design, &theta)?;
        let ev = eval_with_covariances(design, &covs, &theta, cfg);
        Ok((ev.value, ev.gradient()))
    };
    let out = optim::minimize(objective, &start.to_vec(), &lower, &solver.settings())?;
    Ok(RunOutcome {
        theta: ThetaParams::from_flat(&out.x, k),
        objective: out.f,
        converged: out.converged,
        iterations: out.iterations,
        grad_norm: out.proj_grad_norm,
        trace: out.trace,
    })
}

fn perturb(start: &ThetaParams, rng: &mut ChaCha8Rng) -> ThetaParams {
    let beta = start.beta.map(|b| {
        let z: f64 = StandardNormal.sample(rng);
        b + 0.1 * b.abs() * z
    });
    let sigma2 = start.sigma2.map(|s| s * rng.random_range(0.5..2.0));
    ThetaParams::new(beta, sigma2)
}

fn finish(design: &GroupedDesign, cfg: DpdConfig, solver: &SolverConfig, run: RunOutcome, restart_objectives: Vec<f64>) -> Result<FitResult> {
    let weights = crate::divergence::eval_weights(design, &run.theta, cfg)?;
    let trace = solver.keep_trace.then(|| {
        run.trace
            .iter()
            .map(|&(objective, step)| TraceEntry { objective, step })
            .collect()
    });
    Ok(FitResult {
        alpha: cfg.alpha,
        theta_hat: run.theta,
        objective: run.objective,
        converged: run.converged,
        iterations: run.iterations,
        grad_norm: run.grad_norm,
        weights,
        trace,
        restart_objectives,
    })
}

/// Minimizes the divergence objective over `(beta, sigma2)`.
///
/// Starts from `init` (or [`initial_theta`]), plus `solver.restarts`
/// perturbed copies of it and, when `solver.alpha_path` is set, the end of a
/// warm-started continuation along the grid entries below `cfg.alpha`. The
/// converged run with the smallest objective is returned.
pub fn fit(design: &GroupedDesign, cfg: DpdConfig, solver: &SolverConfig, init: Option<&ThetaParams>) -> Result<FitResult> {
    solver.validate()?;
    check_rank(design)?;
    let base = match init {
        Some(t) => {
            t.check_dims(design)?;
            t.clone()
        }
        None => initial_theta(design)?,
    };

    let mut starts = alloc::vec![base.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(solver.seed);
    for _ in 0..solver.restarts {
        starts.push(perturb(&base, &mut rng));
    }
    if let Some(path) = &solver.alpha_path {
        let below: Vec<f64> = path.iter().copied().filter(|a| *a < cfg.alpha).collect();
        if !below.is_empty() {
            let inner = SolverConfig {
                alpha_path: None,
                restarts: 0,
                ..solver.clone()
            };
            let mut warm = base.clone();
            for a in below {
                if let Ok(run) = run_bfgs(design, DpdConfig { alpha: a }, &inner, &warm) {
                    warm = run.theta;
                }
            }
            starts.push(warm);
        }
    }

    let mut best: Option<RunOutcome> = None;
    let mut best_any: Option<RunOutcome> = None;
    let mut objectives = Vec::with_capacity(starts.len());
    let mut last_err = None;
    for start in &starts {
        let run = match run_bfgs(design, cfg, solver, start) {
            Ok(run) => run,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        objectives.push(run.objective);
        let better = |cur: &Option<RunOutcome>| cur.as_ref().is_none_or(|b| run.objective < b.objective);
        if run.converged && better(&best) {
            best = Some(RunOutcome { trace: run.trace.clone(), theta: run.theta.clone(), ..run });
        }
        if better(&best_any) {
            best_any = Some(run);
        }
    }

    match (best, best_any) {
        (Some(run), _) => finish(design, cfg, solver, run, objectives),
        (None, Some(run)) => Err(Error::DidNotConverge(alloc::boxed::Box::new(finish(
            design, cfg, solver, run, objectives,
        )?))),
        (None, None) => Err(last_err.unwrap_or(Error::NotPositiveDefinite { group: 0 })),
    }
}

/// `beta = (sum w_i X_i^T V^-1 X_i)^-1 (sum w_i X_i^T V^-1 y_i)` with the
/// weights evaluated at the supplied `beta`.
pub fn beta_fixed_point_update(design: &GroupedDesign, theta: &ThetaParams, cfg: DpdConfig) -> Result<DVector<f64>> {
    let covs = assemble_covariances(design, theta)?;
    let k = design.k();
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut b = DVector::<f64>::zeros(k);
    for (i, g) in design.groups().iter().enumerate() {
        let vinv = covs.group(i).v_inv();
        let w = if cfg.alpha == 0.0 {
            1.0
        } else {
            let e = g.residual(&theta.beta);
            libm::exp(-0.5 * cfg.alpha * e.dot(&(vinv * &e)).max(0.0))
        };
        let xv = g.x().tr_mul(vinv);
        a += &xv * g.x() * w;
        b += &xv * g.y() * w;
    }
    let chol = a.cholesky().ok_or(Error::RankDeficient)?;
    Ok(chol.solve(&b))
}

/// Alternating fit for balanced designs: closed-form `beta` update, then the
/// variance components minimized with `beta` held fixed.
pub fn fit_balanced_fixed_point(design: &GroupedDesign, cfg: DpdConfig, solver: &SolverConfig) -> Result<FitResult> {
    solver.validate()?;
    if design.balanced_size().is_none() {
        return Err(Error::NotBalanced(format!(
            "{} distinct covariance structures across groups",
            design.n_classes()
        )));
    }
    check_rank(design)?;
    let k = design.k();
    let r = design.r();
    let mut theta = initial_theta(design)?;
    let mut sub_lower = alloc::vec![SIGMA0_FLOOR];
    sub_lower.extend(core::iter::repeat_n(0.0, r));
    let sub_settings = Settings {
        max_iter: solver.max_iter,
        tol_step: solver.tol_theta * 1e-2,
        tol_obj: solver.tol_obj * 1e-2,
        tol_grad: GRAD_TOL * 1e-3,
    };

    let mut objective = crate::divergence::eval_objective(design, &theta, cfg)?.value;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < solver.max_iter {
        iterations += 1;
        let beta = beta_fixed_point_update(design, &theta, cfg)?;
        let sub = |s: &[f64]| {
            let t = ThetaParams::new(beta.clone(), DVector::from_column_slice(s));
            let covs = assemble_covariances(design, &t)?;
            let ev = eval_with_covariances(design, &covs, &t, cfg);
            Ok((ev.value, ev.grad_sigma2.as_slice().to_vec()))
        };
        let out = optim::minimize(sub, theta.sigma2.as_slice(), &sub_lower, &sub_settings)?;
        let next = ThetaParams::new(beta.clone(), DVector::from_vec(out.x));
        let old = theta.to_vec();
        let new = next.to_vec();
        let step = old.iter().zip(&new).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = new.iter().fold(1.0f64, |m, a| m.max(a.abs()));
        let dobj = (objective - out.f).abs();
        trace.push((out.f, step));
        theta = next;
        objective = out.f;
        if step / scale < solver.tol_theta && dobj < solver.tol_obj * objective.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    let ev = crate::divergence::eval_objective(design, &theta, cfg)?;
    let lower = lower_bounds(design);
    let flat = theta.to_vec();
    let grad = ev.gradient();
    let grad_norm = flat
        .iter()
        .zip(&grad)
        .zip(&lower)
        .map(|((x, g), lo)| if *x <= *lo && *g > 0.0 { 0.0 } else { g.abs() })
        .fold(0.0, f64::max);
    debug_assert_eq!(flat.len(), k + r + 1);
    let run = RunOutcome {
        theta,
        objective: ev.value,
        converged,
        iterations,
        grad_norm,
        trace,
    };
    let result = finish(design, cfg, solver, run, alloc::vec![ev.value])?;
    if result.converged {
        Ok(result)
    } else {
        Err(Error::DidNotConverge(alloc::boxed::Box::new(result)))
    }
}

/// Fits along an increasing grid of `alpha` values, each warm-started from the
/// previous solution. Failures are recorded per entry and the path continues.
pub fn fit_alpha_path(design: &GroupedDesign, alphas: &[f64], solver: &SolverConfig) -> Result<Vec<Result<FitResult>>> {
    validate_alpha_grid(alphas)?;
    solver.validate()?;
    let inner = SolverConfig {
        alpha_path: None,
        ..solver.clone()
    };
    let mut out = Vec::with_capacity(alphas.len());
    let mut warm: Option<ThetaParams> = None;
    for &alpha in alphas {
        let res = fit(design, DpdConfig::new(alpha)?, &inner, warm.as_ref());
        match &res {
            Ok(f) => warm = Some(f.theta_hat.clone()),
            Err(Error::DidNotConverge(f)) => warm = Some(f.theta_hat.clone()),
            Err(_) => {}
        }
        out.push(res);
    }
    Ok(out)
}

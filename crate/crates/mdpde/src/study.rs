//! Monte Carlo study of the estimator on the crossed classification design.
//!
//! Replication `r` draws its clean sample from a ChaCha8 generator seeded
//! with `base_seed + r`. Every contamination cell of that replication reuses
//! the clean sample and takes its own stream (`cell index + 1`) of the same
//! seed, so the cells share common random numbers. Replications run on a
//! worker pool and are merged by index, which keeps the report independent
//! of the thread count.

use mdpde_core::simulation::{
    contaminate_casewise, generate_crossed, mkld, msmd, ContaminationSpec, CrossedDesignSpec, Leverage,
};
use mdpde_core::{fit, DpdConfig, SolverConfig};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::{num, F17};

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Core(#[from] mdpde_core::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
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

impl Default for DesignConfig {
    fn default() -> Self {
        let s = CrossedDesignSpec::default();
        Self {
            f: s.f,
            g: s.g,
            h: s.h,
            k: s.k,
            beta0: s.beta0,
            sigma_a2: s.sigma_a2,
            sigma_b2: s.sigma_b2,
            sigma_c2: s.sigma_c2,
            sigma_e2: s.sigma_e2,
            n: s.n,
        }
    }
}

impl From<&DesignConfig> for CrossedDesignSpec {
    fn from(c: &DesignConfig) -> Self {
        CrossedDesignSpec {
            f: c.f,
            g: c.g,
            h: c.h,
            k: c.k,
            beta0: c.beta0.clone(),
            sigma_a2: c.sigma_a2,
            sigma_b2: c.sigma_b2,
            sigma_c2: c.sigma_c2,
            sigma_e2: c.sigma_e2,
            n: c.n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeverageName {
    Lev1,
    Lev20,
}

impl From<LeverageName> for Leverage {
    fn from(l: LeverageName) -> Self {
        match l {
            LeverageName::Lev1 => Leverage::Lev1,
            LeverageName::Lev20 => Leverage::Lev20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol_theta: f64,
    pub tol_obj: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self {
            max_iter: s.max_iter,
            tol_theta: s.tol_theta,
            tol_obj: s.tol_obj,
            restarts: s.restarts,
            seed: s.seed,
        }
    }
}

impl From<&SolverOptions> for SolverConfig {
    fn from(o: &SolverOptions) -> Self {
        SolverConfig {
            max_iter: o.max_iter,
            tol_theta: o.tol_theta,
            tol_obj: o.tol_obj,
            restarts: o.restarts,
            seed: o.seed,
            ..SolverConfig::default()
        }
    }
}

/// `n` equispaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Study scenario, read from JSON. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub design: DesignConfig,
    /// Tuning constants; `0` (maximum likelihood) is always added as the baseline.
    pub alphas: Vec<f64>,
    /// Contamination fractions; `0` gives a single clean cell.
    pub epsilons: Vec<f64>,
    /// Outlier shifts used for every non-zero fraction.
    pub omega0: Vec<f64>,
    pub leverages: Vec<LeverageName>,
    pub covariate_sd: f64,
    pub solver: SolverOptions,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            design: DesignConfig::default(),
            alphas: vec![0.0, 0.01, 1.0 / 13.0, 0.1, 1.0 / 6.0, 0.2, 0.3, 0.4, 0.5, 0.6],
            epsilons: vec![0.0],
            omega0: linspace(0.0, 10.0, 21),
            leverages: vec![LeverageName::Lev1, LeverageName::Lev20],
            covariate_sd: 0.005,
            solver: SolverOptions::default(),
        }
    }
}

/// One contamination setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub epsilon: f64,
    pub omega0: f64,
    pub leverage: Option<Leverage>,
}

impl Cell {
    pub fn leverage_name(&self) -> &'static str {
        self.leverage.map_or("none", |l| l.name())
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, StudyError> {
        serde_json::from_str(text).map_err(|e| StudyError::Scenario(e.to_string()))
    }

    /// Sorted, deduplicated tuning constants with the baseline `0` included.
    pub fn alpha_grid(&self) -> Vec<f64> {
        let mut a = self.alphas.clone();
        a.push(0.0);
        a.sort_by(f64::total_cmp);
        a.dedup();
        a
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &epsilon in &self.epsilons {
            if epsilon == 0.0 {
                out.push(Cell {
                    epsilon,
                    omega0: 0.0,
                    leverage: None,
                });
                continue;
            }
            for &lev in &self.leverages {
                for &omega0 in &self.omega0 {
                    out.push(Cell {
                        epsilon,
                        omega0,
                        leverage: Some(lev.into()),
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |m: String| Err(StudyError::Scenario(m));
        CrossedDesignSpec::from(&self.design).validate().map_err(|e| StudyError::Scenario(e.to_string()))?;
        if let Some(a) = self.alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return bad(format!("alpha {a} must be finite and non-negative"));
        }
        for &epsilon in &self.epsilons {
            ContaminationSpec {
                epsilon,
                omega0: 0.0,
                leverage: Leverage::Lev1,
                covariate_sd: self.covariate_sd,
            }
            .validate()
            .map_err(|e| StudyError::Scenario(e.to_string()))?;
        }
        if self.epsilons.is_empty() {
            return bad("epsilons is empty".into());
        }
        if self.epsilons.iter().any(|e| *e > 0.0) && (self.omega0.is_empty() || self.leverages.is_empty()) {
            return bad("contaminated cells need at least one omega0 and one leverage".into());
        }
        if self.omega0.iter().any(|w| !w.is_finite()) {
            return bad("omega0 values must be finite".into());
        }
        SolverConfig::from(&self.solver).validate().map_err(|e| StudyError::Scenario(e.to_string()))?;
        Ok(())
    }
}

/// Fitted quantities kept from one replication.
#[derive(Debug, Clone)]
struct Estimate {
    beta: DVector<f64>,
    sigma2: Vec<f64>,
}

/// `[cell][alpha]`; `None` when the fit failed.
type RepOutcome = Vec<Vec<Option<Estimate>>>;

fn run_replication(
    scenario: &Scenario,
    spec: &CrossedDesignSpec,
    cells: &[Cell],
    alphas: &[f64],
    solver: &SolverConfig,
    seed: u64,
) -> Result<RepOutcome, StudyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (clean, sigma0) = generate_crossed(spec, &mut rng)?;
    let mut out = Vec::with_capacity(cells.len());
    for (c, cell) in cells.iter().enumerate() {
        let design = match cell.leverage {
            None => clean.clone(),
            Some(leverage) => {
                let mut crng = ChaCha8Rng::seed_from_u64(seed);
                crng.set_stream(c as u64 + 1);
                let cspec = ContaminationSpec {
                    epsilon: cell.epsilon,
                    omega0: cell.omega0,
                    leverage,
                    covariate_sd: scenario.covariate_sd,
                };
                contaminate_casewise(&clean, &cspec, &sigma0, &spec.beta0, &mut crng)?
            }
        };
        let fits = alphas
            .iter()
            .map(|&a| {
                fit(&design, DpdConfig::new(a).ok()?, solver, None).ok().map(|f| Estimate {
                    beta: f.theta_hat.beta,
                    sigma2: f.theta_hat.sigma2.iter().copied().collect(),
                })
            })
            .collect();
        out.push(fits);
    }
    Ok(out)
}

/// Performance of one tuning constant in one contamination cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub epsilon: F17,
    pub omega0: F17,
    pub leverage: String,
    pub alpha: F17,
    pub msmd: F17,
    pub mkld: F17,
    /// `MSMD(0) / MSMD(alpha)` in the same cell.
    pub msmd_efficiency: F17,
    /// `MKLD(0) / MKLD(alpha)` in the same cell.
    pub mkld_efficiency: F17,
    pub fits_used: usize,
    pub fit_failures: usize,
    /// Replications whose fitted covariance was singular; excluded from `mkld`.
    pub singular: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub scenario: Scenario,
    pub replications: usize,
    pub base_seed: u64,
    pub rows: Vec<CellSummary>,
}

/// Number of worker threads: explicit value, else `MDPDE_THREADS`, else the
/// machine's parallelism.
pub fn resolve_threads(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var("MDPDE_THREADS").ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run_study(scenario: &Scenario, reps: usize, base_seed: u64, threads: usize) -> Result<McReport, StudyError> {
    if reps == 0 {
        return Err(StudyError::Scenario("at least one replication is required".into()));
    }
    scenario.validate()?;
    let spec = CrossedDesignSpec::from(&scenario.design);
    let cells = scenario.cells();
    let alphas = scenario.alpha_grid();
    let solver = SolverConfig::from(&scenario.solver);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| StudyError::Pool(e.to_string()))?;
    let outcomes: Vec<RepOutcome> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|r| run_replication(scenario, &spec, &cells, &alphas, &solver, base_seed.wrapping_add(r as u64)))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let sigma0 = spec.sigma0();
    let mut rows = Vec::with_capacity(cells.len() * alphas.len());
    for (c, cell) in cells.iter().enumerate() {
        let mut cell_rows: Vec<CellSummary> = Vec::with_capacity(alphas.len());
        for (ai, &alpha) in alphas.iter().enumerate() {
            let mut betas = Vec::new();
            let mut covs: Vec<DMatrix<f64>> = Vec::new();
            let mut failures = 0;
            for rep in &outcomes {
                match &rep[c][ai] {
                    Some(e) => {
                        betas.push(e.beta.clone());
                        covs.push(spec.covariance(&e.sigma2)?);
                    }
                    None => failures += 1,
                }
            }
            let (m, k, singular) = if betas.is_empty() {
                (f64::NAN, f64::NAN, Vec::new())
            } else {
                let s = mkld(&covs, &sigma0)?;
                (msmd(&betas, &spec.beta0, &sigma0)?, s.mean, s.singular)
            };
            cell_rows.push(CellSummary {
                epsilon: F17(cell.epsilon),
                omega0: F17(cell.omega0),
                leverage: cell.leverage_name().to_owned(),
                alpha: F17(alpha),
                msmd: F17(m),
                mkld: F17(k),
                msmd_efficiency: F17(f64::NAN),
                mkld_efficiency: F17(f64::NAN),
                fits_used: betas.len(),
                fit_failures: failures,
                singular,
            });
        }
        let (m0, k0) = (cell_rows[0].msmd.0, cell_rows[0].mkld.0);
        for row in &mut cell_rows {
            row.msmd_efficiency = F17(m0 / row.msmd.0);
            row.mkld_efficiency = F17(k0 / row.mkld.0);
        }
        rows.extend(cell_rows);
    }
    Ok(McReport {
        scenario: scenario.clone(),
        replications: reps,
        base_seed,
        rows,
    })
}

impl McReport {
    pub fn find(&self, epsilon: f64, omega0: f64, leverage: &str, alpha: f64) -> Option<&CellSummary> {
        self.rows
            .iter()
            .find(|r| r.epsilon.0 == epsilon && r.omega0.0 == omega0 && r.leverage == leverage && r.alpha.0 == alpha)
    }

    /// Largest value over the outlier shifts of `metric` (`"msmd"` or `"mkld"`).
    pub fn max_over_omega(&self, epsilon: f64, leverage: &str, alpha: f64, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.epsilon.0 == epsilon && r.leverage == leverage && r.alpha.0 == alpha)
            .map(|r| if metric == "msmd" { r.msmd.0 } else { r.mkld.0 })
            .reduce(f64::max)
    }

    /// Long format: `estimator, alpha, epsilon, omega0, leverage, metric, value`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["estimator", "alpha", "epsilon", "omega0", "leverage", "metric", "value"])?;
        for r in &self.rows {
            let metrics = [
                ("msmd", num(r.msmd.0)),
                ("mkld", num(r.mkld.0)),
                ("msmd_eff", num(r.msmd_efficiency.0)),
                ("mkld_eff", num(r.mkld_efficiency.0)),
                ("fits_used", r.fits_used.to_string()),
                ("fit_failures", r.fit_failures.to_string()),
                ("singular", r.singular.len().to_string()),
            ];
            for (metric, value) in metrics {
                w.write_record([
                    "mdpde",
                    &num(r.alpha.0),
                    &num(r.epsilon.0),
                    &num(r.omega0.0),
                    &r.leverage,
                    metric,
                    &value,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text tables: efficiencies on clean cells, maxima over the outlier
    /// shifts on contaminated ones.
    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let alphas = self.scenario.alpha_grid();
        let clean: Vec<&CellSummary> = self.rows.iter().filter(|r| r.leverage == "none").collect();
        if !clean.is_empty() {
            let _ = writeln!(s, "clean data, {} replications", self.replications);
            let _ = writeln!(s, "{:>8} {:>10} {:>10} {:>9} {:>9} {:>6}", "alpha", "MSMD", "MKLD", "MSMD eff", "MKLD eff", "fail");
            for r in clean {
                let _ = writeln!(
                    s,
                    "{:>8.4} {:>10.5} {:>10.5} {:>9.3} {:>9.3} {:>6}",
                    r.alpha.0, r.msmd.0, r.mkld.0, r.msmd_efficiency.0, r.mkld_efficiency.0, r.fit_failures
                );
            }
        }
        let mut eps: Vec<f64> = self.scenario.epsilons.iter().copied().filter(|e| *e > 0.0).collect();
        eps.sort_by(f64::total_cmp);
        eps.dedup();
        for e in eps {
            let levs: Vec<&str> = self.scenario.leverages.iter().map(|l| Leverage::from(*l).name()).collect();
            let _ = writeln!(s, "\nmaximum over omega0, epsilon = {e}, {} replications", self.replications);
            let mut head = format!("{:>8}", "alpha");
            for metric in ["MSMD", "MKLD"] {
                for l in &levs {
                    head.push_str(&format!(" {:>12}", format!("{metric} {l}")));
                }
            }
            let _ = writeln!(s, "{head}");
            for &a in &alphas {
                let mut line = format!("{a:>8.4}");
                for metric in ["msmd", "mkld"] {
                    for l in &levs {
                        let v = self.max_over_omega(e, l, a, metric).unwrap_or(f64::NAN);
                        line.push_str(&format!(" {v:>12.4e}"));
                    }
                }
                let _ = writeln!(s, "{line}");
            }
        }
        let failures: usize = self.rows.iter().map(|r| r.fit_failures).sum();
        let fits: usize = self.rows.iter().map(|r| r.fit_failures + r.fits_used).sum();
        if failures > 0 {
            let _ = writeln!(s, "\nfit failures: {failures} of {fits} ({:.2}%)", 100.0 * failures as f64 / fits as f64);
        }
        s
    }
}

//! Command-line front end.
//!
//! Exit codes: 0 success, 2 input error, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mdpde_core::robustness::influence_path;
use mdpde_core::{
    are_curve, asymptotic_info, fit, influence_beta, influence_sigma, sensitivities, wald_tests, DpdConfig, Error, FitResult,
    GroupedDesign, Sensitivity, SolverConfig, ThetaParams,
};
use nalgebra::DVector;
use serde::{Deserialize, Serialize, Serializer};

use crate::data::{load_design, DataError};
use crate::output::{f17s, write_json, F17};
use crate::study::{resolve_threads, run_study, Scenario, StudyError};

#[derive(Debug, Parser)]
#[command(name = "mdpde", version, about = "Robust fitting of Gaussian linear mixed models by density power divergence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model to a long-format CSV for each tuning constant.
    Fit(FitArgs),
    /// Run a Monte Carlo study on the crossed classification design.
    Simulate(SimulateArgs),
    /// Sensitivities, relative efficiencies and influence curves over a grid.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_theta: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol_obj: f64,
    /// Perturbed restarts [default: 3, or 0 with --init].
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Seed of the restart perturbations.
    #[arg(long, default_value_t = 0)]
    pub solver_seed: u64,
    /// Warm-start each fit along the increasing grid from 0.
    #[arg(long)]
    pub continuation: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated tuning constants.
    #[arg(long, value_delimiter = ',', required = true)]
    pub alpha: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Previous `fit` output used as the starting point.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON; every field is optional.
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub reps: usize,
    #[arg(long)]
    pub seed: u64,
    /// Long-format CSV; the JSON report goes next to it with a `.json` extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads [default: MDPDE_THREADS, else all cores].
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated tuning constants.
    #[arg(long, value_delimiter = ',', required = true)]
    pub alpha_grid: Vec<f64>,
    /// Contaminated group, counted from 1 in file order.
    #[arg(long, default_value_t = 1)]
    pub direction: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::DimensionMismatch(_)
            | Error::InvalidParameter(_)
            | Error::InvalidConfig(_)
            | Error::RankDeficient
            | Error::NotBalanced(_) => Self::Input(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<StudyError> for CliError {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::Scenario(m) => Self::Input(format!("scenario: {m}")),
            StudyError::Pool(m) => Self::Numerical(m),
            StudyError::Core(e) => e.into(),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn check_alphas(alphas: &[f64]) -> Result<Vec<f64>, CliError> {
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(CliError::Input(format!("alpha {a} must be finite and non-negative")));
    }
    let mut grid = alphas.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

impl SolverArgs {
    fn config(&self, grid: &[f64], warm_start: bool) -> SolverConfig {
        let alpha_path = self.continuation.then(|| {
            let mut path = vec![0.0];
            path.extend(grid.iter().copied().filter(|a| *a > 0.0));
            path
        });
        SolverConfig {
            max_iter: self.max_iter,
            tol_theta: self.tol_theta,
            tol_obj: self.tol_obj,
            alpha_path,
            restarts: self.restarts.unwrap_or(if warm_start { 0 } else { 3 }),
            seed: self.solver_seed,
            keep_trace: false,
        }
    }
}

/// Runs a command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupWeight {
    pub group_id: String,
    pub weight: F17,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimate {
    pub converged: bool,
    pub iterations: usize,
    pub objective: F17,
    pub grad_norm: F17,
    pub beta: Vec<F17>,
    /// Error variance first, then one variance per random factor.
    pub sigma2: Vec<F17>,
    /// Standard errors in the order `beta, sigma2`; `null` on the boundary.
    pub se: Vec<F17>,
    pub z: Vec<F17>,
    pub p_values: Vec<F17>,
    /// Indices of variance components estimated at zero.
    pub boundary: Vec<usize>,
    /// Why standard errors are missing, when they all are.
    pub inference_error: Option<String>,
    pub weights: Vec<GroupWeight>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaFit {
    pub alpha: F17,
    pub estimate: Option<Estimate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub n_groups: usize,
    pub n_obs: usize,
    pub k: usize,
    pub r: usize,
    pub fits: Vec<AlphaFit>,
}

impl AlphaFit {
    pub fn theta(&self) -> Option<ThetaParams> {
        let e = self.estimate.as_ref()?;
        let b: Vec<f64> = e.beta.iter().map(|v| v.0).collect();
        let s: Vec<f64> = e.sigma2.iter().map(|v| v.0).collect();
        Some(ThetaParams::from_slices(&b, &s))
    }
}

fn summarize(design: &GroupedDesign, ids: &[String], f: &FitResult) -> Estimate {
    let p = design.n_params();
    let (mut se, mut z, mut pv) = (vec![f64::NAN; p], vec![f64::NAN; p], vec![f64::NAN; p]);
    let mut boundary = Vec::new();
    let mut inference_error = None;
    match asymptotic_info(design, &f.theta_hat, DpdConfig { alpha: f.alpha }) {
        Ok(info) => {
            for (j, w) in wald_tests(f, &info).iter().enumerate() {
                se[j] = w.se.unwrap_or(f64::NAN);
                z[j] = w.z.unwrap_or(f64::NAN);
                pv[j] = w.p_value.unwrap_or(f64::NAN);
                if w.boundary {
                    boundary.push(j - design.k());
                }
            }
        }
        Err(e) => inference_error = Some(e.to_string()),
    }
    Estimate {
        converged: f.converged,
        iterations: f.iterations,
        objective: F17(f.objective),
        grad_norm: F17(f.grad_norm),
        beta: f17s(f.theta_hat.beta.iter().copied()),
        sigma2: f17s(f.theta_hat.sigma2.iter().copied()),
        se: f17s(se),
        z: f17s(z),
        p_values: f17s(pv),
        boundary,
        inference_error,
        weights: ids
            .iter()
            .zip(&f.weights)
            .map(|(id, w)| GroupWeight {
                group_id: id.clone(),
                weight: F17(*w),
            })
            .collect(),
    }
}

fn read_init(path: &Path) -> Result<FitReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Starting point for `alpha` from a previous report: the entry with the same
/// tuning constant, else the first one with an estimate.
fn init_for(report: &FitReport, alpha: f64) -> Option<ThetaParams> {
    report
        .fits
        .iter()
        .find(|f| f.alpha.0 == alpha && f.estimate.is_some())
        .or_else(|| report.fits.iter().find(|f| f.estimate.is_some()))
        .and_then(AlphaFit::theta)
}

pub fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let grid = check_alphas(&args.alpha)?;
    let (design, ids) = load_design(&args.data)?;
    let init = args.init.as_deref().map(read_init).transpose()?;
    let solver = args.solver.config(&grid, init.is_some());
    solver.validate()?;

    let mut fits = Vec::with_capacity(grid.len());
    let mut any_converged = false;
    for &alpha in &grid {
        let start = init.as_ref().and_then(|r| init_for(r, alpha));
        let entry = match fit(&design, DpdConfig::new(alpha)?, &solver, start.as_ref()) {
            Ok(f) => {
                any_converged = true;
                AlphaFit {
                    alpha: F17(alpha),
                    estimate: Some(summarize(&design, &ids, &f)),
                    error: None,
                }
            }
            Err(Error::DidNotConverge(f)) => AlphaFit {
                alpha: F17(alpha),
                estimate: Some(summarize(&design, &ids, &f)),
                error: Some(format!("did not converge after {} iterations", f.iterations)),
            },
            Err(e @ (Error::InvalidConfig(_) | Error::DimensionMismatch(_) | Error::RankDeficient | Error::InvalidParameter(_))) => {
                return Err(e.into())
            }
            Err(e) => AlphaFit {
                alpha: F17(alpha),
                estimate: None,
                error: Some(e.to_string()),
            },
        };
        fits.push(entry);
    }
    let report = FitReport {
        n_groups: design.n_groups(),
        n_obs: design.n_obs(),
        k: design.k(),
        r: design.r(),
        fits,
    };
    write_json(&args.out, &report).map_err(|e| io_err(&args.out, e))?;
    print!("{}", fit_table(&report));
    if any_converged {
        Ok(())
    } else {
        Err(CliError::Numerical("no fit converged".into()))
    }
}

fn fit_table(report: &FitReport) -> String {
    let mut s = String::new();
    for f in &report.fits {
        let _ = write!(s, "alpha = {:.6}", f.alpha.0);
        match &f.estimate {
            Some(e) => {
                let beta: Vec<String> = e.beta.iter().map(|b| format!("{:.6}", b.0)).collect();
                let sig: Vec<String> = e.sigma2.iter().map(|b| format!("{:.6}", b.0)).collect();
                let _ = writeln!(
                    s,
                    "  converged = {}  iterations = {}\n  beta   = [{}]\n  sigma2 = [{}]",
                    e.converged,
                    e.iterations,
                    beta.join(", "),
                    sig.join(", ")
                );
            }
            None => {
                let _ = writeln!(s, "  failed: {}", f.error.as_deref().unwrap_or(""));
            }
        }
    }
    s
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.scenario).map_err(|e| io_err(&args.scenario, e))?;
    let scenario = Scenario::from_json(&text)?;
    let threads = resolve_threads(args.threads);
    let report = run_study(&scenario, args.reps, args.seed, threads)?;

    let mut json_path = args.out.with_extension("json");
    let mut csv_path = args.out.clone();
    if json_path == csv_path {
        csv_path = args.out.with_extension("csv");
        json_path = args.out.clone();
    }
    let file = std::fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    report.write_csv(std::io::BufWriter::new(file)).map_err(|e| io_err(&csv_path, e))?;
    write_json(&json_path, &report).map_err(|e| io_err(&json_path, e))?;
    print!("{}", report.summary());
    Ok(())
}

/// Sensitivity value written as a number, or the string `"inf"`.
#[derive(Debug, Clone, Copy)]
pub struct SensitivityValue(pub Sensitivity);

impl Serialize for SensitivityValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Sensitivity::Finite(v) => F17(v).serialize(s),
            Sensitivity::Infinite => s.serialize_str("inf"),
        }
    }
}

impl std::fmt::Display for SensitivityValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Sensitivity::Finite(v) => write!(f, "{v:.6e}"),
            Sensitivity::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SensitivityRow {
    pub alpha: F17,
    pub ges: SensitivityValue,
    pub sss: SensitivityValue,
    /// Closed forms for a common group covariance; absent otherwise.
    pub balanced_ges: Option<SensitivityValue>,
    pub balanced_sss: Option<SensitivityValue>,
}

#[derive(Debug, Serialize)]
pub struct EfficiencyTable {
    pub parameters: Vec<String>,
    /// One row per tuning constant, percent, evaluated at the `alpha = 0` fit.
    pub rows: Vec<(F17, Vec<F17>)>,
}

#[derive(Debug, Serialize)]
pub struct InfluenceGrid {
    pub alpha: F17,
    pub t: Vec<F17>,
    /// Contamination of the direction group only.
    pub beta_norm: Vec<F17>,
    pub sigma_norm: Vec<F17>,
    pub beta: Vec<Vec<F17>>,
    pub sigma2: Vec<Vec<F17>>,
    /// Every group contaminated at the same point.
    pub all_groups_beta_norm: Vec<F17>,
    pub all_groups_sigma_norm: Vec<F17>,
}

#[derive(Debug, Serialize)]
pub struct DiagnoseReport {
    pub direction: usize,
    pub balanced_group_size: Option<usize>,
    pub alpha_star: Option<F17>,
    pub alpha_bar: Option<F17>,
    pub fits: Vec<(F17, Vec<F17>)>,
    pub sensitivities: Vec<SensitivityRow>,
    pub relative_efficiency: EfficiencyTable,
    pub influence: Vec<InfluenceGrid>,
}

fn parameter_names(design: &GroupedDesign) -> Vec<String> {
    let mut names: Vec<String> = (1..=design.k()).map(|j| format!("beta{j}")).collect();
    names.extend((0..=design.r()).map(|j| format!("sigma2_{j}")));
    names
}

fn fit_or_fail(design: &GroupedDesign, alpha: f64, solver: &SolverConfig) -> Result<FitResult, CliError> {
    fit(design, DpdConfig::new(alpha)?, solver, None).map_err(|e| match e {
        Error::DidNotConverge(_) => CliError::Numerical(format!("fit at alpha = {alpha} did not converge")),
        e => e.into(),
    })
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    let grid = check_alphas(&args.alpha_grid)?;
    let (design, _) = load_design(&args.data)?;
    let n = design.n_groups();
    if args.direction == 0 || args.direction > n {
        return Err(CliError::Input(format!("direction {} out of range 1..={n}", args.direction)));
    }
    let i0 = args.direction - 1;
    let solver = args.solver.config(&grid, false);
    solver.validate()?;

    let mle = fit_or_fail(&design, 0.0, &solver)?;
    let ts: Vec<f64> = (-100..=100).map(|i| i as f64 / 10.0).collect();
    let m = design.group(i0).len();
    let mut fits = Vec::new();
    let mut rows = Vec::new();
    let mut influence = Vec::new();
    let mut balance = (None, None, None);
    for &alpha in &grid {
        let f = if alpha == 0.0 { mle.clone() } else { fit_or_fail(&design, alpha, &solver)? };
        let cfg = DpdConfig::new(alpha)?;
        let theta = &f.theta_hat;
        fits.push((F17(alpha), f17s(theta.to_vec())));

        let s = sensitivities(&design, theta, cfg, i0)?;
        balance = (design.balanced_size(), s.alpha_star, s.alpha_bar);
        rows.push(SensitivityRow {
            alpha: F17(alpha),
            ges: SensitivityValue(s.ges),
            sss: SensitivityValue(s.sss),
            balanced_ges: s.balanced.map(|b| SensitivityValue(b.ges)),
            balanced_sss: s.balanced.map(|b| SensitivityValue(b.sss)),
        });

        let mut g = InfluenceGrid {
            alpha: F17(alpha),
            t: f17s(ts.iter().copied()),
            beta_norm: Vec::new(),
            sigma_norm: Vec::new(),
            beta: Vec::new(),
            sigma2: Vec::new(),
            all_groups_beta_norm: Vec::new(),
            all_groups_sigma_norm: Vec::new(),
        };
        for &t in &ts {
            let point = DVector::from_element(m, t);
            let b = influence_beta(&design, theta, cfg, i0, &point)?;
            let sg = influence_sigma(&design, theta, cfg, i0, &point)?;
            g.beta_norm.push(F17(b.norm()));
            g.sigma_norm.push(F17(sg.norm()));
            g.beta.push(f17s(b.iter().copied()));
            g.sigma2.push(f17s(sg.iter().copied()));
        }
        for (b, sg) in influence_path(&design, theta, cfg, &ts)? {
            g.all_groups_beta_norm.push(F17(b.norm()));
            g.all_groups_sigma_norm.push(F17(sg.norm()));
        }
        influence.push(g);
    }

    let names = parameter_names(&design);
    let mut columns = Vec::with_capacity(names.len());
    for j in 0..names.len() {
        columns.push(are_curve(&design, &mle.theta_hat, &grid, j)?);
    }
    let are_rows = grid
        .iter()
        .enumerate()
        .map(|(i, &a)| (F17(a), columns.iter().map(|c| F17(c[i])).collect()))
        .collect();

    let report = DiagnoseReport {
        direction: args.direction,
        balanced_group_size: balance.0,
        alpha_star: balance.1.map(F17),
        alpha_bar: balance.2.map(F17),
        fits,
        sensitivities: rows,
        relative_efficiency: EfficiencyTable {
            parameters: names,
            rows: are_rows,
        },
        influence,
    };
    write_json(&args.out, &report).map_err(|e| io_err(&args.out, e))?;
    print!("{}", diagnose_table(&report));
    Ok(())
}

fn diagnose_table(r: &DiagnoseReport) -> String {
    let mut s = String::new();
    if let (Some(p), Some(a), Some(b)) = (r.balanced_group_size, r.alpha_star, r.alpha_bar) {
        let _ = writeln!(s, "balanced, p = {p}: alpha* = {:.4}, alpha-bar = {:.4}", a.0, b.0);
    }
    let _ = writeln!(s, "{:>8} {:>14} {:>14}", "alpha", "GES", "SSS");
    for row in &r.sensitivities {
        let _ = writeln!(s, "{:>8.4} {:>14} {:>14}", row.alpha.0, row.ges.to_string(), row.sss.to_string());
    }
    let _ = write!(s, "\nrelative efficiency (%)\n{:>8}", "alpha");
    for name in &r.relative_efficiency.parameters {
        let _ = write!(s, " {name:>9}");
    }
    s.push('\n');
    for (a, vals) in &r.relative_efficiency.rows {
        let _ = write!(s, "{:>8.4}", a.0);
        for v in vals {
            let _ = write!(s, " {:>9.3}", v.0);
        }
        s.push('\n');
    }
    s
}


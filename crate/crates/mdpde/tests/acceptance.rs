//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line
//! to standard output, uncaptured, and the test fails if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::process::Command;
use std::time::Instant;

use common::*;
use mdpde::study::{linspace, run_study, LeverageName, Scenario};
use mdpde_core::divergence::density_power_integral;
use mdpde_core::robustness::{ges_alpha_factor, influence_path, sss_alpha_factor};
use mdpde_core::simulation::{generate_crossed, kld, msmd, CrossedDesignSpec};
use mdpde_core::{asymptotic_info, eval_objective, fit, sensitivities, DpdConfig, SolverConfig, ThetaParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(a: f64) -> DpdConfig {
    DpdConfig::new(a).unwrap()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(id: usize, name: &str, limit_s: f64, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = run();
    let secs = start.elapsed().as_secs_f64();
    let line = format!(
        "AC{id:<2} {} {name}: {} [{secs:.1} s, target < {limit_s} s]\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    o.pass
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(3..=10);
        let r = rng.random_range(0..=2);
        let k = rng.random_range(1..=3);
        let d = random_design(&mut rng, n, 6, k, r);
        let theta = random_theta(&mut rng, k, r);
        for alpha in [0.0, 0.1, 0.5, 1.0] {
            let analytic = eval_objective(&d, &theta, cfg(alpha)).unwrap().gradient();
            let f = |x: &[f64]| eval_objective(&d, &ThetaParams::from_flat(x, k), cfg(alpha)).unwrap().value;
            // Richardson extrapolation of central differences, error O(h^4)
            let x = theta.to_vec();
            let (coarse, fine) = (fd_gradient(f, &x, 1e-3), fd_gradient(f, &x, 5e-4));
            let fd: Vec<f64> = coarse.iter().zip(&fine).map(|(c, h)| (4.0 * h - c) / 3.0).collect();
            for (a, b) in analytic.iter().zip(&fd) {
                let scale = a.abs().max(b.abs());
                if scale > 0.0 {
                    worst = worst.max((a - b).abs() / scale);
                }
            }
        }
    }
    outcome(worst <= 1e-5, format!("max relative error {worst:.2e} (tol 1e-5)"))
}

fn closed_form_integral() -> Outcome {
    let mut worst = 0.0f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    for (s2, alpha) in [(0.7f64, 0.3), (2.0, 0.1), (1.0, 1.0)] {
        let lim = 12.0 * s2.sqrt();
        let quad = simpson_panels(
            &|y: f64| ((1.0 + alpha) * (-0.5 * y * y / s2 - 0.5 * (two_pi * s2).ln())).exp(),
            -lim,
            lim,
            24,
            1e-13,
        );
        let closed = density_power_integral(1, s2.ln(), alpha);
        worst = worst.max((quad - closed).abs() / closed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for alpha in [0.3, 0.05] {
        let a = DMatrix::from_fn(2, 2, |_, _| normal(&mut rng));
        let v = &a * a.transpose() + DMatrix::identity(2, 2) * 0.5;
        let vinv = v.clone().try_inverse().unwrap();
        let log_norm = -(two_pi).ln() - 0.5 * v.determinant().ln();
        let lim = 10.0 * v.symmetric_eigenvalues().max().sqrt();
        let dens = |x: f64, y: f64| {
            let q = vinv[(0, 0)] * x * x + 2.0 * vinv[(0, 1)] * x * y + vinv[(1, 1)] * y * y;
            ((1.0 + alpha) * (log_norm - 0.5 * q)).exp()
        };
        let quad = simpson_2d(&dens, (-lim, lim), (-lim, lim), 1e-11);
        let closed = density_power_integral(2, v.determinant().ln(), alpha);
        worst = worst.max((quad - closed).abs() / closed);
    }
    outcome(worst <= 1e-8, format!("max relative error {worst:.2e} over n_i = 1, 2 (tol 1e-8)"))
}

fn mle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let d = simulate(&two_level_structure(30, &mut rng), &two_level_theta(), &mut rng);
        let f = fit(&d, cfg(0.0), &SolverConfig::default(), None).unwrap();
        let oracle = mle_oracle(&d, &[0.3, 0.3, 0.3]);
        let diff = f
            .theta_hat
            .to_vec()
            .iter()
            .zip(oracle.to_vec())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff);
    }
    outcome(worst <= 1e-6, format!("max |theta - oracle| {worst:.2e} on 10 datasets (tol 1e-6)"))
}

fn balanced_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = two_level_structure(50, &mut rng);
    let theta = two_level_theta();
    let p = 10.0;
    let mut s = DMatrix::zeros(2, 2);
    for g in d.groups() {
        let vinv = group_cov(g, theta.sigma2.as_slice()).try_inverse().unwrap();
        s += g.x().transpose() * vinv * g.x();
    }
    let s_inv = s.try_inverse().unwrap();
    let mut worst = 0.0f64;
    for a in [0.1, 0.3, 0.6] {
        let ups = (1.0f64 + a).powf(p + 2.0) / (1.0 + 2.0 * a).powf(p / 2.0 + 1.0);
        let expect = &s_inv * ups;
        let got = asymptotic_info(&d, &theta, cfg(a)).unwrap().avar.view((0, 0), (2, 2)).into_owned();
        worst = worst.max((got - &expect).amax() / expect.amax());
    }
    outcome(worst <= 1e-8, format!("max relative deviation {worst:.2e} (tol 1e-8)"))
}

fn optimal_tuning_constants() -> Outcome {
    let h = 1e-4;
    let argmin = |f: &dyn Fn(f64) -> f64, hi: f64| {
        let steps = (hi / h).round() as usize;
        (1..steps).map(|i| i as f64 * h).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap()
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for p in [4usize, 10, 12] {
        let a_ges = argmin(&|a| ges_alpha_factor(a, p), 1.0);
        let a_sss = argmin(&|a| sss_alpha_factor(a, p), 2.0);
        ok &= (a_ges - 1.0 / (p as f64 + 1.0)).abs() <= h && (a_sss - 2.0 / p as f64).abs() <= h;
        parts.push(format!("p={p}: {a_ges:.4}/{a_sss:.4}"));
    }
    outcome(ok, format!("grid argmins {} (step 1e-4)", parts.join(", ")))
}

fn sensitivity_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let two_level = two_level_structure(50, &mut rng);
    let spec = CrossedDesignSpec { n: 40, ..Default::default() };
    let (crossed, _) = generate_crossed(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let crossed_theta = ThetaParams::from_slices(&spec.beta0, &spec.sigma2());
    for (d, theta) in [(&two_level, two_level_theta()), (&crossed, crossed_theta)] {
        for alpha in [0.01, 0.05, 0.2, 0.5, 1.0] {
            for i0 in [0, 7] {
                let rep = sensitivities(d, &theta, cfg(alpha), i0).unwrap();
                let bal = rep.balanced.unwrap();
                for (a, b) in [(rep.ges, bal.ges), (rep.sss, bal.sss)] {
                    let (a, b) = (a.value().unwrap(), b.value().unwrap());
                    worst = worst.max((a - b).abs() / b.abs());
                }
            }
        }
    }
    outcome(worst <= 1e-10, format!("max relative difference {worst:.2e} (tol 1e-10)"))
}

fn influence_boundedness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = two_level_structure(50, &mut rng);
    let theta = two_level_theta();
    let ts: Vec<f64> = (-100..=100).map(|i| i as f64 / 10.0).collect();
    let norms = |alpha: f64, cs: &[f64]| -> Vec<f64> {
        influence_path(&d, &theta, cfg(alpha), cs).unwrap().iter().map(|(b, s)| (b.norm_squared() + s.norm_squared()).sqrt()).collect()
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for alpha in [0.05, 0.3, 0.6] {
        let v = norms(alpha, &ts);
        let (imax, max) = v.iter().enumerate().fold((0, 0.0), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
        let far = norms(alpha, &[-1e4, 1e4]);
        let interior = imax > 0 && imax < ts.len() - 1;
        ok &= interior && far.iter().all(|&f| f < max);
        parts.push(format!("a={alpha}: max {max:.3} at t={}", ts[imax]));
    }
    let v = norms(0.0, &ts);
    let imin = (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let valley = v[..=imin].windows(2).all(|w| w[1] < w[0]) && v[imin..].windows(2).all(|w| w[1] > w[0]);
    let far = norms(0.0, &[-1e4, 1e4]);
    ok &= valley && far.iter().all(|&f| f > 100.0 * v[0].max(v[v.len() - 1]));
    parts.push(format!("a=0: monotone to both edges {valley}, |IF| at 1e4 = {:.2e}", far[1]));
    outcome(ok, parts.join("; "))
}

fn table1_reproduction() -> Outcome {
    let scenario = Scenario {
        alphas: vec![0.0, 0.01, 0.1],
        epsilons: vec![0.0],
        ..Default::default()
    };
    let r = run_study(&scenario, 100, 20_240_101, 4).unwrap();
    let row = |a: f64| r.find(0.0, 0.0, "none", a).unwrap();
    let (m1, k1) = (row(0.1).msmd_efficiency.0, row(0.1).mkld_efficiency.0);
    let (m01, k01) = (row(0.01).msmd_efficiency.0, row(0.01).mkld_efficiency.0);
    let ok = (m1 - 0.937).abs() <= 0.05 && (k1 - 0.915).abs() <= 0.05 && m01 >= 0.95 && k01 >= 0.95;
    let failures: usize = r.rows.iter().map(|x| x.fit_failures).sum();
    outcome(
        ok,
        format!("alpha=0.1 MSMD eff {m1:.3} (0.937 +- 0.05), MKLD eff {k1:.3} (0.915 +- 0.05); alpha=0.01 {m01:.3}/{k01:.3} (>= 0.95); {failures} failed fits"),
    )
}

fn table2_reproduction() -> Outcome {
    let abar = 1.0 / 6.0;
    let scenario = Scenario {
        alphas: vec![0.0, abar],
        epsilons: vec![0.1],
        omega0: linspace(0.0, 10.0, 11),
        leverages: vec![LeverageName::Lev1, LeverageName::Lev20],
        ..Default::default()
    };
    let r = run_study(&scenario, 100, 20_240_202, 4).unwrap();
    let max = |lev: &str, a: f64| r.max_over_omega(0.1, lev, a, "msmd").unwrap();
    let (m0_1, m0_20, mb_1, mb_20) = (max("lev1", 0.0), max("lev20", 0.0), max("lev1", abar), max("lev20", abar));
    let ok = m0_1 > 5.0 && mb_1 < 0.3 && mb_20 < 0.2 && mb_1 < m0_1 && mb_20 < m0_20;
    let failures: usize = r.rows.iter().map(|x| x.fit_failures).sum();
    outcome(
        ok,
        format!(
            "max MSMD alpha=0 lev1 {m0_1:.3} (> 5), lev20 {m0_20:.3}; alpha-bar lev1 {mb_1:.3} (< 0.3), lev20 {mb_20:.3} (< 0.2); {failures} failed fits"
        ),
    )
}

fn metric_identities() -> Outcome {
    let spec = CrossedDesignSpec::default();
    let s0 = spec.sigma0();
    let p = spec.p() as f64;
    let a = kld(&s0, &s0).unwrap().abs();
    let b = (kld(&(&s0 * 2.0), &s0).unwrap() - p * (1.0 - 2f64.ln())).abs();
    let c = msmd(&[DVector::from_column_slice(&spec.beta0)], &spec.beta0, &s0).unwrap().abs();
    let worst = a.max(b).max(c);
    outcome(worst <= 1e-10, format!("KLD(S,S) {a:.1e}, KLD(2S,S) error {b:.1e}, MSMD(beta0) {c:.1e} (tol 1e-10)"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("contaminated.json");
    std::fs::write(
        &scenario,
        r#"{"design": {"n": 40}, "alphas": [0.1, 0.2], "epsilons": [0, 0.1], "omega0": [0, 4, 8]}"#,
    )
    .unwrap();
    let default = dir.path().join("default.json");
    std::fs::write(&default, "{}").unwrap();
    let run = |sc: &std::path::Path, reps: &str, threads: &str, tag: &str| -> Option<(Vec<u8>, Vec<u8>)> {
        let out = dir.path().join(format!("{tag}.csv"));
        let status = Command::new(env!("CARGO_BIN_EXE_mdpde"))
            .args(["simulate", "--scenario"])
            .arg(sc)
            .args(["--reps", reps, "--seed", "7", "--threads", threads, "--out"])
            .arg(&out)
            .output()
            .ok()?;
        status.status.success().then_some(())?;
        Some((std::fs::read(&out).ok()?, std::fs::read(out.with_extension("json")).ok()?))
    };
    let mut ok = true;
    let mut runs = 0;
    for (sc, reps, name) in [(&default, "1", "default"), (&scenario, "4", "contaminated")] {
        let outputs: Vec<_> = [("1", "a"), ("1", "b"), ("3", "c")]
            .iter()
            .map(|(t, tag)| run(sc, reps, t, &format!("{name}-{tag}")))
            .collect();
        runs += outputs.len();
        ok &= outputs.iter().all(|o| o.is_some()) && outputs.windows(2).all(|w| w[0] == w[1]);
    }
    outcome(ok, format!("{runs} runs, CSV and JSON bit-identical across repeats and 1 vs 3 threads: {ok}"))
}

fn wald_coverage() -> Outcome {
    let spec = CrossedDesignSpec { n: 200, ..Default::default() };
    let truth = spec.beta0[1];
    let z = 1.959_963_984_540_054;
    let alphas = [0.0, 1.0 / 6.0];
    let mut hits = [0usize; 2];
    let mut used = [0usize; 2];
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_303);
    for _ in 0..1000 {
        let (d, _) = generate_crossed(&spec, &mut rng).unwrap();
        for (j, &a) in alphas.iter().enumerate() {
            let Ok(f) = fit(&d, cfg(a), &SolverConfig::default(), None) else { continue };
            let Ok(info) = asymptotic_info(&d, &f.theta_hat, cfg(a)) else { continue };
            let Some(se) = info.se[1] else { continue };
            used[j] += 1;
            if (f.theta_hat.beta[1] - truth).abs() <= z * se {
                hits[j] += 1;
            }
        }
    }
    let cov: Vec<f64> = (0..2).map(|j| hits[j] as f64 / used[j].max(1) as f64).collect();
    let ok = used.iter().all(|&u| u == 1000) && cov.iter().all(|c| (0.93..=0.97).contains(c));
    outcome(
        ok,
        format!(
            "coverage of beta_1: alpha=0 {:.1}% ({} fits), alpha=1/6 {:.1}% ({} fits), target [93%, 97%]",
            100.0 * cov[0],
            used[0],
            100.0 * cov[1],
            used[1]
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let results = [
        report(1, "analytic gradient vs central differences", 10.0, gradient_correctness),
        report(2, "closed-form density power integral", 5.0, closed_form_integral),
        report(3, "alpha = 0 fit equals direct likelihood maximization", 30.0, mle_equivalence),
        report(4, "balanced fixed-effect covariance closed form", 5.0, balanced_closed_form),
        report(5, "optimal tuning constants", 5.0, optimal_tuning_constants),
        report(6, "general and balanced sensitivities agree", 5.0, sensitivity_equivalence),
        report(7, "influence bounded for alpha > 0, unbounded at alpha = 0", 5.0, influence_boundedness),
        report(8, "clean-data efficiencies", 600.0, table1_reproduction),
        report(9, "maximum MSMD under 10% contamination", 900.0, table2_reproduction),
        report(10, "metric identities", 1.0, metric_identities),
        report(11, "simulate output is deterministic", 120.0, determinism),
        report(12, "Wald interval coverage", 600.0, wald_coverage),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

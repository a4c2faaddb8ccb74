//! Designs and independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

use mdpde_core::{GroupBlock, GroupedDesign, ThetaParams};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random-intercept plus two-level random-slope layout: group size `p = 10`,
/// `Z_1 = 1`, `Z_2` the indicator of the first and second half of the rows,
/// `X = [1, N(0, 1)]`.
pub fn two_level_structure<R: Rng + ?Sized>(n: usize, rng: &mut R) -> GroupedDesign {
    let p = 10;
    let z1 = DMatrix::from_element(p, 1, 1.0);
    let z2 = DMatrix::from_fn(p, 2, |row, c| if (row < 5) == (c == 0) { 1.0 } else { 0.0 });
    let groups = (0..n)
        .map(|_| {
            let x = DMatrix::from_fn(p, 2, |_, c| if c == 0 { 1.0 } else { normal(rng) });
            GroupBlock::new(DVector::zeros(p), x, vec![z1.clone(), z2.clone()]).unwrap()
        })
        .collect();
    GroupedDesign::new(groups).unwrap()
}

/// `beta = (1, 2)`, `(s0, s1, s2) = (0.25, 0.25, 0.5)`.
pub fn two_level_theta() -> ThetaParams {
    ThetaParams::from_slices(&[1.0, 2.0], &[0.25, 0.25, 0.5])
}

/// Replaces every response by a draw from the model at `theta`.
pub fn simulate<R: Rng + ?Sized>(design: &GroupedDesign, theta: &ThetaParams, rng: &mut R) -> GroupedDesign {
    let groups = design
        .groups()
        .iter()
        .map(|g| {
            let n = g.len();
            let mut v = DMatrix::identity(n, n) * theta.sigma2[0];
            for (zj, s) in g.z().iter().zip(theta.sigma2.iter().skip(1)) {
                v += zj * zj.transpose() * *s;
            }
            let l = v.cholesky().unwrap().l();
            let e = DVector::from_fn(n, |_, _| normal(rng));
            g.with_response(g.x() * &theta.beta + l * e).unwrap()
        })
        .collect();
    design.with_groups(groups).unwrap()
}

/// Unbalanced design with `n` groups of random size in `1..=max_ni`, `k`
/// fixed effects and `r` random factors with 1 or 2 columns each.
pub fn random_design<R: Rng + ?Sized>(rng: &mut R, n: usize, max_ni: usize, k: usize, r: usize) -> GroupedDesign {
    let q: Vec<usize> = (0..r).map(|_| rng.random_range(1..=2)).collect();
    let groups = (0..n)
        .map(|_| {
            let ni = rng.random_range(1..=max_ni);
            let x = DMatrix::from_fn(ni, k, |_, c| if c == 0 { 1.0 } else { normal(rng) });
            let z = q.iter().map(|&qj| DMatrix::from_fn(ni, qj, |_, _| normal(rng))).collect();
            let y = DVector::from_fn(ni, |_, _| 2.0 * normal(rng));
            GroupBlock::new(y, x, z).unwrap()
        })
        .collect();
    GroupedDesign::new(groups).unwrap()
}

pub fn random_theta<R: Rng + ?Sized>(rng: &mut R, k: usize, r: usize) -> ThetaParams {
    let beta: Vec<f64> = (0..k).map(|_| normal(rng)).collect();
    let sigma2: Vec<f64> = (0..=r).map(|_| rng.random_range(0.3..1.5)).collect();
    ThetaParams::from_slices(&beta, &sigma2)
}

/// Central differences with step `h max(1, |x_j|)`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let step = h * x[j].abs().max(1.0);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += step;
            xm[j] -= step;
            (f(&xp) - f(&xm)) / (2.0 * step)
        })
        .collect()
}

/// Central second differences.
pub fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let at = |d: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(j, s) in d {
            y[j] += s;
        }
        f(&y)
    };
    for a in 0..n {
        let ha = h * x[a].abs().max(1.0);
        for b in a..n {
            let hb = h * x[b].abs().max(1.0);
            let v = (at(&[(a, ha), (b, hb)]) - at(&[(a, ha), (b, -hb)]) - at(&[(a, -ha), (b, hb)]) + at(&[(a, -ha), (b, -hb)]))
                / (4.0 * ha * hb);
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    hess
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature on `[a, b]` with absolute tolerance `tol`.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Adaptive Simpson over `panels` equal subintervals, guarding against
/// false convergence when the coarse nodes miss the mass.
pub fn simpson_panels(f: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize, tol: f64) -> f64 {
    let w = (b - a) / panels as f64;
    (0..panels).map(|i| simpson(f, a + i as f64 * w, a + (i + 1) as f64 * w, tol / panels as f64)).sum()
}

/// Nested adaptive Simpson on a rectangle.
pub fn simpson_2d(f: &dyn Fn(f64, f64) -> f64, (ax, bx): (f64, f64), (ay, by): (f64, f64), tol: f64) -> f64 {
    let inner_tol = tol / (bx - ax).max(1.0);
    let outer = |x: f64| simpson(&|y| f(x, y), ay, by, inner_tol);
    simpson(&outer, ax, bx, tol)
}

/// Nelder-Mead simplex minimizer. Returns the best vertex and its value.
pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, ftol: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for j in 0..n {
        let mut v = x0.to_vec();
        v[j] += step;
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..max_iter {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        if (vals[n] - vals[0]).abs() <= ftol * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < vals[n] {
                let xc = along(-0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (simplex[best].clone(), vals[best])
}

/// `V_i` assembled independently of the library.
pub fn group_cov(g: &GroupBlock, sigma2: &[f64]) -> DMatrix<f64> {
    let n = g.len();
    let mut v = DMatrix::identity(n, n) * sigma2[0];
    for (zj, s) in g.z().iter().zip(&sigma2[1..]) {
        v += zj * zj.transpose() * *s;
    }
    v
}

/// Negative log-likelihood through explicit LU inverses and determinants,
/// `beta` profiled out by generalized least squares.
pub fn profiled_nll(design: &GroupedDesign, sigma2: &[f64]) -> (f64, DVector<f64>) {
    let k = design.k();
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    let mut invs = Vec::new();
    let mut logdet = 0.0;
    for g in design.groups() {
        let v = group_cov(g, sigma2);
        let lu = v.clone().lu();
        logdet += lu.determinant().ln();
        let vinv = lu.try_inverse().unwrap();
        a += g.x().transpose() * &vinv * g.x();
        b += g.x().transpose() * &vinv * g.y();
        invs.push(vinv);
    }
    let beta = a.lu().solve(&b).unwrap();
    let mut q = 0.0;
    for (g, vinv) in design.groups().iter().zip(&invs) {
        let r = g.y() - g.x() * &beta;
        q += (r.transpose() * vinv * &r)[(0, 0)];
    }
    let n_obs = design.n_obs() as f64;
    (0.5 * (n_obs * (2.0 * std::f64::consts::PI).ln() + logdet + q), beta)
}

/// Maximum likelihood by Nelder-Mead on log variances, polished by Newton
/// steps with finite-difference derivatives.
pub fn mle_oracle(design: &GroupedDesign, start: &[f64]) -> ThetaParams {
    let f = |x: &[f64]| {
        let s: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        profiled_nll(design, &s).0
    };
    let x0: Vec<f64> = start.iter().map(|v| v.ln()).collect();
    let (mut x, _) = nelder_mead(&f, &x0, 0.3, 1e-15, 20_000);
    for _ in 0..5 {
        let g = DVector::from_vec(fd_gradient(f, &x, 1e-5));
        let h = fd_hessian(f, &x, 1e-4);
        let step = h.lu().solve(&g).unwrap();
        for (xi, si) in x.iter_mut().zip(step.iter()) {
            *xi -= si;
        }
    }
    let s: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let (_, beta) = profiled_nll(design, &s);
    ThetaParams::new(beta, DVector::from_vec(s))
}

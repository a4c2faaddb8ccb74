//! Projected BFGS with Armijo backtracking for lower-bounded problems.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_BACKTRACK: usize = 60;
const MAX_STALLS: usize = 3;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Settings {
    pub max_iter: usize,
    pub tol_step: f64,
    pub tol_obj: f64,
    /// Projected-gradient tolerance, relative to `max(1, |f|)`.
    pub tol_grad: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub proj_grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<(f64, f64)>,
}

fn project(x: &mut [f64], lower: &[f64]) {
    for (xi, lo) in x.iter_mut().zip(lower) {
        if *xi < *lo {
            *xi = *lo;
        }
    }
}

fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lower)
        .map(|((xi, gi), lo)| if *xi <= *lo && *gi > 0.0 { 0.0 } else { *gi })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, a| m.max(a.abs()))
}

/// Minimizes `f` subject to `x >= lower` (use `-inf` for free coordinates).
pub(crate) fn minimize<F>(mut f: F, x0: &[f64], lower: &[f64], s: &Settings) -> Result<Outcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let dim = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lower);
    let (mut fx, mut g) = f(&x)?;
    let mut pg = projected_gradient(&x, &g, lower);
    let mut h = DMatrix::<f64>::identity(dim, dim);
    let mut fresh = true;
    let mut stalls = 0;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    if inf_norm(&pg) <= s.tol_grad * fx.abs().max(1.0) {
        converged = true;
    }

    while !converged && iterations < s.max_iter {
        iterations += 1;
        let free: Vec<bool> = pg.iter().zip(&x).zip(lower).map(|((p, xi), lo)| !(*xi <= *lo && *p == 0.0)).collect();

        let mut d = vec![0.0; dim];
        if fresh {
            let scale = 0.1 * inf_norm(&x).max(1.0) / inf_norm(&pg).max(f64::MIN_POSITIVE);
            for j in 0..dim {
                d[j] = -pg[j] * scale;
            }
        } else {
            for a in 0..dim {
                if !free[a] {
                    continue;
                }
                let mut acc = 0.0;
                for b in 0..dim {
                    if free[b] {
                        acc += h[(a, b)] * pg[b];
                    }
                }
                d[a] = -acc;
            }
            let slope: f64 = d.iter().zip(&pg).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) {
                h.fill_with_identity();
                fresh = true;
                continue;
            }
        }

        // Backtracking along the projected path.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            project(&mut trial, lower);
            let decrease: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (t, xi))| gi * (t - xi)).sum();
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + ARMIJO_C * decrease.min(0.0) {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= SHRINK;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            if fresh {
                stalls += 1;
                if stalls >= MAX_STALLS {
                    break;
                }
            }
            h.fill_with_identity();
            fresh = true;
            continue;
        };

        let sv = DVector::from_iterator(dim, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(dim, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = sv.dot(&yv);
        if sy > 1e-12 * sv.norm() * yv.norm() && sy > 0.0 {
            if fresh {
                h.fill_with_identity();
                h *= sy / yv.norm_squared();
            }
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H - rho (s hy^T + hy s^T) + (rho^2 yHy + rho) s s^T
            h -= (&sv * hy.transpose() + &hy * sv.transpose()) * rho;
            h += &sv * sv.transpose() * (rho * rho * yhy + rho);
            fresh = false;
        }

        let rel_step = inf_norm(sv.as_slice()) / inf_norm(&x_new).max(1.0);
        let dobj = (fx - f_new).abs();
        trace.push((f_new, step));
        x = x_new;
        fx = f_new;
        g = g_new;
        pg = projected_gradient(&x, &g, lower);

        let gtol = s.tol_grad * fx.abs().max(1.0);
        let pg_norm = inf_norm(&pg);
        if pg_norm == 0.0 {
            converged = true;
        } else if rel_step < s.tol_step && dobj < s.tol_obj * fx.abs().max(1.0) {
            if pg_norm <= gtol {
                converged = true;
            } else {
                stalls += 1;
                if stalls >= MAX_STALLS {
                    break;
                }
                h.fill_with_identity();
                fresh = true;
            }
        } else {
            stalls = 0;
        }
    }

    let proj_grad_norm = inf_norm(&pg);
    Ok(Outcome {
        x,
        f: fx,
        proj_grad_norm,
        iterations,
        converged,
        trace,
    })
}

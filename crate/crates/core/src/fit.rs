//! Small nonlinear least-squares solver (Levenberg–Marquardt with a
//! forward-difference Jacobian).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when the relative cost decrease falls below this.
    pub ftol: f64,
    /// Stop when the relative parameter step falls below this.
    pub xtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions { max_iter: 200, ftol: 1e-12, xtol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Minimize `Σ r_i(p)²`. Non-finite residuals count as an infinitely bad
/// step.
pub fn levenberg_marquardt<F>(residuals: F, p0: &[f64], opts: LmOptions) -> Result<LmResult>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let np = p0.len();
    let mut p = p0.to_vec();
    let mut r = residuals(&p);
    let nr = r.len();
    if nr < np {
        return Err(Error::Fit(format!("{nr} residuals for {np} parameters")));
    }
    let mut cost = sum_sq(&r);
    if !cost.is_finite() {
        return Err(Error::Fit("non-finite residuals at the starting point".into()));
    }
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut jac = DMatrix::<f64>::zeros(nr, np);
        for j in 0..np {
            let h = 1e-7 * p[j].abs().max(1e-7);
            let mut q = p.clone();
            q[j] += h;
            let rq = residuals(&q);
            for i in 0..nr {
                jac[(i, j)] = (rq[i] - r[i]) / h;
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * rv;
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..np {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = a.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let q: Vec<f64> = p.iter().zip(step.iter()).map(|(x, d)| x + d).collect();
            let rq = residuals(&q);
            let cq = sum_sq(&rq);
            if cq.is_finite() && cq <= cost {
                let rel_step = step
                    .iter()
                    .zip(&p)
                    .map(|(d, x)| d.abs() / (x.abs() + 1e-12))
                    .fold(0.0, f64::max);
                let rel_cost = (cost - cq) / cost.max(1e-300);
                p = q;
                r = rq;
                cost = cq;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel_cost < opts.ftol || rel_step < opts.xtol {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step at any damping: a (local) minimum.
            converged = true;
        }
        if converged {
            break;
        }
    }
    Ok(LmResult { params: p, cost, iterations, converged })
}

/// Weighted straight-line fit `y = a + b·x`. Returns `(a, b)`.
pub fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    let sx: f64 = x.iter().zip(w).map(|(x, w)| w * x).sum();
    let sy: f64 = y.iter().zip(w).map(|(y, w)| w * y).sum();
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * x * x).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((x, y), w)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    if !(det.abs() > 1e-300) {
        return Err(Error::Fit("degenerate abscissae".into()));
    }
    let b = (sw * sxy - sx * sy) / det;
    let a = (sy - b * sx) / sw;
    Ok((a, b))
}

//! Bounded Levenberg-Marquardt least squares with deterministic multi-start.
//!
//! Minimises `chi^2 = sum ((y - f(p)) / sigma)^2`. Bounds are enforced by
//! projecting every trial step onto the box. The covariance is
//! `(J^T W J)^{-1}` scaled by the reduced chi^2.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct NlsOptions {
    pub max_iter: usize,
    /// Stop when an accepted step lowers chi^2 by less than this fraction.
    pub ftol: f64,
    /// Stop when every parameter moves by less than this fraction.
    pub xtol: f64,
    /// Normalised curvature condition number beyond which the fit is
    /// declared degenerate.
    pub cond_limit: f64,
    /// Scale the covariance by the reduced chi^2.
    pub scale_covariance: bool,
}

impl Default for NlsOptions {
    fn default() -> Self {
        Self {
            max_iter: 400,
            ftol: 1e-12,
            xtol: 1e-10,
            cond_limit: 1e12,
            scale_covariance: true,
        }
    }
}

/// Model predictions `f(p)` for every data point.
pub trait Model: Sync {
    fn eval(&self, p: &[f64]) -> Vec<f64>;
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> Model for F {
    fn eval(&self, p: &[f64]) -> Vec<f64> {
        self(p)
    }
}

pub struct NlsProblem<'a, M: Model> {
    pub names: Vec<String>,
    pub y: &'a [f64],
    pub sigma: &'a [f64],
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub model: M,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsResult {
    pub names: Vec<String>,
    pub params: Vec<f64>,
    pub errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub dof: usize,
    pub reduced_chi2: f64,
    /// Parameters whose optimum sits on a bound.
    pub at_bound: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
}

impl NlsResult {
    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| (self.params[i], self.errors[i]))
    }
}

struct Run {
    params: Vec<f64>,
    chi2: f64,
    iterations: usize,
    converged: bool,
}

impl<'a, M: Model> NlsProblem<'a, M> {
    fn n_params(&self) -> usize {
        self.names.len()
    }

    fn clamp(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    fn residuals(&self, p: &[f64]) -> Option<DVector<f64>> {
        let f = self.model.eval(p);
        if f.len() != self.y.len() {
            return None;
        }
        let r = DVector::from_iterator(
            f.len(),
            f.iter()
                .zip(self.y)
                .zip(self.sigma)
                .map(|((fi, yi), si)| (yi - fi) / si),
        );
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    /// Weighted Jacobian `d f_i / d p_j / sigma_i` by finite differences,
    /// one-sided where a central step would leave the box.
    fn jacobian(&self, p: &[f64], floors: &[f64]) -> Option<DMatrix<f64>> {
        let m = self.y.len();
        let n = self.n_params();
        let mut jac = DMatrix::zeros(m, n);
        let mut q = p.to_vec();
        for j in 0..n {
            let h = 1e-6 * p[j].abs().max(floors[j]);
            let (lo, hi) = (p[j] - h, p[j] + h);
            let (a, b) = if lo < self.lower[j] {
                (p[j], hi)
            } else if hi > self.upper[j] {
                (lo, p[j])
            } else {
                (lo, hi)
            };
            q[j] = a;
            let fa = self.model.eval(&q);
            q[j] = b;
            let fb = self.model.eval(&q);
            q[j] = p[j];
            for i in 0..m {
                let d = (fb[i] - fa[i]) / (b - a) / self.sigma[i];
                if !d.is_finite() {
                    return None;
                }
                jac[(i, j)] = d;
            }
        }
        Some(jac)
    }

    fn run(&self, start: &[f64], floors: &[f64], opts: &NlsOptions) -> Option<Run> {
        let n = self.n_params();
        let mut p = start.to_vec();
        self.clamp(&mut p);
        let mut r = self.residuals(&p)?;
        let mut chi2 = r.norm_squared();
        let mut lambda = 1e-3;
        let mut converged = false;
        let mut iterations = 0;
        let mut jac = self.jacobian(&p, floors)?;
        while iterations < opts.max_iter {
            iterations += 1;
            let a = jac.transpose() * &jac;
            let g = jac.transpose() * &r;
            let mut accepted = false;
            while lambda < 1e16 {
                let mut damped = a.clone();
                for k in 0..n {
                    damped[(k, k)] += lambda * a[(k, k)].max(1e-12);
                }
                let Some(delta) = damped.cholesky().map(|c| c.solve(&g)) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(x, d)| x + d).collect();
                self.clamp(&mut trial);
                match self.residuals(&trial) {
                    Some(rt) if rt.norm_squared() < chi2 => {
                        let new_chi2 = rt.norm_squared();
                        let small_f = chi2 - new_chi2 <= opts.ftol * chi2;
                        let small_x = trial
                            .iter()
                            .zip(&p)
                            .zip(floors)
                            .all(|((t, x), fl)| (t - x).abs() <= opts.xtol * x.abs().max(*fl));
                        p = trial;
                        r = rt;
                        chi2 = new_chi2;
                        lambda = (lambda / 10.0).max(1e-12);
                        accepted = true;
                        if small_f || small_x {
                            converged = true;
                        }
                        break;
                    }
                    _ => lambda *= 10.0,
                }
            }
            if !accepted {
                // No downhill step at any damping: a (projected) stationary point.
                converged = true;
                break;
            }
            if converged || chi2 == 0.0 {
                converged = true;
                break;
            }
            jac = self.jacobian(&p, floors)?;
        }
        Some(Run {
            params: p,
            chi2,
            iterations,
            converged,
        })
    }
}

fn better(a: &Run, b: &Run) -> bool {
    match a.chi2.total_cmp(&b.chi2) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            for (x, y) in a.params.iter().zip(&b.params) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Less => return true,
                    std::cmp::Ordering::Greater => return false,
                    _ => {}
                }
            }
            false
        }
    }
}

/// Fit from every start in `starts` and keep the lowest chi^2 (ties broken
/// by lexicographic parameter order, so the choice is schedule-free).
pub fn nls_fit<M: Model>(
    problem: &NlsProblem<'_, M>,
    starts: &[Vec<f64>],
    opts: &NlsOptions,
) -> Result<NlsResult> {
    let n = problem.n_params();
    let m = problem.y.len();
    if problem.sigma.len() != m || problem.lower.len() != n || problem.upper.len() != n {
        return Err(Error::InvalidParameter("inconsistent problem dimensions".into()));
    }
    if m <= n {
        return Err(Error::InvalidParameter(format!(
            "{m} data points for {n} parameters"
        )));
    }
    if starts.is_empty() || starts.iter().any(|s| s.len() != n) {
        return Err(Error::InvalidParameter("no valid starting points".into()));
    }
    let floors: Vec<f64> = (0..n)
        .map(|j| {
            let typical = starts.iter().map(|s| s[j].abs()).fold(0.0, f64::max);
            (1e-3 * typical).max(1e-10)
        })
        .collect();
    let runs: Vec<Option<Run>> = starts
        .par_iter()
        .map(|s| problem.run(s, &floors, opts))
        .collect();
    let best = runs
        .into_iter()
        .flatten()
        .filter(|r| r.chi2.is_finite())
        .reduce(|a, b| if better(&b, &a) { b } else { a })
        .ok_or_else(|| Error::InvalidParameter("model not finite at any start".into()))?;

    let jac = problem
        .jacobian(&best.params, &floors)
        .ok_or_else(|| Error::InvalidParameter("non-finite Jacobian at optimum".into()))?;
    let a = jac.transpose() * &jac;
    check_identifiable(&a, &problem.names, opts.cond_limit)?;
    let dof = m - n;
    let reduced_chi2 = best.chi2 / dof as f64;
    let scale = if opts.scale_covariance { reduced_chi2 } else { 1.0 };
    let inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateFit {
            direction: problem.names.join("+"),
        })?;
    let cov = inv * scale;
    let covariance: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cov[(i, j)]).collect()).collect();
    let errors = (0..n).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let at_bound = (0..n)
        .filter(|&i| {
            let (lo, hi, v) = (problem.lower[i], problem.upper[i], best.params[i]);
            let tol = 1e-9 * v.abs().max(floors[i]);
            (v - lo).abs() <= tol || (hi - v).abs() <= tol
        })
        .map(|i| problem.names[i].clone())
        .collect();
    Ok(NlsResult {
        names: problem.names.clone(),
        params: best.params,
        errors,
        covariance,
        chi2: best.chi2,
        dof,
        reduced_chi2,
        at_bound,
        iterations: best.iterations,
        converged: best.converged,
    })
}

/// Reject curvature matrices whose unit-diagonal form is (numerically)
/// singular, naming the parameters spanning the null direction.
fn check_identifiable(a: &DMatrix<f64>, names: &[String], cond_limit: f64) -> Result<()> {
    let n = a.nrows();
    let d: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    if let Some(i) = d.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateFit {
            direction: names[i].clone(),
        });
    }
    let normed = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (d[i] * d[j]).sqrt());
    let eig = SymmetricEigen::new(normed);
    let (mut kmin, mut kmax) = (0, 0);
    for k in 0..n {
        if eig.eigenvalues[k] < eig.eigenvalues[kmin] {
            kmin = k;
        }
        if eig.eigenvalues[k] > eig.eigenvalues[kmax] {
            kmax = k;
        }
    }
    let (lo, hi) = (eig.eigenvalues[kmin], eig.eigenvalues[kmax]);
    if !(lo > 0.0) || hi / lo > cond_limit {
        let v = eig.eigenvectors.column(kmin);
        let direction: Vec<&str> = (0..n)
            .filter(|&i| v[i].abs() >= 0.3)
            .map(|i| names[i].as_str())
            .collect();
        return Err(Error::DegenerateFit {
            direction: direction.join("+"),
        });
    }
    Ok(())
}

/// Cartesian product of per-parameter candidate values.
pub fn lattice(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for &v in axis {
                let mut p = prefix.clone();
                p.push(v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

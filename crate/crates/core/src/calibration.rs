//! Raking calibration: find `λ` with `Σ_i d̃_i exp(λᵀx_i) x_i = target`.
//!
//! Solved by Newton's method with step halving, starting from `λ = 0`. The
//! auxiliary columns are rescaled internally to unit maximum magnitude, which
//! leaves the solution unchanged up to the matching rescaling of `λ`.

use nalgebra::{DMatrix, DVector};

use crate::error::RakeError;

/// Absolute floor for the relative residual denominator.
pub const TAU_ABS: f64 = 1e-12;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100;

const MIN_STEP: f64 = 1.0 / 1024.0 / 1024.0;
const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RakingSolution {
    pub lambda: Vec<f64>,
    /// `w_i = d̃_i exp(λᵀx_i)`
    pub weights: Vec<f64>,
    /// `max_q |Σ w_i x_iq − t_q| / max(|t_q|, τ)`
    pub residual: f64,
    pub iterations: usize,
}

struct Problem<'a> {
    d: &'a [f64],
    z: DMatrix<f64>,
    target: DVector<f64>,
    scale: Vec<f64>,
    denom: Vec<f64>,
}

impl Problem<'_> {
    fn weights(&self, lambda: &DVector<f64>) -> Option<Vec<f64>> {
        let eta = &self.z * lambda;
        let mut w = Vec::with_capacity(self.d.len());
        for (i, &di) in self.d.iter().enumerate() {
            if di == 0.0 {
                w.push(0.0);
                continue;
            }
            if eta[i] > MAX_EXPONENT {
                return None;
            }
            w.push(di * eta[i].exp());
        }
        Some(w)
    }

    /// Relative residual vector for the given weights.
    fn residual(&self, w: &[f64]) -> DVector<f64> {
        let q = self.z.ncols();
        let mut f = -self.target.clone();
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                for c in 0..q {
                    f[c] += wi * self.z[(i, c)];
                }
            }
        }
        for c in 0..q {
            f[c] /= self.denom[c];
        }
        f
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Raking from `λ = 0`.
pub fn rake(
    initial_weights: &[f64],
    x: &DMatrix<f64>,
    target: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<RakingSolution, RakeError> {
    rake_from(initial_weights, x, target, &vec![0.0; x.ncols()], tol, max_iter)
}

/// Raking from an arbitrary starting `λ`.
pub fn rake_from(
    initial_weights: &[f64],
    x: &DMatrix<f64>,
    target: &[f64],
    lambda0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<RakingSolution, RakeError> {
    let (n, q) = x.shape();
    if initial_weights.len() != n || target.len() != q || lambda0.len() != q {
        return Err(RakeError::InvalidInput(format!(
            "{} weights, {}x{} matrix, {} targets, {} start values",
            initial_weights.len(),
            n,
            q,
            target.len(),
            lambda0.len()
        )));
    }
    if initial_weights.iter().any(|&d| !(d >= 0.0 && d.is_finite())) {
        return Err(RakeError::InvalidInput("initial weights must be finite and nonnegative".into()));
    }
    if target.iter().any(|t| !t.is_finite()) {
        return Err(RakeError::InvalidInput("target must be finite".into()));
    }

    let scale: Vec<f64> = (0..q)
        .map(|c| {
            let m = (0..n)
                .filter(|&i| initial_weights[i] > 0.0)
                .fold(0.0_f64, |m, i| m.max(x[(i, c)].abs()));
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect();
    let z = DMatrix::from_fn(n, q, |i, c| x[(i, c)] / scale[c]);
    let target_z = DVector::from_iterator(q, (0..q).map(|c| target[c] / scale[c]));
    let denom = (0..q).map(|c| target_z[c].abs().max(TAU_ABS)).collect();
    let prob = Problem {
        d: initial_weights,
        z,
        target: target_z,
        scale,
        denom,
    };

    let mut lambda = DVector::from_iterator(q, (0..q).map(|c| lambda0[c] * prob.scale[c]));
    let mut w = prob.weights(&lambda).ok_or_else(|| {
        RakeError::InvalidInput("starting lambda overflows the exponential".into())
    })?;
    let mut f = prob.residual(&w);
    let mut iterations = 0;

    loop {
        let res = max_abs(&f);
        if res <= tol {
            let lambda_orig = (0..q).map(|c| lambda[c] / prob.scale[c]).collect();
            return Ok(RakingSolution {
                lambda: lambda_orig,
                weights: w,
                residual: res,
                iterations,
            });
        }
        if iterations >= max_iter {
            return Err(RakeError::NoConvergence {
                iterations,
                residual: res,
            });
        }
        iterations += 1;

        // J = Σ w_i z_i z_iᵀ ; Newton system on the unscaled residual
        let mut jac = DMatrix::<f64>::zeros(q, q);
        let mut ff = DVector::<f64>::zeros(q);
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let zi = prob.z.row(i);
            for a in 0..q {
                ff[a] += wi * zi[a];
                for b in a..q {
                    jac[(a, b)] += wi * zi[a] * zi[b];
                }
            }
        }
        for a in 0..q {
            ff[a] -= prob.target[a];
            for b in 0..a {
                jac[(a, b)] = jac[(b, a)];
            }
        }
        let diag_max = jac.diagonal().iter().fold(0.0_f64, |m, v: &f64| m.max(v.abs()));
        if diag_max == 0.0 {
            return Err(RakeError::SingularJacobian);
        }
        let step = match jac.clone().cholesky() {
            Some(ch) => ch.solve(&(-&ff)),
            None => return Err(RakeError::SingularJacobian),
        };
        if step.iter().any(|v| !v.is_finite()) {
            return Err(RakeError::SingularJacobian);
        }
        let eig_min = jac.clone().symmetric_eigen().eigenvalues.min();
        if eig_min <= diag_max * 1e-14 {
            return Err(RakeError::SingularJacobian);
        }

        let current = f.norm();
        let mut t = 1.0;
        loop {
            let trial = &lambda + &step * t;
            if let Some(wt) = prob.weights(&trial) {
                let ft = prob.residual(&wt);
                if ft.norm() < current {
                    lambda = trial;
                    w = wt;
                    f = ft;
                    break;
                }
            }
            t *= 0.5;
            if t < MIN_STEP {
                return Err(RakeError::NoConvergence {
                    iterations,
                    residual: res,
                });
            }
        }
    }
}

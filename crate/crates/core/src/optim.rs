//! Quasi-Newton ascent with backtracking line search.
//!
//! Used for every hyper-parameter sub-problem. The objective closure returns
//! the value together with its analytic gradient; evaluation failures (for
//! example a covariance matrix going singular at an extreme proposal) are
//! treated as minus infinity and rejected by the line search, so the search
//! never leaves the feasible region it started in. Accepted steps strictly
//! improve the objective, which makes the returned value monotone in the
//! starting point by construction.

use nalgebra::{DMatrix, DVector};

use crate::error::{MagmaError, Result};

#[derive(Debug, Clone)]
pub struct AscentOptions {
    /// Hard cap on objective evaluations.
    pub max_evals: usize,
    /// Stop when the gradient sup-norm falls below this.
    pub grad_tol: f64,
    /// Cap on the Euclidean norm of a single step.
    pub max_step_norm: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            max_evals: 200,
            grad_tol: 1e-8,
            max_step_norm: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    /// True when the gradient tolerance was reached.
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const CURVATURE_FLOOR: f64 = 1e-12;

/// Maximize `f` from `x0`. The closure returns `(value, gradient)`.
pub fn maximize<F>(mut f: F, x0: &[f64], opts: &AscentOptions) -> Result<AscentOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut evals = 0usize;

    // Work in minimization form internally: phi = -f.
    let mut eval = |x: &DVector<f64>, evals: &mut usize| -> Result<Option<(f64, DVector<f64>)>> {
        *evals += 1;
        match f(x.as_slice()) {
            Ok((v, g)) => {
                if !v.is_finite() || g.iter().any(|gi| !gi.is_finite()) {
                    return Ok(None);
                }
                if g.len() != n {
                    return Err(MagmaError::DimensionMismatch {
                        context: "objective gradient".into(),
                        expected: n,
                        got: g.len(),
                    });
                }
                Ok(Some((-v, -DVector::from_vec(g))))
            }
            Err(_) => Ok(None),
        }
    };

    let mut x = DVector::from_column_slice(x0);
    let (mut phi, mut grad) = match eval(&x, &mut evals)? {
        Some(v) => v,
        None => {
            return Err(MagmaError::InvalidArgument(
                "objective not finite at the optimizer starting point".into(),
            ))
        }
    };

    let mut h = DMatrix::<f64>::identity(n, n);
    let mut scaled_h = false;
    let mut converged = grad.amax() < opts.grad_tol;

    while !converged && evals < opts.max_evals {
        let mut dir = -(&h * &grad);
        let mut slope = grad.dot(&dir);
        if slope >= 0.0 {
            // Quasi-Newton matrix lost descent; restart from steepest descent.
            h = DMatrix::identity(n, n);
            scaled_h = false;
            dir = -grad.clone();
            slope = grad.dot(&dir);
        }
        let dir_norm = dir.norm();
        if dir_norm > opts.max_step_norm {
            dir *= opts.max_step_norm / dir_norm;
            slope = grad.dot(&dir);
        }

        let mut alpha = 1.0f64;
        let mut accepted: Option<(DVector<f64>, f64, DVector<f64>)> = None;
        for _ in 0..MAX_BACKTRACKS {
            if evals >= opts.max_evals {
                break;
            }
            let xt = &x + alpha * &dir;
            if let Some((pt, gt)) = eval(&xt, &mut evals)? {
                if pt <= phi + ARMIJO_C1 * alpha * slope {
                    accepted = Some((xt, pt, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some((xt, pt, gt)) = accepted else {
            break; // no improving step left
        };

        let s = &xt - &x;
        let y = &gt - &grad;
        let sy = s.dot(&y);
        if sy > CURVATURE_FLOOR * s.norm() * y.norm() {
            if !scaled_h {
                let yy = y.dot(&y);
                if yy > 0.0 {
                    h = DMatrix::identity(n, n) * (sy / yy);
                }
                scaled_h = true;
            }
            // BFGS update of the inverse-Hessian approximation.
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (rho * rho * yhy + rho) * (&s * s.transpose())
                - rho * (&hy * s.transpose() + &s * hy.transpose());
        }

        let progress = phi - pt;
        let small_step = s.amax() <= 1e-12 * (1.0 + x.amax());
        x = xt;
        phi = pt;
        grad = gt;
        converged = grad.amax() < opts.grad_tol;
        if !converged && progress <= 1e-12 * (1.0 + phi.abs()) && small_step {
            break;
        }
    }

    Ok(AscentOutcome {
        x: x.as_slice().to_vec(),
        value: -phi,
        evals,
        converged,
    })
}

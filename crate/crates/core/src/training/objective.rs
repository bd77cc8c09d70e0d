//! M-step objectives: penalized Gaussian log-likelihoods and their
//! analytic gradients in log-parameter space.
//!
//! Every sub-problem has the shape
//! `log N(r; 0, C) - 0.5 * tr(T C^{-1})`
//! where `C` is a covariance built from the parameters being optimized and
//! `T` is a fixed positive semi-definite weight (a block of the
//! hyper-posterior covariance). The gradient with respect to a log-parameter
//! `p` with `D = dC/dp` is
//! `0.5 * (a' D a - tr(C^{-1} D) + tr(C^{-1} T C^{-1} D))`, `a = C^{-1} r`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::data::{IndividualSeries, PriorMean, TrainingSet};
use crate::error::{MagmaError, Result};
use crate::kernel::{cov_matrix, cov_matrix_grad, psi_matrix, HyperParams, NoiseVariance};
use crate::linalg::{chol_psd, gather_matrix, gather_vector};
use crate::training::HyperPosterior;

const LN_2PI: f64 = 1.8378770664093453;

/// Everything about one covariance `C` that does not depend on the residual.
pub(crate) struct TermPrecomp {
    n: usize,
    log_det: f64,
    cov_inv: DMatrix<f64>,
    grad_mats: Vec<DMatrix<f64>>,
    tr_cinv_d: Vec<f64>,
    tr_g_d: Vec<f64>,
    tr_t_cinv: f64,
}

impl TermPrecomp {
    pub(crate) fn new(
        cov: &DMatrix<f64>,
        grad_mats: Vec<DMatrix<f64>>,
        trace_mat: Option<&DMatrix<f64>>,
        role: &str,
    ) -> Result<Self> {
        let factor = chol_psd(cov, role)?;
        let cov_inv = factor.inverse();
        let log_det = factor.log_det();
        let tr_cinv_d: Vec<f64> = grad_mats.iter().map(|d| frob_dot(&cov_inv, d)).collect();
        let (tr_g_d, tr_t_cinv) = match trace_mat {
            Some(t) => {
                let g = &cov_inv * t * &cov_inv;
                (
                    grad_mats.iter().map(|d| frob_dot(&g, d)).collect(),
                    frob_dot(t, &cov_inv),
                )
            }
            None => (vec![0.0; grad_mats.len()], 0.0),
        };
        Ok(Self {
            n: cov.nrows(),
            log_det,
            cov_inv,
            grad_mats,
            tr_cinv_d,
            tr_g_d,
            tr_t_cinv,
        })
    }

    /// Objective and gradient contribution for one residual vector.
    pub(crate) fn eval(&self, residual: &DVector<f64>) -> (f64, Vec<f64>) {
        let alpha = &self.cov_inv * residual;
        let value =
            -0.5 * (self.n as f64 * LN_2PI + self.log_det + residual.dot(&alpha) + self.tr_t_cinv);
        let grad = self
            .grad_mats
            .iter()
            .enumerate()
            .map(|(p, d)| 0.5 * (alpha.dot(&(d * &alpha)) - self.tr_cinv_d[p] + self.tr_g_d[p]))
            .collect();
        (value, grad)
    }
}

/// Sum of element-wise products; equals `tr(A B)` for symmetric `A`, `B`.
fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Positions of a series' timestamps inside the hyper-posterior grid.
/// Every timestamp must be present.
fn indices_in(post: &HyperPosterior, series: &IndividualSeries) -> Result<Vec<usize>> {
    series
        .timestamps()
        .iter()
        .map(|&t| {
            post.position_of(t).ok_or_else(|| {
                MagmaError::InvalidArgument(format!(
                    "timestamp {t} of individual '{}' is not on the hyper-posterior grid",
                    series.id()
                ))
            })
        })
        .collect()
}

/// Mean-process objective: `log N(m_hat; m0, K_theta0) - 0.5 tr(K_hat K^{-1})`
/// with its gradient in `[log_v, log_ell]`.
pub fn q_objective_theta0(
    post: &HyperPosterior,
    prior_mean: &PriorMean,
    theta0: &HyperParams,
) -> Result<(f64, Vec<f64>)> {
    let grid = post.grid();
    let cov = cov_matrix(grid, grid, theta0)?;
    let grads = cov_matrix_grad(grid, theta0, None)?;
    let pre = TermPrecomp::new(&cov, grads, Some(post.cov()), "K(theta0) on posterior grid")?;
    let residual = post.mean() - prior_mean.evaluate_on(grid);
    Ok(pre.eval(&residual))
}

/// One individual's objective:
/// `log N(y_i; m_hat(t_i), Psi_i) - 0.5 tr(K_hat[t_i, t_i] Psi_i^{-1})`
/// with its gradient in `[log_v, log_ell, log_sigma2]`.
pub fn q_objective_individual(
    post: &HyperPosterior,
    series: &IndividualSeries,
    theta_i: &HyperParams,
    sigma2_i: &NoiseVariance,
) -> Result<(f64, Vec<f64>)> {
    let idx = indices_in(post, series)?;
    let t = series.timestamps();
    let cov = psi_matrix(t, theta_i, sigma2_i)?;
    let grads = cov_matrix_grad(t, theta_i, Some(sigma2_i))?;
    let t_block = gather_matrix(post.cov(), &idx, &idx);
    let pre = TermPrecomp::new(
        &cov,
        grads,
        Some(&t_block),
        &format!("Psi for individual '{}'", series.id()),
    )?;
    let residual = series.outputs_vector() - gather_vector(post.mean(), &idx);
    Ok(pre.eval(&residual))
}

/// Common-HP objective `L_M`: the sum of every individual's objective under
/// one shared `(theta, sigma^2)`. Individuals observed on the same grid share
/// the covariance factorization.
pub fn q_objective_common(
    post: &HyperPosterior,
    data: &TrainingSet,
    theta: &HyperParams,
    sigma2: &NoiseVariance,
) -> Result<(f64, Vec<f64>)> {
    let mut value = 0.0;
    let mut grad = vec![0.0; 3];
    let mut cache: BTreeMap<Vec<usize>, TermPrecomp> = BTreeMap::new();
    for series in data.individuals() {
        let idx = indices_in(post, series)?;
        if !cache.contains_key(&idx) {
            let t = series.timestamps();
            let cov = psi_matrix(t, theta, sigma2)?;
            let grads = cov_matrix_grad(t, theta, Some(sigma2))?;
            let t_block = gather_matrix(post.cov(), &idx, &idx);
            let pre = TermPrecomp::new(
                &cov,
                grads,
                Some(&t_block),
                &format!("shared Psi at grid of individual '{}'", series.id()),
            )?;
            cache.insert(idx.clone(), pre);
        }
        let pre = &cache[&idx];
        let residual = series.outputs_vector() - gather_vector(post.mean(), &idx);
        let (v, g) = pre.eval(&residual);
        value += v;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    Ok((value, grad))
}

//! Multi-task prediction for a new, partially observed individual.
//!
//! The pipeline: pool the prediction and observation timestamps (plus the
//! training grid by default) into a working grid, recompute the mean
//! process's hyper-posterior there, integrate it out to get the new
//! individual's multi-task prior, optionally fit the new individual's
//! hyper-parameters, and condition on its observations. The conditional of
//! the observation process is returned, so predictive variances include the
//! fitted noise.

use nalgebra::{DMatrix, DVector};

use crate::data::{IndividualSeries, TrainingSet};
use crate::error::{MagmaError, Result};
use crate::kernel::{cov_matrix_grad, psi_matrix, HyperParams, NoiseVariance};
use crate::linalg::{chol_psd, gather_matrix, gather_vector, symmetrize, time_key, PooledGrid};
use crate::optim::{maximize, AscentOptions};
use crate::training::{
    hyper_posterior_on, HpMode, HyperPosterior, InitValues, JitterSink, ScatterPart, TermPrecomp,
    TrainedModel,
};

/// Working grid for one prediction: the pooled target and observation
/// timestamps, with the position of each block inside it.
#[derive(Debug, Clone)]
pub struct PredictionGrid {
    tau: Vec<f64>,
    target_indices: Vec<usize>,
    observed_indices: Vec<usize>,
}

impl PredictionGrid {
    /// Pool `targets`, `observed`, and optional `extra` timestamps.
    /// Duplicates within each block are dropped.
    pub fn new(targets: &[f64], observed: &[f64], extra: Option<&[f64]>) -> Result<Self> {
        let targets = dedup_sorted(targets)?;
        let observed = dedup_sorted(observed)?;
        let mut grids: Vec<&[f64]> = vec![&targets, &observed];
        if let Some(e) = extra {
            grids.push(e);
        }
        let pooled = PooledGrid::from_grids(&grids)?;
        Ok(Self {
            tau: pooled.timestamps().to_vec(),
            target_indices: pooled.index_map(0).to_vec(),
            observed_indices: pooled.index_map(1).to_vec(),
        })
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn target_indices(&self) -> &[usize] {
        &self.target_indices
    }

    pub fn observed_indices(&self) -> &[usize] {
        &self.observed_indices
    }

    pub fn target_timestamps(&self) -> Vec<f64> {
        self.target_indices.iter().map(|&i| self.tau[i]).collect()
    }

    pub fn observed_timestamps(&self) -> Vec<f64> {
        self.observed_indices.iter().map(|&i| self.tau[i]).collect()
    }
}

fn dedup_sorted(ts: &[f64]) -> Result<Vec<f64>> {
    if ts.iter().any(|t| !t.is_finite()) {
        return Err(MagmaError::InvalidArgument(
            "non-finite timestamp in prediction grid".into(),
        ));
    }
    let mut keys: Vec<i64> = ts.iter().map(|&t| time_key(t)).collect();
    keys.sort_unstable();
    keys.dedup();
    Ok(keys
        .into_iter()
        .map(|k| k as f64 * crate::linalg::TIME_QUANTUM)
        .collect())
}

/// Gaussian multi-task prior of the new individual on the working grid.
#[derive(Debug, Clone)]
pub struct MultiTaskPrior {
    grid: PredictionGrid,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl MultiTaskPrior {
    pub fn grid(&self) -> &PredictionGrid {
        &self.grid
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn mean_targets(&self) -> DVector<f64> {
        gather_vector(&self.mean, &self.grid.target_indices)
    }

    pub fn mean_observed(&self) -> DVector<f64> {
        gather_vector(&self.mean, &self.grid.observed_indices)
    }

    /// Target-target covariance block.
    pub fn cov_pp(&self) -> DMatrix<f64> {
        gather_matrix(
            &self.cov,
            &self.grid.target_indices,
            &self.grid.target_indices,
        )
    }

    /// Target-observation covariance block.
    pub fn cov_ps(&self) -> DMatrix<f64> {
        gather_matrix(
            &self.cov,
            &self.grid.target_indices,
            &self.grid.observed_indices,
        )
    }

    /// Observation-observation covariance block.
    pub fn cov_ss(&self) -> DMatrix<f64> {
        gather_matrix(
            &self.cov,
            &self.grid.observed_indices,
            &self.grid.observed_indices,
        )
    }
}

/// Gaussian prediction on the target grid with derived credible intervals.
#[derive(Debug, Clone)]
pub struct PredictiveDistribution {
    pub timestamps: Vec<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Normal quantile for the central 95% interval.
pub const CI95_QUANTILE: f64 = 1.96;

impl PredictiveDistribution {
    /// Per-point standard deviations (negative rounding on the diagonal is
    /// clipped to zero).
    pub fn sd(&self) -> Vec<f64> {
        (0..self.mean.len())
            .map(|i| self.cov[(i, i)].max(0.0).sqrt())
            .collect()
    }

    /// Per-point 95% credible intervals, `mean +- 1.96 * sd`.
    pub fn ci95(&self) -> Vec<(f64, f64)> {
        self.mean
            .iter()
            .zip(self.sd())
            .map(|(&m, s)| (m - CI95_QUANTILE * s, m + CI95_QUANTILE * s))
            .collect()
    }
}

/// Hyper-posterior of the mean process on an arbitrary grid, under a trained
/// model. Training observations at timestamps missing from `tau` are ignored.
pub fn hyperposterior_at(
    model: &TrainedModel,
    data: &TrainingSet,
    tau: &[f64],
) -> Result<HyperPosterior> {
    let tau = dedup_sorted(tau)?;
    let keys: Vec<i64> = tau.iter().map(|&t| time_key(t)).collect();
    let mut parts = Vec::new();
    for (i, series) in data.individuals().iter().enumerate() {
        let mut indices = Vec::new();
        let mut sub_t = Vec::new();
        let mut sub_y = Vec::new();
        for (&t, &y) in series.timestamps().iter().zip(series.outputs()) {
            if let Ok(pos) = keys.binary_search(&time_key(t)) {
                indices.push(pos);
                sub_t.push(tau[pos]);
                sub_y.push(y);
            }
        }
        if indices.is_empty() {
            continue;
        }
        let (theta, noise) = model.hp.for_individual(i);
        parts.push(ScatterPart {
            indices,
            psi: psi_matrix(&sub_t, theta, noise)?,
            y: DVector::from_vec(sub_y),
            id: series.id().to_string(),
        });
    }
    let mut sink = JitterSink::default();
    hyper_posterior_on(&tau, &model.hp.theta0, &model.prior_mean, &parts, &mut sink)
}

/// Multi-task prior of the new individual: hyper-posterior plus its own
/// covariance, `Gamma = K_hat + Psi_star`.
pub fn prior_new_individual(
    hp_post: &HyperPosterior,
    grid: PredictionGrid,
    theta_star: &HyperParams,
    sigma2_star: &NoiseVariance,
) -> Result<MultiTaskPrior> {
    if hp_post.len() != grid.tau().len()
        || hp_post
            .grid()
            .iter()
            .zip(grid.tau())
            .any(|(&a, &b)| time_key(a) != time_key(b))
    {
        return Err(MagmaError::InvalidArgument(
            "hyper-posterior grid does not match the prediction grid".into(),
        ));
    }
    let cov = hp_post.cov() + psi_matrix(grid.tau(), theta_star, sigma2_star)?;
    Ok(MultiTaskPrior {
        grid,
        mean: hp_post.mean().clone(),
        cov,
    })
}

/// Result of fitting the new individual's hyper-parameters.
#[derive(Debug, Clone)]
pub struct NewHp {
    pub theta: HyperParams,
    pub noise: NoiseVariance,
    /// True when the optimizer stopped on its evaluation budget.
    pub warning: bool,
}

/// Log-likelihood of the new individual's observations under the multi-task
/// prior, `log N(y_*; m_hat(t_*), K_hat[t_*, t_*] + Psi)`, with its gradient
/// in `[log_v, log_ell, log_sigma2]`. This is the objective `learn_new_hp`
/// maximizes in different mode.
pub fn new_individual_objective(
    observations: &IndividualSeries,
    hp_post: &HyperPosterior,
    theta: &HyperParams,
    noise: &NoiseVariance,
) -> Result<(f64, Vec<f64>)> {
    let idx: Vec<usize> = observations
        .timestamps()
        .iter()
        .map(|&t| {
            hp_post.position_of(t).ok_or_else(|| {
                MagmaError::InvalidArgument(format!(
                    "observation timestamp {t} missing from the hyper-posterior grid"
                ))
            })
        })
        .collect::<Result<_>>()?;
    let t_obs = observations.timestamps();
    let cov = gather_matrix(hp_post.cov(), &idx, &idx) + psi_matrix(t_obs, theta, noise)?;
    let grads = cov_matrix_grad(t_obs, theta, Some(noise))?;
    let pre = TermPrecomp::new(&cov, grads, None, "new-individual prior covariance")?;
    let residual = observations.outputs_vector() - gather_vector(hp_post.mean(), &idx);
    Ok(pre.eval(&residual))
}

/// Hyper-parameters for the new individual. Common mode returns the shared
/// pair from training as-is; different mode maximizes the Gaussian
/// log-likelihood with covariance `K_hat[t_*, t_*] + Psi` from `init`.
pub fn learn_new_hp(
    observations: &IndividualSeries,
    hp_post: &HyperPosterior,
    mode: HpMode,
    shared: Option<(HyperParams, NoiseVariance)>,
    init: &InitValues,
    max_fevals: usize,
) -> Result<NewHp> {
    if let HpMode::Common = mode {
        let (theta, noise) = shared.ok_or_else(|| {
            MagmaError::InvalidArgument("common mode needs the shared hyper-parameters".into())
        })?;
        return Ok(NewHp {
            theta,
            noise,
            warning: false,
        });
    }
    if observations.is_empty() {
        return Err(MagmaError::InvalidArgument(
            "learning new hyper-parameters needs at least one observation".into(),
        ));
    }
    let out = maximize(
        |x| {
            new_individual_objective(
                observations,
                hp_post,
                &HyperParams::new(x[0], x[1]),
                &NoiseVariance::new(x[2]),
            )
        },
        &[init.log_v, init.log_ell, init.log_sigma2],
        &AscentOptions {
            max_evals: max_fevals,
            ..Default::default()
        },
    )?;
    Ok(NewHp {
        theta: HyperParams::new(out.x[0], out.x[1]),
        noise: NoiseVariance::new(out.x[2]),
        warning: !out.converged,
    })
}

/// Condition the multi-task prior on the new individual's observations.
/// With no observations this returns the prior restricted to the targets.
pub fn posterior_predict(
    prior: &MultiTaskPrior,
    observations: &IndividualSeries,
) -> Result<PredictiveDistribution> {
    let obs_t = prior.grid().observed_timestamps();
    if observations.len() != obs_t.len()
        || observations
            .timestamps()
            .iter()
            .zip(&obs_t)
            .any(|(&a, &b)| time_key(a) != time_key(b))
    {
        return Err(MagmaError::InvalidArgument(
            "observation timestamps do not match the prior's observed block".into(),
        ));
    }
    let timestamps = prior.grid().target_timestamps();
    if observations.is_empty() {
        return Ok(PredictiveDistribution {
            timestamps,
            mean: prior.mean_targets(),
            cov: symmetrize(prior.cov_pp()),
        });
    }
    let gamma_ss = prior.cov_ss();
    let gamma_ps = prior.cov_ps();
    let factor = chol_psd(&gamma_ss, "observed-block prior covariance")?;
    let alpha = factor.solve_vec(&(observations.outputs_vector() - prior.mean_observed()))?;
    let mean = prior.mean_targets() + &gamma_ps * alpha;
    let solved = factor.solve_mat(&gamma_ps.transpose())?;
    let cov = symmetrize(prior.cov_pp() - &gamma_ps * solved);
    Ok(PredictiveDistribution {
        timestamps,
        mean,
        cov,
    })
}

/// Knobs for the full prediction pipeline.
#[derive(Debug, Clone)]
pub struct PredictConfig {
    /// Pool the training grid into the working grid (recommended; the
    /// training timestamps carry the mean-process information).
    pub include_training_grid: bool,
    /// Starting point for the new individual's fit in different mode.
    pub new_hp_init: InitValues,
    pub max_fevals: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            include_training_grid: true,
            new_hp_init: InitValues::default(),
            max_fevals: 200,
        }
    }
}

/// Full multi-task prediction: working grid, hyper-posterior, multi-task
/// prior, new-individual hyper-parameters, conditioning.
pub fn predict(
    model: &TrainedModel,
    data: &TrainingSet,
    new_obs: &IndividualSeries,
    targets: &[f64],
    config: &PredictConfig,
) -> Result<PredictiveDistribution> {
    let extra = config
        .include_training_grid
        .then(|| data.pooled().timestamps().to_vec());
    let grid = PredictionGrid::new(targets, new_obs.timestamps(), extra.as_deref())?;
    let post = hyperposterior_at(model, data, grid.tau())?;

    let shared = model.hp.shared().map(|(theta, noise)| (*theta, *noise));
    let new_hp = if new_obs.is_empty() {
        // nothing to fit: shared parameters in common mode, the configured
        // starting values otherwise
        match (model.hp_mode(), shared) {
            (HpMode::Common, Some((theta, noise))) => NewHp {
                theta,
                noise,
                warning: false,
            },
            _ => NewHp {
                theta: HyperParams::new(config.new_hp_init.log_v, config.new_hp_init.log_ell),
                noise: NoiseVariance::new(config.new_hp_init.log_sigma2),
                warning: false,
            },
        }
    } else {
        learn_new_hp(
            new_obs,
            &post,
            model.hp_mode(),
            shared,
            &config.new_hp_init,
            config.max_fevals,
        )?
    };
    if new_hp.warning {
        log::warn!(
            "new-individual fit for '{}' stopped on the evaluation budget",
            new_obs.id()
        );
    }

    let prior = prior_new_individual(&post, grid, &new_hp.theta, &new_hp.noise)?;
    posterior_predict(&prior, new_obs)
}

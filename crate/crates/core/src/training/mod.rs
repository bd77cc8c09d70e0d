//! EM estimation of the shared mean process and the hyper-parameters.
//!
//! The E step computes the Gaussian hyper-posterior of the mean process on
//! the pooled grid; the M step maximizes the expected complete-data
//! log-likelihood, which splits into one sub-problem for the mean-process
//! kernel and either one sub-problem per individual (different
//! hyper-parameters) or a single shared sub-problem (common
//! hyper-parameters). Convergence is monitored on the observed-data
//! log-likelihood, which the alternation never decreases.

mod objective;

pub(crate) use objective::TermPrecomp;
pub use objective::{q_objective_common, q_objective_individual, q_objective_theta0};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PriorMean, TrainingSet};
use crate::error::{MagmaError, Result};
use crate::kernel::{cov_matrix, psi_matrix, HyperParams, NoiseVariance};
use crate::linalg::{chol_psd, scatter_precision, scatter_vector, symmetrize, time_key, PsdFactor};
use crate::optim::{maximize, AscentOptions};

/// Hyper-parameter sharing hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HpMode {
    /// All individuals share one `(theta, sigma^2)`.
    Common,
    /// Each individual has its own `(theta_i, sigma_i^2)`.
    Different,
}

/// Hyper-parameters of one individual, keyed by its id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedHp {
    pub id: String,
    pub theta: HyperParams,
    pub noise: NoiseVariance,
}

/// Individual-level hyper-parameters under either sharing hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IndivHp {
    Common {
        theta: HyperParams,
        noise: NoiseVariance,
    },
    /// One entry per individual, aligned with the training-set order.
    Different(Vec<NamedHp>),
}

/// The full hyper-parameter set `Theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHp {
    pub theta0: HyperParams,
    pub indiv: IndivHp,
}

impl ModelHp {
    pub fn mode(&self) -> HpMode {
        match self.indiv {
            IndivHp::Common { .. } => HpMode::Common,
            IndivHp::Different(_) => HpMode::Different,
        }
    }

    /// Hyper-parameters applying to the `i`-th individual.
    pub fn for_individual(&self, i: usize) -> (&HyperParams, &NoiseVariance) {
        match &self.indiv {
            IndivHp::Common { theta, noise } => (theta, noise),
            IndivHp::Different(v) => (&v[i].theta, &v[i].noise),
        }
    }

    pub fn shared(&self) -> Option<(&HyperParams, &NoiseVariance)> {
        match &self.indiv {
            IndivHp::Common { theta, noise } => Some((theta, noise)),
            IndivHp::Different(_) => None,
        }
    }
}

/// Gaussian law of the mean process on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPosterior {
    grid: Vec<f64>,
    keys: Vec<i64>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl HyperPosterior {
    pub fn new(grid: Vec<f64>, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = grid.len();
        if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
            return Err(MagmaError::DimensionMismatch {
                context: "HyperPosterior".into(),
                expected: n,
                got: mean.len().max(cov.nrows()),
            });
        }
        let keys = grid.iter().map(|&t| time_key(t)).collect();
        Ok(Self {
            grid,
            keys,
            mean,
            cov,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Position of a (quantized) timestamp on the grid.
    pub fn position_of(&self, t: f64) -> Option<usize> {
        self.keys.binary_search(&time_key(t)).ok()
    }
}

/// Training diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// EM iterations of the selected restart.
    pub iterations: usize,
    /// Observed-data log-likelihood, one entry per iteration (index 0 is the
    /// value at initialization).
    pub objective_trace: Vec<f64>,
    /// Number of factorizations that needed jitter.
    pub jitter_events: u64,
    /// Largest jitter that was applied.
    pub max_jitter: f64,
    /// Index of the restart that won.
    pub restart_index: usize,
    /// Sub-problems whose optimizer stopped on the evaluation budget rather
    /// than the gradient tolerance.
    pub optimizer_warnings: u64,
    /// Restarts that failed with an unrecoverable singularity.
    pub failed_restarts: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct JitterSink {
    pub events: u64,
    pub max: f64,
}

impl JitterSink {
    pub(crate) fn record(&mut self, factor: &PsdFactor) {
        if factor.jitter() > 0.0 {
            self.events += 1;
            self.max = self.max.max(factor.jitter());
        }
    }
}

/// Initial hyper-parameter values (natural scale `v = ell = e`, `sigma = 0.4`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitValues {
    pub log_v: f64,
    pub log_ell: f64,
    pub log_sigma2: f64,
}

impl Default for InitValues {
    fn default() -> Self {
        Self {
            log_v: 1.0,
            log_ell: 1.0,
            log_sigma2: 0.16_f64.ln(),
        }
    }
}

/// EM configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub mode: HpMode,
    pub prior_mean: PriorMean,
    pub init: InitValues,
    /// Number of EM runs; run 0 starts from `init` exactly, later runs
    /// perturb every log-parameter with seeded uniform noise in [-1, 1].
    pub restarts: usize,
    pub seed: u64,
    /// Relative change of the observed-data log-likelihood below which the
    /// run stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Objective-evaluation budget per sub-problem per EM iteration.
    pub max_fevals: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: HpMode::Common,
            prior_mean: PriorMean::default(),
            init: InitValues::default(),
            restarts: 1,
            seed: 0,
            tolerance: 1e-3,
            max_iterations: 100,
            max_fevals: 200,
        }
    }
}

/// A fitted model: hyper-parameters, the hyper-posterior of the mean process
/// on the pooled training grid, and run diagnostics.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub hp: ModelHp,
    pub prior_mean: PriorMean,
    pub hyper_posterior: HyperPosterior,
    pub diagnostics: Diagnostics,
}

impl TrainedModel {
    pub fn hp_mode(&self) -> HpMode {
        self.hp.mode()
    }

    /// Hyper-parameters for a training individual by id (different mode),
    /// or the shared pair (common mode).
    pub fn hp_for_id(&self, id: &str) -> Option<(&HyperParams, &NoiseVariance)> {
        match &self.hp.indiv {
            IndivHp::Common { theta, noise } => Some((theta, noise)),
            IndivHp::Different(v) => v.iter().find(|n| n.id == id).map(|n| (&n.theta, &n.noise)),
        }
    }
}

/// One individual's contribution to a hyper-posterior: the positions of its
/// retained timestamps on the working grid, its covariance there, and the
/// retained outputs.
pub(crate) struct ScatterPart {
    pub indices: Vec<usize>,
    pub psi: DMatrix<f64>,
    pub y: DVector<f64>,
    pub id: String,
}

/// Shared core of the E step and of the prediction-grid hyper-posterior:
/// invert each individual's covariance on its own sub-grid, scatter the
/// precisions and weighted outputs onto the working grid with zeros
/// elsewhere, and combine with the prior precision.
pub(crate) fn hyper_posterior_on(
    tau: &[f64],
    theta0: &HyperParams,
    prior_mean: &PriorMean,
    parts: &[ScatterPart],
    sink: &mut JitterSink,
) -> Result<HyperPosterior> {
    let n = tau.len();
    let m0 = prior_mean.evaluate_on(tau);
    let prior_cov = cov_matrix(tau, tau, theta0)?;
    if parts.is_empty() {
        // no individual information: the posterior is the prior
        return HyperPosterior::new(tau.to_vec(), m0, prior_cov);
    }

    let k_factor = chol_psd(&prior_cov, "prior covariance K(theta0)")?;
    sink.record(&k_factor);
    let mut precision = k_factor.inverse();
    let mut weighted = k_factor.solve_vec(&m0)?;

    for part in parts {
        let factor = chol_psd(&part.psi, &format!("Psi for individual '{}'", part.id))?;
        sink.record(&factor);
        precision += scatter_precision(&factor.inverse(), &part.indices, n)?;
        weighted += scatter_vector(&factor.solve_vec(&part.y)?, &part.indices, n)?;
    }

    let a_factor = chol_psd(&symmetrize(precision), "hyper-posterior precision")?;
    sink.record(&a_factor);
    let cov = a_factor.inverse();
    let mean = a_factor.solve_vec(&weighted)?;
    HyperPosterior::new(tau.to_vec(), mean, cov)
}

fn e_step_impl(
    data: &TrainingSet,
    hp: &ModelHp,
    prior_mean: &PriorMean,
    sink: &mut JitterSink,
) -> Result<HyperPosterior> {
    let pooled = data.pooled();
    let mut parts = Vec::with_capacity(data.len());
    for (i, series) in data.individuals().iter().enumerate() {
        let (theta, noise) = hp.for_individual(i);
        parts.push(ScatterPart {
            indices: pooled.index_map(i).to_vec(),
            psi: psi_matrix(series.timestamps(), theta, noise)?,
            y: series.outputs_vector(),
            id: series.id().to_string(),
        });
    }
    hyper_posterior_on(pooled.timestamps(), &hp.theta0, prior_mean, &parts, sink)
}

/// E step: hyper-posterior of the mean process on the pooled grid.
pub fn e_step(data: &TrainingSet, hp: &ModelHp, prior_mean: &PriorMean) -> Result<HyperPosterior> {
    let mut sink = JitterSink::default();
    e_step_impl(data, hp, prior_mean, &mut sink)
}

fn m_step_impl(
    data: &TrainingSet,
    post: &HyperPosterior,
    prior_mean: &PriorMean,
    previous: &ModelHp,
    max_fevals: usize,
) -> Result<(ModelHp, u64)> {
    let opts = AscentOptions {
        max_evals: max_fevals,
        ..Default::default()
    };
    let mut warnings = 0u64;

    let theta0_out = maximize(
        |x| q_objective_theta0(post, prior_mean, &HyperParams::new(x[0], x[1])),
        &[previous.theta0.log_v, previous.theta0.log_ell],
        &opts,
    )?;
    warnings += u64::from(!theta0_out.converged);
    let theta0 = HyperParams::new(theta0_out.x[0], theta0_out.x[1]);

    let indiv = match &previous.indiv {
        IndivHp::Common { theta, noise } => {
            let out = maximize(
                |x| {
                    q_objective_common(
                        post,
                        data,
                        &HyperParams::new(x[0], x[1]),
                        &NoiseVariance::new(x[2]),
                    )
                },
                &[theta.log_v, theta.log_ell, noise.log_sigma2],
                &opts,
            )?;
            warnings += u64::from(!out.converged);
            IndivHp::Common {
                theta: HyperParams::new(out.x[0], out.x[1]),
                noise: NoiseVariance::new(out.x[2]),
            }
        }
        IndivHp::Different(entries) => {
            let mut fitted = Vec::with_capacity(entries.len());
            for (i, entry) in entries.iter().enumerate() {
                let series = &data.individuals()[i];
                let out = maximize(
                    |x| {
                        q_objective_individual(
                            post,
                            series,
                            &HyperParams::new(x[0], x[1]),
                            &NoiseVariance::new(x[2]),
                        )
                    },
                    &[
                        entry.theta.log_v,
                        entry.theta.log_ell,
                        entry.noise.log_sigma2,
                    ],
                    &opts,
                )?;
                warnings += u64::from(!out.converged);
                fitted.push(NamedHp {
                    id: entry.id.clone(),
                    theta: HyperParams::new(out.x[0], out.x[1]),
                    noise: NoiseVariance::new(out.x[2]),
                });
            }
            IndivHp::Different(fitted)
        }
    };

    Ok((ModelHp { theta0, indiv }, warnings))
}

/// M step: maximize the expected complete-data log-likelihood, warm-started
/// from the previous hyper-parameters. The returned Q value never falls below
/// the warm start's.
pub fn m_step(
    data: &TrainingSet,
    post: &HyperPosterior,
    prior_mean: &PriorMean,
    previous: &ModelHp,
) -> Result<ModelHp> {
    m_step_impl(data, post, prior_mean, previous, 200).map(|(hp, _)| hp)
}

/// Log-density of the stacked observations under the marginal model (mean
/// process integrated out): blocks `K(t_i, t_j) + delta_ij Psi_i`.
pub fn observed_data_log_likelihood(
    data: &TrainingSet,
    hp: &ModelHp,
    prior_mean: &PriorMean,
) -> Result<f64> {
    observed_ll_impl(data, hp, prior_mean, &mut JitterSink::default())
}

const LN_2PI: f64 = 1.8378770664093453;

fn observed_ll_impl(
    data: &TrainingSet,
    hp: &ModelHp,
    prior_mean: &PriorMean,
    sink: &mut JitterSink,
) -> Result<f64> {
    if data.is_empty() {
        return Err(MagmaError::InvalidArgument(
            "observed-data likelihood needs at least one individual".into(),
        ));
    }
    let sizes: Vec<usize> = data.individuals().iter().map(|s| s.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for s in &sizes {
        offsets.push(acc);
        acc += s;
    }

    let mut cov = DMatrix::zeros(total, total);
    let mut residual = DVector::zeros(total);
    for (i, si) in data.individuals().iter().enumerate() {
        let m0 = prior_mean.evaluate_on(si.timestamps());
        for (a, &y) in si.outputs().iter().enumerate() {
            residual[offsets[i] + a] = y - m0[a];
        }
        for (j, sj) in data.individuals().iter().enumerate().take(i + 1) {
            let block = if i == j {
                let (theta, noise) = hp.for_individual(i);
                let mut b = psi_matrix(si.timestamps(), theta, noise)?;
                b += cov_matrix(si.timestamps(), si.timestamps(), &hp.theta0)?;
                b
            } else {
                cov_matrix(si.timestamps(), sj.timestamps(), &hp.theta0)?
            };
            for a in 0..sizes[i] {
                for b in 0..sizes[j] {
                    cov[(offsets[i] + a, offsets[j] + b)] = block[(a, b)];
                    cov[(offsets[j] + b, offsets[i] + a)] = block[(a, b)];
                }
            }
        }
    }

    let factor = chol_psd(&cov, "observed-data covariance")?;
    sink.record(&factor);
    let alpha = factor.solve_vec(&residual)?;
    Ok(-0.5 * (total as f64 * LN_2PI + factor.log_det() + residual.dot(&alpha)))
}

/// Initial hyper-parameters for a restart. Restart 0 is exactly the default;
/// later restarts add seeded uniform noise in [-1, 1] to every log-parameter.
pub fn init_theta(config: &TrainingConfig, data: &TrainingSet, restart: usize) -> ModelHp {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(restart as u64);
    let mut perturb = |base: f64| -> f64 {
        if restart == 0 {
            base
        } else {
            base + rng.random_range(-1.0..=1.0)
        }
    };
    let theta0 = HyperParams::new(perturb(config.init.log_v), perturb(config.init.log_ell));
    let indiv = match config.mode {
        HpMode::Common => IndivHp::Common {
            theta: HyperParams::new(perturb(config.init.log_v), perturb(config.init.log_ell)),
            noise: NoiseVariance::new(perturb(config.init.log_sigma2)),
        },
        HpMode::Different => IndivHp::Different(
            data.individuals()
                .iter()
                .map(|s| NamedHp {
                    id: s.id().to_string(),
                    theta: HyperParams::new(
                        perturb(config.init.log_v),
                        perturb(config.init.log_ell),
                    ),
                    noise: NoiseVariance::new(perturb(config.init.log_sigma2)),
                })
                .collect(),
        ),
    };
    ModelHp { theta0, indiv }
}

struct EmRun {
    final_ll: f64,
    hp: ModelHp,
    hyper_posterior: HyperPosterior,
    trace: Vec<f64>,
    iterations: usize,
    sink: JitterSink,
    warnings: u64,
}

fn run_em_once(data: &TrainingSet, config: &TrainingConfig, restart: usize) -> Result<EmRun> {
    let mut sink = JitterSink::default();
    let mut hp = init_theta(config, data, restart);
    let mut ll = observed_ll_impl(data, &hp, &config.prior_mean, &mut sink)?;
    let mut trace = vec![ll];
    let mut warnings = 0u64;
    let mut iterations = 0;

    for k in 1..=config.max_iterations {
        let post = e_step_impl(data, &hp, &config.prior_mean, &mut sink)?;
        let (next, w) = m_step_impl(data, &post, &config.prior_mean, &hp, config.max_fevals)?;
        warnings += w;
        hp = next;
        let next_ll = observed_ll_impl(data, &hp, &config.prior_mean, &mut sink)?;
        trace.push(next_ll);
        iterations = k;
        let rel = (next_ll - ll).abs() / ll.abs().max(1e-12);
        ll = next_ll;
        if rel < config.tolerance {
            break;
        }
    }

    let hyper_posterior = e_step_impl(data, &hp, &config.prior_mean, &mut sink)?;
    Ok(EmRun {
        final_ll: ll,
        hp,
        hyper_posterior,
        trace,
        iterations,
        sink,
        warnings,
    })
}

/// Run the EM algorithm, possibly with several restarts, and keep the run
/// with the highest final observed-data log-likelihood.
pub fn train_em(data: &TrainingSet, config: &TrainingConfig) -> Result<TrainedModel> {
    if data.is_empty() {
        return Err(MagmaError::InvalidArgument(
            "training needs at least one individual".into(),
        ));
    }
    let restarts = config.restarts.max(1);
    let mut best: Option<(EmRun, usize)> = None;
    let mut failed = 0u64;
    let mut last_err = None;
    for r in 0..restarts {
        match run_em_once(data, config, r) {
            Ok(run) => {
                if best.as_ref().is_none_or(|(b, _)| run.final_ll > b.final_ll) {
                    best = Some((run, r));
                }
            }
            Err(e) => {
                failed += 1;
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((run, r)) => Ok(TrainedModel {
            hp: run.hp,
            prior_mean: config.prior_mean.clone(),
            hyper_posterior: run.hyper_posterior,
            diagnostics: Diagnostics {
                iterations: run.iterations,
                objective_trace: run.trace,
                jitter_events: run.sink.events,
                max_jitter: run.sink.max,
                restart_index: r,
                optimizer_warnings: run.warnings,
                failed_restarts: failed,
            },
        }),
        None => Err(last_err.expect("at least one restart ran")),
    }
}

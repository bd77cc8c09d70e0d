//! Synthetic-data generation, evaluation metrics, and the benchmark harness.
//!
//! A dataset is drawn in six steps: a random working grid, a linear prior
//! mean `a t + b`, mean-process kernel hyper-parameters, a mean-process draw
//! on the grid, per-individual (or shared) hyper-parameters, and finally each
//! individual's timestamps and outputs. The kernel variance and length-scale
//! ranges are written as `[1, e^5]` and `[1, e^2]`; by default the draws are
//! log-uniform (uniform exponent), with a flag restoring literal uniform
//! draws. The noise variance is always drawn uniformly on its range.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{IndividualSeries, TrainingSet};
use crate::error::{MagmaError, Result};
use crate::kernel::{cov_matrix, cov_matrix_grad, psi_matrix, HyperParams, NoiseVariance};
use crate::linalg::{chol_psd, symmetrize, time_key};
use crate::optim::{maximize, AscentOptions};
use crate::prediction::{predict, PredictConfig, PredictiveDistribution};
use crate::training::{train_em, HpMode, InitValues, TermPrecomp, TrainedModel, TrainingConfig};

/// Whether all individuals share one observation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridMode {
    Common,
    Uncommon,
}

/// Ranges for the generative draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpRanges {
    /// Slope of the linear prior mean.
    pub a: (f64, f64),
    /// Intercept of the linear prior mean.
    pub b: (f64, f64),
    /// Kernel variance `v^2`.
    pub v2: (f64, f64),
    /// Kernel length-scale.
    pub ell: (f64, f64),
    /// Noise variance.
    pub sigma2: (f64, f64),
}

impl Default for HpRanges {
    fn default() -> Self {
        Self {
            a: (-2.0, 2.0),
            b: (0.0, 10.0),
            v2: (1.0, (5f64).exp()),
            ell: (1.0, (2f64).exp()),
            sigma2: (0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Number of training individuals.
    pub m: usize,
    /// Size of the working grid.
    pub n_pooled: usize,
    /// Observations per individual.
    pub n_i: usize,
    pub input_range: (f64, f64),
    /// Sharing hypothesis of the generative draws.
    pub gen_hp_mode: HpMode,
    pub grid_mode: GridMode,
    pub ranges: HpRanges,
    /// Draw `v^2` and `ell` literally uniformly instead of log-uniformly.
    pub raw_uniform_hp: bool,
    /// Observed prefix of the held-out individual.
    pub n_obs: usize,
    /// Test suffix of the held-out individual.
    pub n_test: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            m: 20,
            n_pooled: 200,
            n_i: 30,
            input_range: (0.0, 10.0),
            gen_hp_mode: HpMode::Common,
            grid_mode: GridMode::Common,
            ranges: HpRanges::default(),
            raw_uniform_hp: false,
            n_obs: 20,
            n_test: 10,
        }
    }
}

/// The parameters a dataset was generated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub a: f64,
    pub b: f64,
    pub theta0: HyperParams,
    /// Per training individual (repeats the shared pair in common mode).
    pub individual_hp: Vec<(HyperParams, NoiseVariance)>,
    pub new_hp: (HyperParams, NoiseVariance),
}

/// A simulated dataset with its recorded latents.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub training: TrainingSet,
    /// Held-out individual, all `n_i` points.
    pub new_individual: IndividualSeries,
    pub n_obs: usize,
    pub n_test: usize,
    /// The full working grid.
    pub working_grid: Vec<f64>,
    /// True mean-process draw on the working grid.
    pub mu0: Vec<f64>,
    /// Individual-process draws `f_i(t_i)` per training individual.
    pub f_latents: Vec<Vec<f64>>,
    /// Individual-process draw of the held-out individual.
    pub new_f: Vec<f64>,
    pub gen: GenParams,
    pub seed: u64,
}

impl SimDataset {
    /// Observed prefix of the held-out individual.
    pub fn new_observed(&self) -> IndividualSeries {
        self.new_individual.prefix(self.n_obs)
    }

    /// Test suffix `(timestamps, outputs)` of the held-out individual.
    pub fn new_test(&self) -> (Vec<f64>, Vec<f64>) {
        let s = self.new_individual.suffix(self.n_test);
        (s.timestamps().to_vec(), s.outputs().to_vec())
    }

    /// True mean-process value at a working-grid timestamp.
    pub fn mu0_at(&self, t: f64) -> Option<f64> {
        let key = time_key(t);
        self.working_grid
            .iter()
            .position(|&g| time_key(g) == key)
            .map(|i| self.mu0[i])
    }
}

fn draw_scale(rng: &mut ChaCha8Rng, range: (f64, f64), raw: bool) -> f64 {
    if raw {
        rng.random_range(range.0..=range.1)
    } else {
        rng.random_range(range.0.ln()..=range.1.ln()).exp()
    }
}

fn draw_hp(rng: &mut ChaCha8Rng, cfg: &SimConfig) -> (HyperParams, NoiseVariance) {
    let v2 = draw_scale(rng, cfg.ranges.v2, cfg.raw_uniform_hp);
    let ell = draw_scale(rng, cfg.ranges.ell, cfg.raw_uniform_hp);
    let sigma2 = rng.random_range(cfg.ranges.sigma2.0..=cfg.ranges.sigma2.1);
    // keep sigma^2 representable in log-space
    let sigma2 = sigma2.max(1e-10);
    (
        HyperParams::new(0.5 * v2.ln(), ell.ln()),
        NoiseVariance::new(sigma2.ln()),
    )
}

fn draw_gaussian(
    rng: &mut ChaCha8Rng,
    mean: &DVector<f64>,
    cov: &nalgebra::DMatrix<f64>,
    role: &str,
) -> Result<DVector<f64>> {
    let factor = chol_psd(cov, role)?;
    let z = DVector::from_iterator(
        mean.len(),
        (0..mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    Ok(mean + factor.lower() * z)
}

fn sorted_subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Draw a dataset. Fully determined by `config` (bit-reproducible).
pub fn simulate_dataset(config: &SimConfig) -> Result<SimDataset> {
    if config.m == 0 || config.n_i == 0 || config.n_i > config.n_pooled {
        return Err(MagmaError::InvalidArgument(format!(
            "invalid simulation sizes: m={}, n_i={}, n_pooled={}",
            config.m, config.n_i, config.n_pooled
        )));
    }
    if config.n_obs + config.n_test > config.n_i {
        return Err(MagmaError::InvalidArgument(format!(
            "observed + test split ({} + {}) exceeds n_i={}",
            config.n_obs, config.n_test, config.n_i
        )));
    }
    let check_range = |(lo, hi): (f64, f64), what: &str, positive: bool| -> Result<()> {
        let floor_ok = !positive || lo > 0.0;
        if !(lo.is_finite() && hi.is_finite() && lo < hi && floor_ok) {
            return Err(MagmaError::InvalidArgument(format!(
                "invalid {what} range [{lo}, {hi}]"
            )));
        }
        Ok(())
    };
    check_range(config.input_range, "input", false)?;
    check_range(config.ranges.a, "slope", false)?;
    check_range(config.ranges.b, "intercept", false)?;
    // v^2 and ell must stay positive: the draws are log-uniform by default
    check_range(config.ranges.v2, "kernel variance", true)?;
    check_range(config.ranges.ell, "length-scale", true)?;
    check_range(config.ranges.sigma2, "noise variance", false)?;
    if config.ranges.sigma2.0 < 0.0 {
        return Err(MagmaError::InvalidArgument(
            "noise-variance range cannot extend below zero".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // 1. working grid: uniform draws until n_pooled distinct quantized points
    let (lo, hi) = config.input_range;
    let mut keys = std::collections::BTreeSet::new();
    while keys.len() < config.n_pooled {
        keys.insert(time_key(rng.random_range(lo..hi)));
    }
    let grid: Vec<f64> = keys
        .into_iter()
        .map(|k| k as f64 * crate::linalg::TIME_QUANTUM)
        .collect();

    // 2. linear prior mean
    let a = rng.random_range(config.ranges.a.0..=config.ranges.a.1);
    let b = rng.random_range(config.ranges.b.0..=config.ranges.b.1);
    let m0 = DVector::from_iterator(grid.len(), grid.iter().map(|&t| a * t + b));

    // 3. mean-process kernel
    let (theta0, _) = draw_hp(&mut rng, config);

    // 4. mean-process draw
    let k0 = cov_matrix(&grid, &grid, &theta0)?;
    let mu0 = draw_gaussian(&mut rng, &m0, &k0, "simulated mean-process covariance")?;

    // 5/6. individual hyper-parameters, grids, and outputs
    let shared_hp = match config.gen_hp_mode {
        HpMode::Common => Some(draw_hp(&mut rng, config)),
        HpMode::Different => None,
    };
    let common_subset = match config.grid_mode {
        GridMode::Common => Some(sorted_subset(&mut rng, grid.len(), config.n_i)),
        GridMode::Uncommon => None,
    };

    let draw_series = |rng: &mut ChaCha8Rng,
                       id: String|
     -> Result<(IndividualSeries, Vec<f64>, (HyperParams, NoiseVariance))> {
        let hp = match &shared_hp {
            Some(pair) => *pair,
            None => draw_hp(rng, config),
        };
        let idx = match &common_subset {
            Some(s) => s.clone(),
            None => sorted_subset(rng, grid.len(), config.n_i),
        };
        let t: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
        let sigma = cov_matrix(&t, &t, &hp.0)?;
        let f = draw_gaussian(
            rng,
            &DVector::zeros(t.len()),
            &sigma,
            "simulated individual covariance",
        )?;
        let noise_sd = hp.1.sigma2().sqrt();
        let y: Vec<f64> = idx
            .iter()
            .zip(f.iter())
            .map(|(&i, &fi)| mu0[i] + fi + noise_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok((
            IndividualSeries::new(id, t, y)?,
            f.iter().copied().collect(),
            hp,
        ))
    };

    let mut individuals = Vec::with_capacity(config.m);
    let mut f_latents = Vec::with_capacity(config.m);
    let mut individual_hp = Vec::with_capacity(config.m);
    for i in 0..config.m {
        let (series, f, hp) = draw_series(&mut rng, format!("ind_{i:03}"))?;
        individuals.push(series);
        f_latents.push(f);
        individual_hp.push(hp);
    }
    let (new_individual, new_f, new_hp) = draw_series(&mut rng, "new".to_string())?;

    Ok(SimDataset {
        training: TrainingSet::new(individuals)?,
        new_individual,
        n_obs: config.n_obs,
        n_test: config.n_test,
        working_grid: grid,
        mu0: mu0.iter().copied().collect(),
        f_latents,
        new_f,
        gen: GenParams {
            a,
            b,
            theta0,
            individual_hp,
            new_hp,
        },
        seed: config.seed,
    })
}

fn lookup(pred: &PredictiveDistribution, t: f64) -> Result<usize> {
    let key = time_key(t);
    pred.timestamps
        .iter()
        .position(|&p| time_key(p) == key)
        .ok_or_else(|| {
            MagmaError::InvalidArgument(format!("timestamp {t} missing from the prediction"))
        })
}

/// Mean squared error of the predictive mean over the test points.
pub fn mse_prediction(
    pred: &PredictiveDistribution,
    truth_t: &[f64],
    truth_y: &[f64],
) -> Result<f64> {
    if truth_t.len() != truth_y.len() || truth_t.is_empty() {
        return Err(MagmaError::InvalidArgument(
            "test split must be non-empty with matching lengths".into(),
        ));
    }
    let mut acc = 0.0;
    for (&t, &y) in truth_t.iter().zip(truth_y) {
        let i = lookup(pred, t)?;
        acc += (pred.mean[i] - y).powi(2);
    }
    Ok(acc / truth_t.len() as f64)
}

/// Percentage of test points inside the central 95% credible interval.
pub fn ci95_coverage(
    pred: &PredictiveDistribution,
    truth_t: &[f64],
    truth_y: &[f64],
) -> Result<f64> {
    if truth_t.len() != truth_y.len() || truth_t.is_empty() {
        return Err(MagmaError::InvalidArgument(
            "test split must be non-empty with matching lengths".into(),
        ));
    }
    let ci = pred.ci95();
    let mut hits = 0usize;
    for (&t, &y) in truth_t.iter().zip(truth_y) {
        let i = lookup(pred, t)?;
        if y >= ci[i].0 && y <= ci[i].1 {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / truth_t.len() as f64)
}

/// Mean-process estimation error: squared error of the posterior mean
/// against the true draw, averaged over each individual's timestamps and
/// then over individuals.
pub fn mse_mu0(model: &TrainedModel, data: &TrainingSet, grid: &[f64], mu0: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(MagmaError::InvalidArgument(
            "mean-process error needs at least one individual".into(),
        ));
    }
    let keys: Vec<i64> = grid.iter().map(|&t| time_key(t)).collect();
    let post = &model.hyper_posterior;
    let mut acc = 0.0;
    for series in data.individuals() {
        let mut indiv = 0.0;
        for &t in series.timestamps() {
            let gi = keys.binary_search(&time_key(t)).map_err(|_| {
                MagmaError::InvalidArgument(format!(
                    "timestamp {t} missing from the true mean-process grid"
                ))
            })?;
            let pi = post.position_of(t).ok_or_else(|| {
                MagmaError::InvalidArgument(format!(
                    "timestamp {t} missing from the trained hyper-posterior"
                ))
            })?;
            indiv += (post.mean()[pi] - mu0[gi]).powi(2);
        }
        acc += indiv / series.len() as f64;
    }
    Ok(acc / data.len() as f64)
}

/// Single-task GP regression baseline: zero prior mean, exponentiated
/// quadratic kernel, empirical-Bayes fit on the new individual's
/// observations, then textbook conditioning.
pub fn gp_baseline_predict(
    new_obs: &IndividualSeries,
    targets: &[f64],
    init: &InitValues,
    max_fevals: usize,
) -> Result<PredictiveDistribution> {
    let targets: Vec<f64> = targets
        .iter()
        .map(|&t| crate::linalg::quantize_time(t))
        .collect();
    let t_obs = new_obs.timestamps();
    let (theta, noise) = if new_obs.is_empty() {
        (
            HyperParams::new(init.log_v, init.log_ell),
            NoiseVariance::new(init.log_sigma2),
        )
    } else {
        let y = new_obs.outputs_vector();
        let out = maximize(
            |x| {
                let theta = HyperParams::new(x[0], x[1]);
                let noise = NoiseVariance::new(x[2]);
                let cov = psi_matrix(t_obs, &theta, &noise)?;
                let grads = cov_matrix_grad(t_obs, &theta, Some(&noise))?;
                let pre = TermPrecomp::new(&cov, grads, None, "baseline GP covariance")?;
                Ok(pre.eval(&y))
            },
            &[init.log_v, init.log_ell, init.log_sigma2],
            &AscentOptions {
                max_evals: max_fevals,
                ..Default::default()
            },
        )?;
        (
            HyperParams::new(out.x[0], out.x[1]),
            NoiseVariance::new(out.x[2]),
        )
    };

    let prior_cov = psi_matrix(&targets, &theta, &noise)?;
    if new_obs.is_empty() {
        return Ok(PredictiveDistribution {
            timestamps: targets,
            mean: DVector::zeros(prior_cov.nrows()),
            cov: prior_cov,
        });
    }
    let c_obs = psi_matrix(t_obs, &theta, &noise)?;
    let factor = chol_psd(&c_obs, "baseline GP observed covariance")?;
    let k_ts = cov_matrix(&targets, t_obs, &theta)?;
    let alpha = factor.solve_vec(&new_obs.outputs_vector())?;
    let mean = &k_ts * alpha;
    let solved = factor.solve_mat(&k_ts.transpose())?;
    let cov = symmetrize(prior_cov - &k_ts * solved);
    Ok(PredictiveDistribution {
        timestamps: targets,
        mean,
        cov,
    })
}

/// Benchmark configuration: how many seeded runs, what to generate, and how
/// to train.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub base_seed: u64,
    pub runs: usize,
    pub sim: SimConfig,
    pub train_mode: HpMode,
    pub restarts: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            base_seed: 0,
            runs: 30,
            sim: SimConfig::default(),
            train_mode: HpMode::Common,
            restarts: 1,
            tolerance: 1e-3,
            max_iterations: 100,
        }
    }
}

/// Metrics of one benchmark run (NaN where the run failed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub magma_mse: f64,
    pub magma_coverage: f64,
    pub gp_mse: f64,
    pub gp_coverage: f64,
    pub mu0_mse: f64,
    pub em_iterations: usize,
    pub error: Option<String>,
}

/// Mean and standard deviation over the successful runs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_ok: usize,
    pub failures: usize,
    pub magma_mse: (f64, f64),
    pub magma_coverage: (f64, f64),
    pub gp_mse: (f64, f64),
    pub gp_coverage: (f64, f64),
    pub mu0_mse: (f64, f64),
}

/// Per-run metrics plus order-independent aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunMetrics>,
    pub aggregate: Aggregate,
}

/// Mean and sample standard deviation, summed in sorted order so the result
/// does not depend on run ordering.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    if sorted.len() < 2 {
        return (mean, 0.0);
    }
    let mut devs: Vec<f64> = sorted.iter().map(|v| (v - mean).powi(2)).collect();
    devs.sort_by(|x, y| x.total_cmp(y));
    let var = devs.iter().sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate a slice of run metrics; invariant to the order of `runs`.
pub fn aggregate_runs(runs: &[RunMetrics]) -> Aggregate {
    let ok: Vec<&RunMetrics> = runs.iter().filter(|r| r.error.is_none()).collect();
    let pick = |f: fn(&RunMetrics) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).collect() };
    Aggregate {
        n_ok: ok.len(),
        failures: runs.len() - ok.len(),
        magma_mse: mean_sd(&pick(|r| r.magma_mse)),
        magma_coverage: mean_sd(&pick(|r| r.magma_coverage)),
        gp_mse: mean_sd(&pick(|r| r.gp_mse)),
        gp_coverage: mean_sd(&pick(|r| r.gp_coverage)),
        mu0_mse: mean_sd(&pick(|r| r.mu0_mse)),
    }
}

/// One full pipeline run: simulate, train, predict the test suffix with the
/// model and the GP baseline, and score both.
pub fn benchmark_run(cfg: &BenchmarkConfig, run_index: usize) -> RunMetrics {
    let seed = cfg.base_seed.wrapping_add(run_index as u64);
    let mut metrics = RunMetrics {
        seed,
        magma_mse: f64::NAN,
        magma_coverage: f64::NAN,
        gp_mse: f64::NAN,
        gp_coverage: f64::NAN,
        mu0_mse: f64::NAN,
        em_iterations: 0,
        error: None,
    };
    let mut sim_cfg = cfg.sim;
    sim_cfg.seed = seed;
    let outcome = (|| -> Result<()> {
        let ds = simulate_dataset(&sim_cfg)?;
        let train_cfg = TrainingConfig {
            mode: cfg.train_mode,
            restarts: cfg.restarts,
            seed,
            tolerance: cfg.tolerance,
            max_iterations: cfg.max_iterations,
            ..Default::default()
        };
        let model = train_em(&ds.training, &train_cfg)?;
        metrics.em_iterations = model.diagnostics.iterations;

        let observed = ds.new_observed();
        let (test_t, test_y) = ds.new_test();
        let pred = predict(
            &model,
            &ds.training,
            &observed,
            &test_t,
            &PredictConfig::default(),
        )?;
        metrics.magma_mse = mse_prediction(&pred, &test_t, &test_y)?;
        metrics.magma_coverage = ci95_coverage(&pred, &test_t, &test_y)?;
        metrics.mu0_mse = mse_mu0(&model, &ds.training, &ds.working_grid, &ds.mu0)?;

        let gp = gp_baseline_predict(&observed, &test_t, &InitValues::default(), 200)?;
        metrics.gp_mse = mse_prediction(&gp, &test_t, &test_y)?;
        metrics.gp_coverage = ci95_coverage(&gp, &test_t, &test_y)?;
        Ok(())
    })();
    if let Err(e) = outcome {
        metrics.error = Some(e.to_string());
    }
    metrics
}

/// Run the benchmark over `runs` consecutive seeds. Runs execute in
/// parallel; results keep seed order and failures are recorded, not fatal.
pub fn benchmark(cfg: &BenchmarkConfig) -> EvalReport {
    let runs: Vec<RunMetrics> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| benchmark_run(cfg, r))
        .collect();
    let aggregate = aggregate_runs(&runs);
    EvalReport { runs, aggregate }
}

/// Benchmark across training-set sizes.
pub fn benchmark_sweep_m(cfg: &BenchmarkConfig, ms: &[usize]) -> Vec<(usize, EvalReport)> {
    ms.iter()
        .map(|&m| {
            let mut c = cfg.clone();
            c.sim.m = m;
            (m, benchmark(&c))
        })
        .collect()
}

/// Benchmark across the number of observed points of the new individual.
pub fn benchmark_sweep_nobs(cfg: &BenchmarkConfig, nobs: &[usize]) -> Vec<(usize, EvalReport)> {
    nobs.iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.sim.n_obs = n;
            (n, benchmark(&c))
        })
        .collect()
}

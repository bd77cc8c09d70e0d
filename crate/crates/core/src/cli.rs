//! Command-line interface: `simulate`, `train`, `predict`, `evaluate`, and
//! `benchmark`. All commands are deterministic given `--seed`; errors are
//! reported on stderr as a single `error: ...` line with a nonzero exit.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{IndividualSeries, PriorMean};
use crate::error::{MagmaError, Result};
use crate::io;
use crate::prediction::{predict, PredictConfig};
use crate::simeval::{
    benchmark, benchmark_sweep_m, benchmark_sweep_nobs, simulate_dataset, BenchmarkConfig,
    GridMode, SimConfig,
};
use crate::training::{train_em, HpMode, TrainingConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HpModeArg {
    Common,
    Different,
}

impl From<HpModeArg> for HpMode {
    fn from(v: HpModeArg) -> Self {
        match v {
            HpModeArg::Common => HpMode::Common,
            HpModeArg::Different => HpMode::Different,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GridModeArg {
    Common,
    Uncommon,
}

impl From<GridModeArg> for GridMode {
    fn from(v: GridModeArg) -> Self {
        match v {
            GridModeArg::Common => GridMode::Common,
            GridModeArg::Uncommon => GridMode::Uncommon,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepArg {
    M,
    Nobs,
}

#[derive(Parser, Debug)]
#[command(
    name = "magma",
    version,
    about = "Multi-task Gaussian process regression with a shared mean process"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into a directory.
    Simulate(SimulateArgs),
    /// Fit the model on a dataset CSV and save it as JSON.
    Train(TrainArgs),
    /// Predict a new individual at target timestamps.
    Predict(PredictArgs),
    /// Score a prediction CSV against held-out truth.
    Evaluate(EvaluateArgs),
    /// Run the seeded simulate/train/predict benchmark.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of training individuals.
    #[arg(long, default_value_t = 20)]
    m: usize,
    /// Observations per individual.
    #[arg(long = "n-i", default_value_t = 30)]
    n_i: usize,
    /// Size of the underlying working grid.
    #[arg(long = "n-grid", default_value_t = 200)]
    n_grid: usize,
    #[arg(long, value_enum, default_value_t = GridModeArg::Common)]
    grid: GridModeArg,
    /// Hyper-parameter sharing of the generative draws.
    #[arg(long, value_enum, default_value_t = HpModeArg::Common)]
    hp: HpModeArg,
    /// Draw kernel variance and length-scale literally uniformly instead of
    /// log-uniformly.
    #[arg(long)]
    raw_uniform_hp: bool,
    /// Observed prefix of the held-out individual.
    #[arg(long = "n-obs", default_value_t = 20)]
    n_obs: usize,
    /// Test suffix of the held-out individual.
    #[arg(long = "n-test", default_value_t = 10)]
    n_test: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset CSV (individual_id,timestamp,output).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = HpModeArg::Common)]
    mode: HpModeArg,
    /// Prior mean, e.g. `const:0`.
    #[arg(long = "m0", default_value = "const:0")]
    m0: String,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Relative observed-data log-likelihood change below which EM stops.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long = "max-iter", default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Trained model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Training dataset the model was fitted on.
    #[arg(long)]
    data: PathBuf,
    /// New individual's observations (dataset CSV with one individual).
    /// Omit for a mean-process-only prediction.
    #[arg(long = "new-obs")]
    new_obs: Option<PathBuf>,
    /// Comma-separated target timestamps.
    #[arg(long, value_delimiter = ',', required = true)]
    targets: Vec<f64>,
    /// Leave the training grid out of the prediction working grid.
    #[arg(long)]
    no_training_grid: bool,
    /// Output prediction CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Prediction CSV produced by `predict`.
    #[arg(long)]
    pred: PathBuf,
    /// Held-out truth (dataset CSV).
    #[arg(long)]
    truth: PathBuf,
    /// Output report JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    #[arg(long, default_value_t = 30)]
    runs: usize,
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long = "n-i", default_value_t = 30)]
    n_i: usize,
    #[arg(long, value_enum, default_value_t = GridModeArg::Common)]
    grid: GridModeArg,
    /// Hyper-parameter sharing of the generative draws.
    #[arg(long, value_enum, default_value_t = HpModeArg::Common)]
    hp: HpModeArg,
    /// Hyper-parameter sharing assumed by training.
    #[arg(long, value_enum, default_value_t = HpModeArg::Common)]
    mode: HpModeArg,
    /// Observed prefix of the held-out individual.
    #[arg(long = "n-obs", default_value_t = 20)]
    n_obs: usize,
    /// Test suffix of the held-out individual.
    #[arg(long = "n-test", default_value_t = 10)]
    n_test: usize,
    /// Sweep over training-set size (`m`) or observed points (`nobs`)
    /// instead of a single setting.
    #[arg(long, value_enum)]
    sweep: Option<SweepArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_prior_mean(spec: &str) -> Result<PriorMean> {
    if let Some(rest) = spec.strip_prefix("const:") {
        let c: f64 = rest.parse().map_err(|_| {
            MagmaError::InvalidArgument(format!("cannot parse prior-mean constant '{rest}'"))
        })?;
        return PriorMean::constant(c);
    }
    Err(MagmaError::InvalidArgument(format!(
        "unsupported prior mean '{spec}' (expected const:<value>)"
    )))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = SimConfig {
        seed: args.seed,
        m: args.m,
        n_pooled: args.n_grid,
        n_i: args.n_i,
        gen_hp_mode: args.hp.into(),
        grid_mode: args.grid.into(),
        raw_uniform_hp: args.raw_uniform_hp,
        n_obs: args.n_obs,
        n_test: args.n_test,
        ..Default::default()
    };
    let ds = simulate_dataset(&cfg)?;
    io::write_sim_dataset(&ds, &args.out)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let data = io::load_dataset(&args.data)?;
    let config = TrainingConfig {
        mode: args.mode.into(),
        prior_mean: parse_prior_mean(&args.m0)?,
        restarts: args.restarts,
        seed: args.seed,
        tolerance: args.tol,
        max_iterations: args.max_iter,
        ..Default::default()
    };
    let model = train_em(&data, &config)?;
    io::save_model(&model, &args.out)?;
    log::info!(
        "trained in {} iterations (restart {}), final log-likelihood {}",
        model.diagnostics.iterations,
        model.diagnostics.restart_index,
        model
            .diagnostics
            .objective_trace
            .last()
            .copied()
            .unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = io::load_model(&args.model)?;
    let data = io::load_dataset(&args.data)?;
    let new_obs = match &args.new_obs {
        Some(path) => {
            let set = io::load_dataset(path)?;
            if set.len() != 1 {
                return Err(MagmaError::InvalidArgument(format!(
                    "new-observations file must hold exactly one individual, got {}",
                    set.len()
                )));
            }
            set.individuals()[0].clone()
        }
        None => IndividualSeries::empty("new"),
    };
    let config = PredictConfig {
        include_training_grid: !args.no_training_grid,
        ..Default::default()
    };
    let pred = predict(&model, &data, &new_obs, &args.targets, &config)?;
    io::write_prediction(&pred, &args.out)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let report = io::evaluate_prediction(&args.pred, &args.truth)?;
    io::write_report(&report, &args.out)
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| MagmaError::io(&args.out, e))?;
    let cfg = BenchmarkConfig {
        base_seed: args.seed,
        runs: args.runs,
        sim: SimConfig {
            m: args.m,
            n_i: args.n_i,
            gen_hp_mode: args.hp.into(),
            grid_mode: args.grid.into(),
            n_obs: args.n_obs,
            n_test: args.n_test,
            ..Default::default()
        },
        train_mode: args.mode.into(),
        ..Default::default()
    };
    match args.sweep {
        None => {
            let report = benchmark(&cfg);
            io::write_benchmark_runs(&report, &args.out.join("runs.csv"))?;
            io::write_benchmark_aggregate(&report.aggregate, &args.out.join("aggregate.json"))
        }
        Some(SweepArg::M) => {
            let points = benchmark_sweep_m(&cfg, &[5, 20, 50, 100]);
            write_sweep(&points, "m", &args.out)
        }
        Some(SweepArg::Nobs) => {
            let points = benchmark_sweep_nobs(&cfg, &[5, 10, 15, 20]);
            write_sweep(&points, "nobs", &args.out)
        }
    }
}

fn write_sweep(
    points: &[(usize, crate::simeval::EvalReport)],
    name: &str,
    out: &std::path::Path,
) -> Result<()> {
    let mut aggregates = Vec::new();
    for (value, report) in points {
        io::write_benchmark_runs(report, &out.join(format!("runs_{name}{value}.csv")))?;
        aggregates.push(serde_json::json!({
            name: value,
            "aggregate": report.aggregate,
        }));
    }
    io::write_benchmark_aggregate(&aggregates, &out.join("aggregate.json"))
}

/// Parse and run; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first_line = e.to_string();
            let first_line = first_line.lines().next().unwrap_or("invalid usage");
            eprintln!("error: usage: {first_line}");
            return 2;
        }
    };
    let outcome = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Benchmark(args) => cmd_benchmark(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_mean_spec_parsing() {
        assert_eq!(
            parse_prior_mean("const:0").unwrap(),
            PriorMean::Constant(0.0)
        );
        assert_eq!(
            parse_prior_mean("const:-1.5").unwrap(),
            PriorMean::Constant(-1.5)
        );
        assert!(parse_prior_mean("linear:1").is_err());
        assert!(parse_prior_mean("const:abc").is_err());
    }

    #[test]
    fn unknown_flag_fails_with_usage_exit() {
        let code = run(["magma", "train", "--no-such-flag"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn missing_file_fails_with_runtime_exit() {
        let code = run([
            "magma",
            "train",
            "--data",
            "/nonexistent/x.csv",
            "--out",
            "/nonexistent/m.json",
        ]);
        assert_eq!(code, 1);
    }
}

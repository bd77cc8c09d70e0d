//! File formats: dataset CSV, model JSON, prediction CSV, report JSON, and
//! the simulation output directory.
//!
//! All numbers are written as shortest round-trip decimals, so a
//! save/load/save cycle is byte-identical and every numeric field survives
//! persistence bit-exactly. The model file carries a schema version; files
//! written by a newer schema are rejected.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{IndividualSeries, PriorMean, TrainingSet};
use crate::error::{MagmaError, Result};
use crate::prediction::PredictiveDistribution;
use crate::simeval::{EvalReport, SimDataset};
use crate::training::{Diagnostics, HpMode, HyperPosterior, ModelHp, TrainedModel};

pub const MODEL_FILE_VERSION: u32 = 1;
pub const REPORT_FILE_VERSION: u32 = 1;

const DATASET_HEADER: [&str; 3] = ["individual_id", "timestamp", "output"];

/// Read a dataset CSV (`individual_id,timestamp,output`) into a validated
/// training set. Rows may arrive in any order; individuals are sorted by id
/// and observations by timestamp.
pub fn load_dataset(path: &Path) -> Result<TrainingSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => MagmaError::io(path, std::io::Error::other(e.to_string())),
            _ => MagmaError::Csv(e),
        })?;
    {
        let headers = reader.headers()?;
        let got: Vec<&str> = headers.iter().collect();
        if got != DATASET_HEADER {
            return Err(MagmaError::DataFormat {
                line: 1,
                message: format!(
                    "expected header {}, got {}",
                    DATASET_HEADER.join(","),
                    got.join(",")
                ),
            });
        }
    }

    // id -> (timestamps, outputs)
    let mut groups: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)> =
        std::collections::BTreeMap::new();
    let mut seen: std::collections::BTreeSet<(String, i64)> = std::collections::BTreeSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or_default();
        if record.len() != 3 {
            return Err(MagmaError::DataFormat {
                line,
                message: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(MagmaError::DataFormat {
                line,
                message: "empty individual_id".into(),
            });
        }
        let parse = |field: &str, name: &str| -> Result<f64> {
            let v: f64 = field.parse().map_err(|_| MagmaError::DataFormat {
                line,
                message: format!("cannot parse {name} '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(MagmaError::DataFormat {
                    line,
                    message: format!("non-finite {name} '{field}'"),
                });
            }
            Ok(v)
        };
        let t = parse(&record[1], "timestamp")?;
        let y = parse(&record[2], "output")?;
        let key = crate::linalg::time_key(t);
        if !seen.insert((id.clone(), key)) {
            return Err(MagmaError::DuplicateObservation {
                id,
                timestamp: crate::linalg::quantize_time(t),
                line,
            });
        }
        let entry = groups.entry(id).or_default();
        entry.0.push(t);
        entry.1.push(y);
    }
    if groups.is_empty() {
        return Err(MagmaError::DataFormat {
            line: 1,
            message: "dataset contains no observations".into(),
        });
    }
    let mut individuals = Vec::with_capacity(groups.len());
    for (id, (t, y)) in groups {
        individuals.push(IndividualSeries::new(id, t, y)?);
    }
    TrainingSet::new(individuals)
}

/// Write individuals in dataset-CSV form, sorted by id then timestamp.
pub fn save_dataset(individuals: &[IndividualSeries], path: &Path) -> Result<()> {
    let mut sorted: Vec<&IndividualSeries> = individuals.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));
    let mut out = String::new();
    out.push_str(&DATASET_HEADER.join(","));
    out.push('\n');
    for s in sorted {
        for (&t, &y) in s.timestamps().iter().zip(s.outputs()) {
            out.push_str(&format!("{},{},{}\n", s.id(), t, y));
        }
    }
    fs::write(path, out).map_err(|e| MagmaError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    rows: usize,
    cols: usize,
    /// Row-major dense entries.
    data: Vec<f64>,
}

impl MatrixFile {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(MagmaError::DimensionMismatch {
                context: "model file covariance".into(),
                expected: self.rows * self.cols,
                got: self.data.len(),
            });
        }
        Ok(DMatrix::from_row_iterator(
            self.rows,
            self.cols,
            self.data.iter().copied(),
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    library_version: String,
    hp_mode: HpMode,
    hp: ModelHp,
    prior_mean: PriorMean,
    grid: Vec<f64>,
    posterior_mean: Vec<f64>,
    posterior_cov: MatrixFile,
    diagnostics: Diagnostics,
}

/// Persist a trained model as versioned JSON.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let file = ModelFile {
        version: MODEL_FILE_VERSION,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        hp_mode: model.hp_mode(),
        hp: model.hp.clone(),
        prior_mean: model.prior_mean.clone(),
        grid: model.hyper_posterior.grid().to_vec(),
        posterior_mean: model.hyper_posterior.mean().iter().copied().collect(),
        posterior_cov: MatrixFile::from_matrix(model.hyper_posterior.cov()),
        diagnostics: model.diagnostics.clone(),
    };
    let mut buf = serde_json::to_vec_pretty(&file)?;
    buf.push(b'\n');
    fs::write(path, buf).map_err(|e| MagmaError::io(path, e))
}

/// Load a model saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| MagmaError::io(path, e))?;
    let probe: serde_json::Value = serde_json::from_slice(&bytes)?;
    let version = probe
        .get("version")
        .and_then(|v| v.as_u64())
        .unwrap_or(u64::MAX) as u32;
    if version > MODEL_FILE_VERSION {
        return Err(MagmaError::VersionMismatch {
            found: version,
            supported: MODEL_FILE_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_slice(&bytes)?;
    let expected_mode = file.hp.mode();
    if file.hp_mode != expected_mode {
        return Err(MagmaError::InvalidArgument(
            "model file hp_mode disagrees with its hyper-parameters".into(),
        ));
    }
    let hyper_posterior = HyperPosterior::new(
        file.grid,
        DVector::from_vec(file.posterior_mean),
        file.posterior_cov.to_matrix()?,
    )?;
    Ok(TrainedModel {
        hp: file.hp,
        prior_mean: file.prior_mean,
        hyper_posterior,
        diagnostics: file.diagnostics,
    })
}

/// One row of a prediction CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub timestamp: f64,
    pub mean: f64,
    pub sd: f64,
    pub ci95_lo: f64,
    pub ci95_hi: f64,
}

/// Write a prediction as CSV: `timestamp,mean,sd,ci95_lo,ci95_hi`.
pub fn write_prediction(pred: &PredictiveDistribution, path: &Path) -> Result<()> {
    let mut out = String::from("timestamp,mean,sd,ci95_lo,ci95_hi\n");
    let sd = pred.sd();
    let ci = pred.ci95();
    for i in 0..pred.timestamps.len() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            pred.timestamps[i], pred.mean[i], sd[i], ci[i].0, ci[i].1
        ));
    }
    fs::write(path, out).map_err(|e| MagmaError::io(path, e))
}

/// Read a prediction CSV written by [`write_prediction`].
pub fn read_prediction(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| MagmaError::io(path, std::io::Error::other(e.to_string())))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or_default();
        if record.len() != 5 {
            return Err(MagmaError::DataFormat {
                line,
                message: format!("expected 5 fields, got {}", record.len()),
            });
        }
        let f = |i: usize| -> Result<f64> {
            record[i].parse().map_err(|_| MagmaError::DataFormat {
                line,
                message: format!("cannot parse '{}'", &record[i]),
            })
        };
        rows.push(PredictionRow {
            timestamp: f(0)?,
            mean: f(1)?,
            sd: f(2)?,
            ci95_lo: f(3)?,
            ci95_hi: f(4)?,
        });
    }
    Ok(rows)
}

/// Prediction-quality report produced by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub n_points: usize,
    pub mse: f64,
    pub ci95_coverage: f64,
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(report)?;
    buf.push(b'\n');
    fs::write(path, buf).map_err(|e| MagmaError::io(path, e))
}

/// Compare a prediction CSV against held-out truth (dataset CSV schema) and
/// score it.
pub fn evaluate_prediction(pred_path: &Path, truth_path: &Path) -> Result<Report> {
    let rows = read_prediction(pred_path)?;
    let truth = load_dataset(truth_path)?;
    let mut n = 0usize;
    let mut sse = 0.0;
    let mut hits = 0usize;
    for series in truth.individuals() {
        for (&t, &y) in series.timestamps().iter().zip(series.outputs()) {
            let key = crate::linalg::time_key(t);
            let row = rows
                .iter()
                .find(|r| crate::linalg::time_key(r.timestamp) == key)
                .ok_or_else(|| {
                    MagmaError::InvalidArgument(format!(
                        "truth timestamp {t} missing from the prediction"
                    ))
                })?;
            sse += (row.mean - y).powi(2);
            hits += usize::from(y >= row.ci95_lo && y <= row.ci95_hi);
            n += 1;
        }
    }
    if n == 0 {
        return Err(MagmaError::InvalidArgument(
            "truth file contains no observations".into(),
        ));
    }
    Ok(Report {
        version: REPORT_FILE_VERSION,
        n_points: n,
        mse: sse / n as f64,
        ci95_coverage: 100.0 * hits as f64 / n as f64,
    })
}

/// Files emitted by `simulate` for one dataset.
pub const SIM_TRAIN_FILE: &str = "train.csv";
pub const SIM_NEW_OBS_FILE: &str = "new_obs.csv";
pub const SIM_NEW_TEST_FILE: &str = "new_test.csv";
pub const SIM_MU0_FILE: &str = "mu0.csv";
pub const SIM_PARAMS_FILE: &str = "params.json";

#[derive(Serialize)]
struct SimParamsFile<'a> {
    version: u32,
    seed: u64,
    gen: &'a crate::simeval::GenParams,
    n_obs: usize,
    n_test: usize,
}

/// Write a simulated dataset into a directory: training CSV, the new
/// individual's observed and test splits, the true mean process, and the
/// generating parameters.
pub fn write_sim_dataset(ds: &SimDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MagmaError::io(dir, e))?;
    save_dataset(ds.training.individuals(), &dir.join(SIM_TRAIN_FILE))?;
    save_dataset(
        std::slice::from_ref(&ds.new_observed()),
        &dir.join(SIM_NEW_OBS_FILE),
    )?;
    let (test_t, test_y) = ds.new_test();
    let test_series = IndividualSeries::new(ds.new_individual.id(), test_t, test_y)?;
    save_dataset(
        std::slice::from_ref(&test_series),
        &dir.join(SIM_NEW_TEST_FILE),
    )?;

    let mu0_path = dir.join(SIM_MU0_FILE);
    let mut file = fs::File::create(&mu0_path).map_err(|e| MagmaError::io(&mu0_path, e))?;
    let mut out = String::from("timestamp,mu0\n");
    for (&t, &v) in ds.working_grid.iter().zip(&ds.mu0) {
        out.push_str(&format!("{t},{v}\n"));
    }
    file.write_all(out.as_bytes())
        .map_err(|e| MagmaError::io(&mu0_path, e))?;

    let params = SimParamsFile {
        version: 1,
        seed: ds.seed,
        gen: &ds.gen,
        n_obs: ds.n_obs,
        n_test: ds.n_test,
    };
    let params_path = dir.join(SIM_PARAMS_FILE);
    let mut buf = serde_json::to_vec_pretty(&params)?;
    buf.push(b'\n');
    fs::write(&params_path, buf).map_err(|e| MagmaError::io(&params_path, e))
}

/// Write per-run benchmark rows as CSV.
pub fn write_benchmark_runs(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::from(
        "seed,magma_mse,magma_coverage,gp_mse,gp_coverage,mu0_mse,em_iterations,error\n",
    );
    for r in &report.runs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.seed,
            r.magma_mse,
            r.magma_coverage,
            r.gp_mse,
            r.gp_coverage,
            r.mu0_mse,
            r.em_iterations,
            r.error.as_deref().unwrap_or("")
        ));
    }
    fs::write(path, out).map_err(|e| MagmaError::io(path, e))
}

/// Write a benchmark aggregate (optionally one per sweep point) as JSON.
pub fn write_benchmark_aggregate<T: Serialize>(payload: &T, path: &Path) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(payload)?;
    buf.push(b'\n');
    fs::write(path, buf).map_err(|e| MagmaError::io(path, e))
}

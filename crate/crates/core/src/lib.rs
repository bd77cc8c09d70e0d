//! Multi-task Gaussian process regression with a shared mean process.
//!
//! Batches of time series are modelled as noisy draws around one common mean
//! process, itself a Gaussian process. An EM algorithm estimates the mean
//! process's hyper-posterior together with the kernel hyper-parameters
//! (shared across individuals or per-individual), and the prediction pipeline
//! turns that hyper-posterior into an informed prior for new, partially
//! observed individuals, so forecasts stay sensible far from their own
//! observations.
//!
//! Modules:
//! - [`kernel`]: covariance functions and their log-parameter gradients
//! - [`linalg`]: jittered Cholesky, pooled grids, zero-scatter operations
//! - [`data`]: observation series, training sets, prior means
//! - [`optim`]: quasi-Newton ascent used by all hyper-parameter fits
//! - [`training`]: the EM algorithm
//! - [`prediction`]: multi-task prediction for a new individual
//! - [`simeval`]: synthetic-data generator, metrics, benchmark harness
//! - [`io`]: CSV/JSON file formats
//! - [`cli`]: the `magma` command-line tool

pub mod cli;
pub mod data;
pub mod error;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod optim;
pub mod prediction;
pub mod simeval;
pub mod training;

pub use data::{IndividualSeries, PriorMean, TrainingSet};
pub use error::{MagmaError, Result};
pub use kernel::{HyperParams, NoiseVariance};
pub use prediction::{predict, PredictConfig, PredictiveDistribution};
pub use training::{train_em, HpMode, TrainedModel, TrainingConfig};

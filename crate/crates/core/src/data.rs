//! Observation series, the pooled training set, and the prior mean.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{MagmaError, Result};
use crate::linalg::{quantize_time, time_key, PooledGrid};

/// One individual's time series: timestamps (strictly increasing after
/// quantization) and the outputs observed there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualSeries {
    id: String,
    timestamps: Vec<f64>,
    outputs: Vec<f64>,
}

impl IndividualSeries {
    /// Build a series; timestamps are quantized and the pairs sorted by time.
    /// Duplicate quantized timestamps are rejected.
    pub fn new(id: impl Into<String>, timestamps: Vec<f64>, outputs: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if timestamps.len() != outputs.len() {
            return Err(MagmaError::DimensionMismatch {
                context: format!("series '{id}': outputs vs timestamps"),
                expected: timestamps.len(),
                got: outputs.len(),
            });
        }
        if timestamps
            .iter()
            .chain(outputs.iter())
            .any(|x| !x.is_finite())
        {
            return Err(MagmaError::InvalidArgument(format!(
                "series '{id}' contains a non-finite value"
            )));
        }
        let mut pairs: Vec<(i64, f64)> = timestamps
            .iter()
            .zip(outputs.iter())
            .map(|(&t, &y)| (time_key(t), y))
            .collect();
        pairs.sort_by_key(|&(k, _)| k);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(MagmaError::InvalidArgument(format!(
                    "series '{id}' has duplicate timestamp {} after quantization",
                    w[0].0 as f64 * crate::linalg::TIME_QUANTUM
                )));
            }
        }
        Ok(Self {
            id,
            timestamps: pairs
                .iter()
                .map(|&(k, _)| k as f64 * crate::linalg::TIME_QUANTUM)
                .collect(),
            outputs: pairs.into_iter().map(|(_, y)| y).collect(),
        })
    }

    /// A series with no observations (used for mean-only prediction).
    pub fn empty(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            timestamps: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn outputs_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.outputs)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// The first `n` observations.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            id: self.id.clone(),
            timestamps: self.timestamps[..n].to_vec(),
            outputs: self.outputs[..n].to_vec(),
        }
    }

    /// The last `n` observations.
    pub fn suffix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let start = self.len() - n;
        Self {
            id: self.id.clone(),
            timestamps: self.timestamps[start..].to_vec(),
            outputs: self.outputs[start..].to_vec(),
        }
    }
}

/// A set of individuals together with their pooled grid.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    individuals: Vec<IndividualSeries>,
    pooled: PooledGrid,
}

impl TrainingSet {
    pub fn new(individuals: Vec<IndividualSeries>) -> Result<Self> {
        let grids: Vec<&[f64]> = individuals.iter().map(|s| s.timestamps()).collect();
        let pooled = PooledGrid::from_grids(&grids)?;
        Ok(Self {
            individuals,
            pooled,
        })
    }

    /// A set with no individuals; training rejects it but the prediction
    /// pipeline accepts it for the single-task reduction.
    pub fn empty() -> Self {
        Self {
            individuals: Vec::new(),
            pooled: PooledGrid::from_grids(&[]).expect("empty grid"),
        }
    }

    pub fn individuals(&self) -> &[IndividualSeries] {
        &self.individuals
    }

    pub fn pooled(&self) -> &PooledGrid {
        &self.pooled
    }

    /// Number of individuals.
    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }
}

/// Prior mean of the shared process: a constant, or a function tabulated on
/// a grid (linearly interpolated, clamped outside its range).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PriorMean {
    Constant(f64),
    Tabulated {
        timestamps: Vec<f64>,
        values: Vec<f64>,
    },
}

impl Default for PriorMean {
    fn default() -> Self {
        PriorMean::Constant(0.0)
    }
}

impl PriorMean {
    pub fn constant(c: f64) -> Result<Self> {
        if !c.is_finite() {
            return Err(MagmaError::InvalidArgument(
                "constant prior mean must be finite".into(),
            ));
        }
        Ok(PriorMean::Constant(c))
    }

    pub fn tabulated(timestamps: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(MagmaError::DimensionMismatch {
                context: "tabulated prior mean".into(),
                expected: timestamps.len(),
                got: values.len(),
            });
        }
        if timestamps.is_empty() {
            return Err(MagmaError::InvalidArgument(
                "tabulated prior mean needs at least one point".into(),
            ));
        }
        if timestamps
            .iter()
            .chain(values.iter())
            .any(|x| !x.is_finite())
        {
            return Err(MagmaError::InvalidArgument(
                "tabulated prior mean contains a non-finite value".into(),
            ));
        }
        let mut pairs: Vec<(f64, f64)> = timestamps
            .into_iter()
            .map(quantize_time)
            .zip(values)
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            if time_key(w[0].0) == time_key(w[1].0) {
                return Err(MagmaError::InvalidArgument(format!(
                    "tabulated prior mean has duplicate timestamp {}",
                    w[0].0
                )));
            }
        }
        Ok(PriorMean::Tabulated {
            timestamps: pairs.iter().map(|p| p.0).collect(),
            values: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        match self {
            PriorMean::Constant(c) => *c,
            PriorMean::Tabulated { timestamps, values } => {
                let t = quantize_time(t);
                match timestamps.binary_search_by(|x| x.total_cmp(&t)) {
                    Ok(i) => values[i],
                    Err(0) => values[0],
                    Err(i) if i == timestamps.len() => values[values.len() - 1],
                    Err(i) => {
                        let (t0, t1) = (timestamps[i - 1], timestamps[i]);
                        let w = (t - t0) / (t1 - t0);
                        values[i - 1] * (1.0 - w) + values[i] * w
                    }
                }
            }
        }
    }

    pub fn evaluate_on(&self, grid: &[f64]) -> DVector<f64> {
        DVector::from_iterator(grid.len(), grid.iter().map(|&t| self.evaluate(t)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_sorts_and_quantizes() {
        let s = IndividualSeries::new("a", vec![2.0, 0.5, 1.0], vec![20.0, 5.0, 10.0]).unwrap();
        assert_eq!(s.timestamps(), &[0.5, 1.0, 2.0]);
        assert_eq!(s.outputs(), &[5.0, 10.0, 20.0]);
    }

    #[test]
    fn series_rejects_duplicates_after_quantization() {
        let r = IndividualSeries::new("a", vec![1.0, 1.0000003], vec![0.0, 1.0]);
        assert!(r.is_err());
    }

    #[test]
    fn series_rejects_non_finite() {
        assert!(IndividualSeries::new("a", vec![f64::NAN], vec![0.0]).is_err());
        assert!(IndividualSeries::new("a", vec![0.0], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn series_rejects_length_mismatch() {
        assert!(IndividualSeries::new("a", vec![0.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn training_set_pools_timestamps() {
        let a = IndividualSeries::new("a", vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        let b = IndividualSeries::new("b", vec![1.0, 2.0], vec![2.0, 3.0]).unwrap();
        let set = TrainingSet::new(vec![a, b]).unwrap();
        assert_eq!(set.pooled().timestamps(), &[0.0, 1.0, 2.0]);
        assert_eq!(set.pooled().index_map(1), &[1, 2]);
    }

    #[test]
    fn prior_mean_constant_and_interpolation() {
        let c = PriorMean::constant(3.0).unwrap();
        assert_eq!(c.evaluate(123.0), 3.0);

        let t = PriorMean::tabulated(vec![0.0, 2.0], vec![0.0, 4.0]).unwrap();
        assert_eq!(t.evaluate(0.0), 0.0);
        assert_eq!(t.evaluate(1.0), 2.0);
        assert_eq!(t.evaluate(2.0), 4.0);
        // clamped outside the table
        assert_eq!(t.evaluate(-5.0), 0.0);
        assert_eq!(t.evaluate(9.0), 4.0);
    }

    #[test]
    fn prefix_suffix_split() {
        let s =
            IndividualSeries::new("a", vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.prefix(2).timestamps(), &[0.0, 1.0]);
        assert_eq!(s.suffix(2).outputs(), &[3.0, 4.0]);
    }
}

//! Positive-definite linear algebra and the pooled-grid scatter machinery.
//!
//! Every matrix inverse in the model goes through [`chol_psd`], a Cholesky
//! factorization with an escalating jitter policy: the plain factorization is
//! attempted first and jitter is only added when it fails, starting at
//! `1e-8 * mean(diag)` and growing tenfold per retry up to `1e-2 * mean(diag)`,
//! after which a [`MagmaError::SingularMatrix`] names the matrix's role.
//!
//! Timestamps are quantized to [`TIME_QUANTUM`] before grids are pooled, so
//! floating-point near-duplicates across individuals merge into one grid
//! point.

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MagmaError, Result};

/// Resolution to which input timestamps are rounded.
pub const TIME_QUANTUM: f64 = 1e-6;

/// Integer key identifying a quantized timestamp.
pub fn time_key(t: f64) -> i64 {
    (t / TIME_QUANTUM).round() as i64
}

/// Canonical quantized value of a timestamp.
pub fn quantize_time(t: f64) -> f64 {
    time_key(t) as f64 * TIME_QUANTUM
}

/// The union grid of several individuals' timestamps, with the position of
/// each individual's timestamps inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledGrid {
    timestamps: Vec<f64>,
    keys: Vec<i64>,
    index_maps: Vec<Vec<usize>>,
}

impl PooledGrid {
    /// Pool the given grids. Each input grid must be strictly increasing
    /// after quantization; the union is strictly increasing by construction.
    pub fn from_grids(grids: &[&[f64]]) -> Result<Self> {
        let mut key_set: BTreeSet<i64> = BTreeSet::new();
        for g in grids {
            for &t in *g {
                if !t.is_finite() {
                    return Err(MagmaError::InvalidArgument(
                        "non-finite timestamp in grid".into(),
                    ));
                }
                key_set.insert(time_key(t));
            }
        }
        let keys: Vec<i64> = key_set.into_iter().collect();
        let timestamps: Vec<f64> = keys.iter().map(|&k| k as f64 * TIME_QUANTUM).collect();
        let mut index_maps = Vec::with_capacity(grids.len());
        for g in grids {
            let mut map = Vec::with_capacity(g.len());
            let mut prev: Option<usize> = None;
            for &t in *g {
                let pos = keys
                    .binary_search(&time_key(t))
                    .expect("pooled grid contains every input timestamp");
                if prev.is_some_and(|p| pos <= p) {
                    return Err(MagmaError::InvalidArgument(
                        "individual grid not strictly increasing after quantization".into(),
                    ));
                }
                prev = Some(pos);
                map.push(pos);
            }
            index_maps.push(map);
        }
        Ok(Self {
            timestamps,
            keys,
            index_maps,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn n_individuals(&self) -> usize {
        self.index_maps.len()
    }

    /// Positions of individual `i`'s timestamps inside the pooled grid.
    pub fn index_map(&self, i: usize) -> &[usize] {
        &self.index_maps[i]
    }

    /// Position of a timestamp in the pooled grid, if present.
    pub fn position_of(&self, t: f64) -> Option<usize> {
        self.keys.binary_search(&time_key(t)).ok()
    }
}

const JITTER_BASE_REL: f64 = 1e-8;
const JITTER_MAX_REL: f64 = 1e-2;

/// Lower-triangular Cholesky factor of `m + jitter * I`.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

/// Factorize a symmetric positive-definite matrix, escalating jitter on
/// failure. `role` names the matrix in error messages and diagnostics.
pub fn chol_psd(m: &DMatrix<f64>, role: &str) -> Result<PsdFactor> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(MagmaError::DimensionMismatch {
            context: format!("chol_psd({role})"),
            expected: n,
            got: m.ncols(),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(MagmaError::InvalidArgument(format!(
            "matrix for {role} has non-finite entries"
        )));
    }
    let scale = m.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                return Err(MagmaError::InvalidArgument(format!(
                    "matrix for {role} is not symmetric"
                )));
            }
        }
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(PsdFactor { chol, jitter: 0.0 });
    }
    let mean_diag = m.diagonal().sum() / n.max(1) as f64;
    if mean_diag > 0.0 && mean_diag.is_finite() {
        let mut rel = JITTER_BASE_REL;
        while rel <= JITTER_MAX_REL * (1.0 + 1e-12) {
            let jitter = rel * mean_diag;
            let mut mj = m.clone();
            for i in 0..n {
                mj[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(mj) {
                return Ok(PsdFactor { chol, jitter });
            }
            rel *= 10.0;
        }
    }
    Err(MagmaError::SingularMatrix {
        role: role.to_string(),
        max_jitter: JITTER_MAX_REL * mean_diag.max(0.0),
    })
}

impl PsdFactor {
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Jitter added to the diagonal before factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Solve `(m + jitter I) x = b` for a vector right-hand side.
    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim() {
            return Err(MagmaError::DimensionMismatch {
                context: "PsdFactor::solve_vec".into(),
                expected: self.dim(),
                got: b.len(),
            });
        }
        Ok(self.chol.solve(b))
    }

    /// Solve `(m + jitter I) X = B` column-wise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(MagmaError::DimensionMismatch {
                context: "PsdFactor::solve_mat".into(),
                expected: self.dim(),
                got: b.nrows(),
            });
        }
        Ok(self.chol.solve(b))
    }

    /// Log-determinant of `m + jitter I`, `2 * sum(log diag L)`.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Symmetrized inverse of `m + jitter I`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        symmetrize(inv)
    }

    /// Lower-triangular factor (owned copy with zeroed upper part).
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Force exact symmetry by averaging with the transpose.
pub fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

fn check_map(index_map: &[usize], sub_len: usize, target_size: usize, what: &str) -> Result<()> {
    if index_map.len() != sub_len {
        return Err(MagmaError::DimensionMismatch {
            context: format!("{what}: index map"),
            expected: sub_len,
            got: index_map.len(),
        });
    }
    if let Some(&bad) = index_map.iter().find(|&&i| i >= target_size) {
        return Err(MagmaError::InvalidArgument(format!(
            "{what}: index {bad} out of range for target size {target_size}"
        )));
    }
    Ok(())
}

/// Scatter a sub-grid precision matrix into an `N x N` matrix that is zero
/// outside the mapped rows and columns.
pub fn scatter_precision(
    sub_precision: &DMatrix<f64>,
    index_map: &[usize],
    target_size: usize,
) -> Result<DMatrix<f64>> {
    let n = sub_precision.nrows();
    if sub_precision.ncols() != n {
        return Err(MagmaError::DimensionMismatch {
            context: "scatter_precision: square input".into(),
            expected: n,
            got: sub_precision.ncols(),
        });
    }
    check_map(index_map, n, target_size, "scatter_precision")?;
    let mut out = DMatrix::zeros(target_size, target_size);
    for (a, &i) in index_map.iter().enumerate() {
        for (b, &j) in index_map.iter().enumerate() {
            out[(i, j)] = sub_precision[(a, b)];
        }
    }
    Ok(out)
}

/// Scatter a sub-grid vector into an `N`-vector, zero at unmapped entries.
pub fn scatter_vector(
    sub_vector: &DVector<f64>,
    index_map: &[usize],
    target_size: usize,
) -> Result<DVector<f64>> {
    check_map(index_map, sub_vector.len(), target_size, "scatter_vector")?;
    let mut out = DVector::zeros(target_size);
    for (a, &i) in index_map.iter().enumerate() {
        out[i] = sub_vector[a];
    }
    Ok(out)
}

/// Sub-matrix at the given row and column positions.
pub fn gather_matrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| m[(rows[a], cols[b])])
}

/// Sub-vector at the given positions.
pub fn gather_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |a, _| v[idx[a]])
}

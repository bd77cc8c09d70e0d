//! Shared test oracles: brute-force Gaussian conditioning, finite
//! differences, and controlled random instances.
//!
//! The oracles deliberately avoid the library's factorization path: joints
//! are assembled explicitly and inverted with nalgebra's LU-based
//! `try_inverse`, so agreement with the scatter/precision implementation is
//! a genuine two-route check.

#![allow(dead_code)]

use magma::data::{IndividualSeries, PriorMean, TrainingSet};
use magma::kernel::{cov_matrix, psi_matrix, HyperParams, NoiseVariance};
use magma::training::{HpMode, IndivHp, ModelHp, NamedHp};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Relative Frobenius distance.
pub fn rel_err_mat(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).norm() / want.norm().max(1e-12)
}

pub fn rel_err_vec(got: &DVector<f64>, want: &DVector<f64>) -> f64 {
    (got - want).norm() / want.norm().max(1e-12)
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Central finite differences of a scalar function.
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    (0..x.len())
        .map(|p| {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[p] += h;
            lo[p] -= h;
            (f(&hi) - f(&lo)) / (2.0 * h)
        })
        .collect()
}

/// Component-wise gradient agreement at relative tolerance with a small
/// absolute floor for components that are genuinely zero.
pub fn assert_grad_close(analytic: &[f64], fd: &[f64], rel: f64, context: &str) {
    assert_eq!(analytic.len(), fd.len(), "{context}: gradient lengths");
    for (p, (&a, &b)) in analytic.iter().zip(fd).enumerate() {
        let tol = rel * a.abs().max(b.abs()) + 1e-6;
        assert!(
            (a - b).abs() <= tol,
            "{context}: component {p}: analytic {a} vs finite-difference {b}"
        );
    }
}

/// A Gaussian over `(mu0(tau), y_1, ..., y_M)` assembled explicitly.
pub struct JointOracle {
    pub mean_z: DVector<f64>,
    pub cov_zz: DMatrix<f64>,
    pub cov_zy: DMatrix<f64>,
    pub cov_yy: DMatrix<f64>,
    pub mean_y: DVector<f64>,
    pub y: DVector<f64>,
}

impl JointOracle {
    /// Build the joint for individuals observed at `obs[i] = (timestamps,
    /// outputs, theta_i, noise_i)`; only timestamps are used that the caller
    /// already restricted to `tau` semantics.
    pub fn build(
        tau: &[f64],
        theta0: &HyperParams,
        prior_mean: &PriorMean,
        obs: &[(Vec<f64>, Vec<f64>, HyperParams, NoiseVariance)],
    ) -> Self {
        let mean_z = prior_mean.evaluate_on(tau);
        let cov_zz = cov_matrix(tau, tau, theta0).unwrap();
        let q: usize = obs.iter().map(|o| o.0.len()).sum();
        let mut mean_y = DVector::zeros(q);
        let mut y = DVector::zeros(q);
        let mut cov_zy = DMatrix::zeros(tau.len(), q);
        let mut cov_yy = DMatrix::zeros(q, q);
        let mut off_i = 0;
        for (ti, yi, th_i, nv_i) in obs {
            let m0_i = prior_mean.evaluate_on(ti);
            for a in 0..ti.len() {
                mean_y[off_i + a] = m0_i[a];
                y[off_i + a] = yi[a];
            }
            let kz = cov_matrix(tau, ti, theta0).unwrap();
            for r in 0..tau.len() {
                for a in 0..ti.len() {
                    cov_zy[(r, off_i + a)] = kz[(r, a)];
                }
            }
            let mut off_j = 0;
            for (tj, _, _, _) in obs {
                let mut block = cov_matrix(ti, tj, theta0).unwrap();
                if off_i == off_j {
                    block += psi_matrix(ti, th_i, nv_i).unwrap();
                }
                for a in 0..ti.len() {
                    for b in 0..tj.len() {
                        cov_yy[(off_i + a, off_j + b)] = block[(a, b)];
                    }
                }
                off_j += tj.len();
            }
            off_i += ti.len();
        }
        Self {
            mean_z,
            cov_zz,
            cov_zy,
            cov_yy,
            mean_y,
            y,
        }
    }

    /// Condition `mu0(tau)` on the stacked observations.
    pub fn condition(&self) -> (DVector<f64>, DMatrix<f64>) {
        let inv = self
            .cov_yy
            .clone()
            .try_inverse()
            .expect("oracle joint covariance invertible");
        let gain = &self.cov_zy * inv;
        let mean = &self.mean_z + &gain * (&self.y - &self.mean_y);
        let cov = &self.cov_zz - gain * self.cov_zy.transpose();
        (mean, cov)
    }
}

/// Generic Gaussian conditioning by explicit Schur complement: condition the
/// first block (rows `p_idx`) on the second (rows `s_idx`) observed at `y_s`.
pub fn schur_condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    p_idx: &[usize],
    s_idx: &[usize],
    y_s: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let take_v = |idx: &[usize]| DVector::from_fn(idx.len(), |a, _| mean[idx[a]]);
    let take_m = |ra: &[usize], ca: &[usize]| {
        DMatrix::from_fn(ra.len(), ca.len(), |a, b| cov[(ra[a], ca[b])])
    };
    let c_ss = take_m(s_idx, s_idx);
    let inv = c_ss.try_inverse().expect("schur oracle block invertible");
    let c_ps = take_m(p_idx, s_idx);
    let mean_p = take_v(p_idx) + &c_ps * &inv * (y_s - take_v(s_idx));
    let cov_p = take_m(p_idx, p_idx) - &c_ps * inv * c_ps.transpose();
    (mean_p, cov_p)
}

/// Hyper-parameters drawn in a well-conditioned band.
pub fn draw_mild_hp(rng: &mut ChaCha8Rng) -> (HyperParams, NoiseVariance) {
    let v = rng.random_range(0.6..1.8);
    let ell = rng.random_range(0.4..1.2);
    let s2 = rng.random_range(0.05..0.6);
    (
        HyperParams::from_natural(v, ell).unwrap(),
        NoiseVariance::from_natural(s2).unwrap(),
    )
}

/// Strictly increasing grid with spacing at least 0.4, so the kernel Gram
/// matrices stay far from singular.
pub fn spaced_grid(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut t = rng.random_range(0.0..0.5);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(t);
        t += 0.4 + rng.random_range(0.0..0.6);
    }
    out
}

/// A random small instance: training set (mixed common/uncommon grid),
/// per-individual mild hyper-parameters, and a constant prior mean. The
/// prior covariance on the pooled grid is kept well-conditioned so oracle
/// comparisons at 1e-8 are meaningful.
pub struct SmallInstance {
    pub data: TrainingSet,
    pub hp: ModelHp,
    pub prior_mean: PriorMean,
}

pub fn random_instance(rng: &mut ChaCha8Rng, mode: HpMode) -> SmallInstance {
    loop {
        let n = rng.random_range(4..=12usize);
        let m = rng.random_range(1..=5usize);
        let candidate = spaced_grid(rng, n);
        let common_grid = rng.random_bool(0.5);
        let (theta0, _) = draw_mild_hp(rng);

        let mut individuals = Vec::with_capacity(m);
        let mut named = Vec::with_capacity(m);
        let shared = draw_mild_hp(rng);
        for i in 0..m {
            let t: Vec<f64> = if common_grid {
                candidate.clone()
            } else {
                let k = rng.random_range(1..=n);
                let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
                idx.sort_unstable();
                idx.iter().map(|&j| candidate[j]).collect()
            };
            let y: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
            individuals.push(IndividualSeries::new(format!("ind_{i:02}"), t, y).unwrap());
            let hp_i = if mode == HpMode::Different {
                draw_mild_hp(rng)
            } else {
                shared
            };
            named.push(NamedHp {
                id: format!("ind_{i:02}"),
                theta: hp_i.0,
                noise: hp_i.1,
            });
        }
        let data = TrainingSet::new(individuals).unwrap();
        let k0 = cov_matrix(
            data.pooled().timestamps(),
            data.pooled().timestamps(),
            &theta0,
        )
        .unwrap();
        if condition_number(&k0) > 1e7 {
            continue;
        }
        let indiv = match mode {
            HpMode::Common => IndivHp::Common {
                theta: shared.0,
                noise: shared.1,
            },
            HpMode::Different => IndivHp::Different(named),
        };
        let prior_mean = PriorMean::Constant(rng.random_range(-1.5..1.5));
        return SmallInstance {
            data,
            hp: ModelHp { theta0, indiv },
            prior_mean,
        };
    }
}

/// Observation tuples `(t_i, y_i, theta_i, noise_i)` for the joint oracle,
/// restricted to timestamps present in `tau`.
pub fn oracle_obs(
    instance: &SmallInstance,
    tau: &[f64],
) -> Vec<(Vec<f64>, Vec<f64>, HyperParams, NoiseVariance)> {
    let keys: Vec<i64> = tau.iter().map(|&t| magma::linalg::time_key(t)).collect();
    instance
        .data
        .individuals()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (theta, noise) = instance.hp.for_individual(i);
            let mut t = Vec::new();
            let mut y = Vec::new();
            for (&ti, &yi) in s.timestamps().iter().zip(s.outputs()) {
                if keys.binary_search(&magma::linalg::time_key(ti)).is_ok() {
                    t.push(ti);
                    y.push(yi);
                }
            }
            (t, y, *theta, *noise)
        })
        .filter(|(t, _, _, _)| !t.is_empty())
        .collect()
}

//! Covariance functions, covariance-matrix construction, and analytic
//! gradients with respect to log-scale hyper-parameters.
//!
//! Hyper-parameters are stored as logarithms so the natural amplitude,
//! length-scale and noise variance are positive by construction and the
//! optimizer can work unconstrained. All gradients returned here are taken
//! with respect to the log-parameters (chain rule already applied).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MagmaError, Result};

/// Kernel hyper-parameters `{v, ell}` in log-space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Log of the amplitude `v`.
    pub log_v: f64,
    /// Log of the length-scale `ell`, in input units.
    pub log_ell: f64,
}

impl HyperParams {
    pub fn new(log_v: f64, log_ell: f64) -> Self {
        Self { log_v, log_ell }
    }

    /// Build from natural-scale amplitude and length-scale.
    pub fn from_natural(v: f64, ell: f64) -> Result<Self> {
        if !(v > 0.0 && v.is_finite() && ell > 0.0 && ell.is_finite()) {
            return Err(MagmaError::InvalidArgument(format!(
                "amplitude and length-scale must be positive and finite, got v={v}, ell={ell}"
            )));
        }
        Ok(Self {
            log_v: v.ln(),
            log_ell: ell.ln(),
        })
    }

    pub fn amplitude(&self) -> f64 {
        self.log_v.exp()
    }

    pub fn length_scale(&self) -> f64 {
        self.log_ell.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.log_v.is_finite() && self.log_ell.is_finite()
    }
}

/// Observation-noise variance `sigma^2` in log-space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseVariance {
    pub log_sigma2: f64,
}

impl NoiseVariance {
    pub fn new(log_sigma2: f64) -> Self {
        Self { log_sigma2 }
    }

    pub fn from_natural(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(MagmaError::InvalidArgument(format!(
                "noise variance must be positive and finite, got {sigma2}"
            )));
        }
        Ok(Self {
            log_sigma2: sigma2.ln(),
        })
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.log_sigma2.is_finite()
    }
}

/// A stationary covariance function with derivatives in log-parameter space.
///
/// Only the exponentiated quadratic is provided, but the covariance-matrix
/// builders below are written against this trait so other stationary kernels
/// can slot in later.
pub trait Kernel {
    fn value(&self, x: f64, y: f64) -> f64;
    fn n_params(&self) -> usize;
    /// Derivative of `value` with respect to the p-th log-parameter.
    fn grad(&self, x: f64, y: f64, p: usize) -> f64;
}

/// Exponentiated quadratic kernel, `v^2 * exp(-(x - y)^2 / (2 ell^2))`.
#[derive(Debug, Clone, Copy)]
pub struct ExponentiatedQuadratic {
    v2: f64,
    inv_2ell2: f64,
    inv_ell2: f64,
}

impl ExponentiatedQuadratic {
    pub fn new(hp: &HyperParams) -> Self {
        let v2 = (2.0 * hp.log_v).exp();
        let ell2 = (2.0 * hp.log_ell).exp();
        Self {
            v2,
            inv_2ell2: 0.5 / ell2,
            inv_ell2: 1.0 / ell2,
        }
    }
}

impl Kernel for ExponentiatedQuadratic {
    fn value(&self, x: f64, y: f64) -> f64 {
        let d = x - y;
        // Distance-0 shortcut keeps the diagonal exact at extreme length-scales.
        if d == 0.0 {
            return self.v2;
        }
        self.v2 * (-d * d * self.inv_2ell2).exp()
    }

    fn n_params(&self) -> usize {
        2
    }

    fn grad(&self, x: f64, y: f64, p: usize) -> f64 {
        match p {
            0 => 2.0 * self.value(x, y),
            1 => {
                let d = x - y;
                if d == 0.0 {
                    0.0
                } else {
                    self.value(x, y) * d * d * self.inv_ell2
                }
            }
            _ => panic!("exponentiated quadratic has 2 parameters, asked for {p}"),
        }
    }
}

fn check_finite_grid(grid: &[f64], what: &str) -> Result<()> {
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(MagmaError::InvalidArgument(format!(
            "{what} contains a non-finite timestamp"
        )));
    }
    Ok(())
}

fn check_hp(hp: &HyperParams) -> Result<()> {
    if !hp.is_finite() {
        return Err(MagmaError::InvalidArgument(
            "kernel hyper-parameters must be finite".into(),
        ));
    }
    Ok(())
}

/// Exponentiated quadratic covariance between two inputs.
pub fn eq_kernel(x: f64, x2: f64, hp: &HyperParams) -> Result<f64> {
    if !x.is_finite() || !x2.is_finite() {
        return Err(MagmaError::InvalidArgument(format!(
            "kernel inputs must be finite, got ({x}, {x2})"
        )));
    }
    check_hp(hp)?;
    Ok(ExponentiatedQuadratic::new(hp).value(x, x2))
}

/// Covariance matrix between two grids; element `(j, k)` covaries
/// `grid_a[j]` with `grid_b[k]`. Either grid may be empty.
pub fn cov_matrix(grid_a: &[f64], grid_b: &[f64], hp: &HyperParams) -> Result<DMatrix<f64>> {
    check_finite_grid(grid_a, "grid_a")?;
    check_finite_grid(grid_b, "grid_b")?;
    check_hp(hp)?;
    let k = ExponentiatedQuadratic::new(hp);
    Ok(DMatrix::from_fn(grid_a.len(), grid_b.len(), |i, j| {
        k.value(grid_a[i], grid_b[j])
    }))
}

/// Individual covariance `Sigma + sigma^2 I` on a square grid.
pub fn psi_matrix(grid: &[f64], hp: &HyperParams, noise: &NoiseVariance) -> Result<DMatrix<f64>> {
    if !noise.is_finite() {
        return Err(MagmaError::InvalidArgument(
            "noise variance must be finite".into(),
        ));
    }
    let mut m = cov_matrix(grid, grid, hp)?;
    let s2 = noise.sigma2();
    for i in 0..grid.len() {
        m[(i, i)] += s2;
    }
    Ok(m)
}

/// Gradient matrices of the covariance on a square grid, one per
/// log-parameter: `d/d log_v`, `d/d log_ell`, and `d/d log_sigma2` when a
/// noise term is supplied.
pub fn cov_matrix_grad(
    grid: &[f64],
    hp: &HyperParams,
    noise: Option<&NoiseVariance>,
) -> Result<Vec<DMatrix<f64>>> {
    check_finite_grid(grid, "grid")?;
    check_hp(hp)?;
    let k = ExponentiatedQuadratic::new(hp);
    let n = grid.len();
    let mut out = Vec::with_capacity(2 + noise.is_some() as usize);
    for p in 0..k.n_params() {
        out.push(DMatrix::from_fn(n, n, |i, j| k.grad(grid[i], grid[j], p)));
    }
    if let Some(nv) = noise {
        if !nv.is_finite() {
            return Err(MagmaError::InvalidArgument(
                "noise variance must be finite".into(),
            ));
        }
        out.push(DMatrix::from_diagonal_element(n, n, nv.sigma2()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hp(v: f64, ell: f64) -> HyperParams {
        HyperParams::from_natural(v, ell).unwrap()
    }

    #[test]
    fn kernel_at_zero_distance_is_v_squared() {
        let k = eq_kernel(0.0, 0.0, &hp(2.0, 1.0)).unwrap();
        assert_relative_eq!(k, 4.0, max_relative = 1e-14);
    }

    #[test]
    fn kernel_direct_substitution() {
        let k = eq_kernel(0.0, 2f64.sqrt(), &hp(1.0, 1.0)).unwrap();
        assert_relative_eq!(k, (-1f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn kernel_is_symmetric_in_inputs() {
        let h = hp(1.7, 0.8);
        assert_eq!(
            eq_kernel(1.3, 2.7, &h).unwrap(),
            eq_kernel(2.7, 1.3, &h).unwrap()
        );
    }

    #[test]
    fn kernel_rejects_non_finite_inputs() {
        assert!(eq_kernel(f64::NAN, 0.0, &hp(1.0, 1.0)).is_err());
        assert!(eq_kernel(0.0, f64::INFINITY, &hp(1.0, 1.0)).is_err());
        assert!(eq_kernel(0.0, 0.0, &HyperParams::new(f64::NAN, 0.0)).is_err());
    }

    #[test]
    fn cov_matrix_single_point() {
        let m = cov_matrix(&[3.2], &[3.2], &hp(2.0, 0.7)).unwrap();
        assert_eq!(m.nrows(), 1);
        assert_relative_eq!(m[(0, 0)], 4.0, max_relative = 1e-14);
    }

    #[test]
    fn cov_matrix_two_points() {
        let g = [0.0, 2f64.sqrt()];
        let m = cov_matrix(&g, &g, &hp(1.0, 1.0)).unwrap();
        let e = (-1f64).exp();
        assert_relative_eq!(m[(0, 0)], 1.0, max_relative = 1e-14);
        assert_relative_eq!(m[(1, 1)], 1.0, max_relative = 1e-14);
        assert_relative_eq!(m[(0, 1)], e, max_relative = 1e-14);
        assert_relative_eq!(m[(1, 0)], e, max_relative = 1e-14);
    }

    #[test]
    fn cov_matrix_empty_grid_is_zero_by_zero() {
        let m = cov_matrix(&[], &[], &hp(1.0, 1.0)).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (0, 0));
    }

    #[test]
    fn cov_matrix_is_psd_on_random_grid() {
        // eigen-decomposition oracle on a random 10-point grid
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let grid: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..10.0)).collect();
            let h = hp(rng.random_range(0.5..3.0), rng.random_range(0.3..2.0));
            let m = cov_matrix(&grid, &grid, &h).unwrap();
            let v2 = h.amplitude().powi(2);
            let eig = SymmetricEigen::new(m);
            let min = eig.eigenvalues.min();
            assert!(min >= -1e-10 * v2, "min eigenvalue {min} below tolerance");
        }
    }

    #[test]
    fn psi_matrix_without_noise_equals_cov() {
        // sigma^2 cannot be exactly 0 in log-space; an astronomically small
        // value leaves the matrix bit-identical after the addition
        let g = [0.0, 1.0, 2.5];
        let h = hp(1.3, 0.9);
        let psi = psi_matrix(&g, &h, &NoiseVariance::new(-500.0)).unwrap();
        let cov = cov_matrix(&g, &g, &h).unwrap();
        assert_eq!(psi, cov);
    }

    #[test]
    fn psi_matrix_hand_example() {
        let g = [0.0, 2f64.sqrt()];
        let psi = psi_matrix(
            &g,
            &hp(1.0, 1.0),
            &NoiseVariance::from_natural(0.25).unwrap(),
        )
        .unwrap();
        let e = (-1f64).exp();
        assert_relative_eq!(psi[(0, 0)], 1.25, max_relative = 1e-14);
        assert_relative_eq!(psi[(1, 1)], 1.25, max_relative = 1e-14);
        assert_relative_eq!(psi[(0, 1)], e, max_relative = 1e-14);
    }

    #[test]
    fn psi_diagonal_is_amplitude_plus_noise() {
        let g = [0.3, 1.1, 4.0, 9.2];
        let h = hp(1.6, 2.0);
        let nv = NoiseVariance::from_natural(0.4).unwrap();
        let psi = psi_matrix(&g, &h, &nv).unwrap();
        for i in 0..g.len() {
            assert_relative_eq!(
                psi[(i, i)],
                h.amplitude().powi(2) + nv.sigma2(),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn psi_is_exactly_cov_plus_noise_diagonal() {
        let g = [0.0, 0.7, 1.9, 3.3, 8.8];
        let h = hp(2.1, 1.4);
        let nv = NoiseVariance::from_natural(0.31).unwrap();
        let psi = psi_matrix(&g, &h, &nv).unwrap();
        let mut expect = cov_matrix(&g, &g, &h).unwrap();
        for i in 0..g.len() {
            expect[(i, i)] += nv.sigma2();
        }
        assert_eq!(psi, expect);
    }

    #[test]
    fn grad_log_v_at_zero_distance() {
        let grads = cov_matrix_grad(&[1.0], &hp(1.0, 1.0), None).unwrap();
        assert_relative_eq!(grads[0][(0, 0)], 2.0, max_relative = 1e-14);
    }

    #[test]
    fn grad_log_ell_diagonal_is_zero() {
        let grads = cov_matrix_grad(&[0.0, 1.0, 2.0], &hp(1.5, 0.8), None).unwrap();
        for i in 0..3 {
            assert_eq!(grads[1][(i, i)], 0.0);
        }
    }

    /// Central finite differences of every gradient matrix entry.
    #[test]
    fn grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..10 {
            let n = rng.random_range(2..=20usize);
            let grid: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let log_v = rng.random_range(-1.0..1.0);
            let log_ell = rng.random_range(-1.0..1.0);
            let log_s2 = rng.random_range(-2.0..0.0);
            let base = HyperParams::new(log_v, log_ell);
            let noise = NoiseVariance::new(log_s2);
            let grads = cov_matrix_grad(&grid, &base, Some(&noise)).unwrap();

            let mats = |lv: f64, le: f64, ls: f64| {
                psi_matrix(&grid, &HyperParams::new(lv, le), &NoiseVariance::new(ls)).unwrap()
            };
            let fd = [
                (mats(log_v + h, log_ell, log_s2) - mats(log_v - h, log_ell, log_s2)) / (2.0 * h),
                (mats(log_v, log_ell + h, log_s2) - mats(log_v, log_ell - h, log_s2)) / (2.0 * h),
                (mats(log_v, log_ell, log_s2 + h) - mats(log_v, log_ell, log_s2 - h)) / (2.0 * h),
            ];
            for (g, f) in grads.iter().zip(fd.iter()) {
                let rel = (g - f).norm() / f.norm().max(1e-12);
                assert!(rel < 1e-5, "gradient mismatch: relative error {rel}");
            }
        }
    }

    proptest! {
        /// Exact symmetry of the square covariance matrix.
        #[test]
        fn square_cov_is_exactly_symmetric(
            raw in proptest::collection::vec(-40i64..40_000_000, 2..12),
            lv in -2.0..2.0f64,
            le in -2.0..2.0f64,
        ) {
            let grid: Vec<f64> = raw.iter().map(|&i| i as f64 * 1e-6).collect();
            let m = cov_matrix(&grid, &grid, &HyperParams::new(lv, le)).unwrap();
            prop_assert_eq!(m.transpose(), m);
        }

        /// Translation invariance on a dyadic lattice where the shifted
        /// inputs are exactly representable.
        #[test]
        fn translation_invariance_exact(
            xi in -(1i64 << 22)..(1i64 << 22),
            yi in -(1i64 << 22)..(1i64 << 22),
            ci in -(1i64 << 22)..(1i64 << 22),
            lv in -1.0..1.0f64,
            le in -1.0..1.0f64,
        ) {
            let s = 1.0 / (1u64 << 20) as f64;
            let (x, y, c) = (xi as f64 * s, yi as f64 * s, ci as f64 * s);
            let h = HyperParams::new(lv, le);
            prop_assert_eq!(
                eq_kernel(x + c, y + c, &h).unwrap(),
                eq_kernel(x, y, &h).unwrap()
            );
        }
    }
}

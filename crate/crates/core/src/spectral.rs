//! Spectral norm estimation by power iteration on `MᵀM`.
//!
//! Works on anything that can apply itself and its transpose to a vector, so
//! long chained products are never materialized.

use serde::{Deserialize, Serialize};

use crate::rng::SeedSpec;
use crate::scalar::Real;
use crate::tensor::{self, Mat};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 1000;

/// Stream label reserved for power-iteration start vectors.
const START_STREAM: u64 = 0x5EC7_0000;

pub trait LinearOperator<T: Real> {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `out = M x`
    fn apply(&self, x: &[T], out: &mut [T]);
    /// `out = Mᵀ x`
    fn apply_transpose(&self, x: &[T], out: &mut [T]);
}

impl<T: Real> LinearOperator<T> for Mat<T> {
    fn nrows(&self) -> usize {
        self.rows()
    }
    fn ncols(&self) -> usize {
        self.cols()
    }
    fn apply(&self, x: &[T], out: &mut [T]) {
        self.matvec_into(x, out);
    }
    fn apply_transpose(&self, x: &[T], out: &mut [T]) {
        self.matvec_t_into(x, out);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIterOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: SeedSpec,
}

impl Default for PowerIterOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            seed: SeedSpec::new(0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate<T> {
    pub value: T,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest singular value of `op`.
///
/// Each iterate `σ = ‖M v‖` with unit `v` is a lower bound on `σ_max`, so the
/// estimate approaches from below. Stops once consecutive estimates agree to
/// relative `tol`.
pub fn power_iteration<T: Real, O: LinearOperator<T> + ?Sized>(
    op: &O,
    opts: &PowerIterOptions,
) -> SpectralEstimate<T> {
    let (rows, cols) = (op.nrows(), op.ncols());
    if rows == 0 || cols == 0 {
        return SpectralEstimate {
            value: T::zero(),
            converged: true,
            iterations: 0,
        };
    }
    let tol = T::of(opts.tol);
    let mut v: Vec<T> = tensor::random_unit_vector(cols, &opts.seed.child(START_STREAM));
    let mut u = vec![T::zero(); rows];
    let mut w = vec![T::zero(); cols];
    let mut prev = T::zero();
    for it in 1..=opts.max_iter {
        op.apply(&v, &mut u);
        let sigma = tensor::norm(&u);
        op.apply_transpose(&u, &mut w);
        let wn = tensor::norm(&w);
        if wn == T::zero() || !wn.is_finite() {
            // v landed in the null space (or the operator is zero)
            return SpectralEstimate {
                value: sigma,
                converged: wn == T::zero() && sigma == T::zero(),
                iterations: it,
            };
        }
        if it > 1 && (sigma - prev).abs() <= tol * sigma {
            return SpectralEstimate {
                value: sigma,
                converged: true,
                iterations: it,
            };
        }
        prev = sigma;
        for (vi, &wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
    }
    SpectralEstimate {
        value: prev,
        converged: false,
        iterations: opts.max_iter,
    }
}

/// Spectral norm of a dense matrix; the zero matrix short-circuits to 0.
pub fn spectral_norm<T: Real>(m: &Mat<T>, tol: f64, max_iter: usize) -> SpectralEstimate<T> {
    spectral_norm_seeded(m, tol, max_iter, &SeedSpec::new(0))
}

pub fn spectral_norm_seeded<T: Real>(
    m: &Mat<T>,
    tol: f64,
    max_iter: usize,
    seed: &SeedSpec,
) -> SpectralEstimate<T> {
    if m.as_slice().iter().all(|&x| x == T::zero()) {
        return SpectralEstimate {
            value: T::zero(),
            converged: true,
            iterations: 0,
        };
    }
    power_iteration(
        m,
        &PowerIterOptions {
            tol,
            max_iter,
            seed: seed.clone(),
        },
    )
}

//! Dense row-major matrices and the vector kernels every other module uses.
//!
//! Vectors are plain slices. Reductions use four independent accumulators in a
//! fixed order, which keeps results bit-reproducible while letting the
//! compiler vectorize the inner loops.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedSpec;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn diag(entries: &[T]) -> Self {
        let mut m = Self::zeros(entries.len(), entries.len());
        for (i, &e) in entries.iter().enumerate() {
            m[(i, i)] = e;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "Mat::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics on ragged input; meant for literals in tests and fixtures.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, alpha: T) -> Self {
        self.map(|x| x * alpha)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// `self += alpha * u vᵀ`
    pub fn add_outer(&mut self, alpha: T, u: &[T], v: &[T]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = alpha * ui;
            if s == T::zero() {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            axpy(s, v, row);
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub shape");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        }
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "inner shape");
        dot(&self.data, &other.data)
    }

    pub fn frobenius_norm(&self) -> T {
        norm(&self.data)
    }

    /// `out = self * x`
    pub fn matvec_into(&self, x: &[T], out: &mut [T]) {
        assert_eq!(x.len(), self.cols, "matvec input");
        assert_eq!(out.len(), self.rows, "matvec output");
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out = selfᵀ * x`
    pub fn matvec_t_into(&self, x: &[T], out: &mut [T]) {
        assert_eq!(x.len(), self.rows, "matvec_t input");
        assert_eq!(out.len(), self.cols, "matvec_t output");
        out.fill(T::zero());
        for (i, &xi) in x.iter().enumerate() {
            if xi != T::zero() {
                axpy(xi, self.row(i), out);
            }
        }
    }

    pub fn matvec_t(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        self.matvec_t_into(x, &mut out);
        out
    }

    /// Naive product; only used by small oracles.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                axpy(a, other.row(k), dst);
            }
        }
        out
    }
}

impl<T> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Matrix with i.i.d. `N(0, variance)` entries drawn from `seed`'s stream.
pub fn gaussian_matrix<T: Real>(
    rows: usize,
    cols: usize,
    variance: f64,
    seed: &SeedSpec,
) -> Result<Mat<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyShape { rows, cols });
    }
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "variance must be positive and finite, got {variance}"
        )));
    }
    let sd = variance.sqrt();
    let mut rng = seed.rng();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(sd * z)
        })
        .collect();
    Ok(Mat { rows, cols, data })
}

/// Vector of i.i.d. standard normals.
pub fn gaussian_vector<T: Real>(dim: usize, seed: &SeedSpec) -> Vec<T> {
    let mut rng = seed.rng();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z)
        })
        .collect()
}

/// Uniform point on the unit sphere (normalized Gaussian).
pub fn random_unit_vector<T: Real>(dim: usize, seed: &SeedSpec) -> Vec<T> {
    let mut rng = seed.rng();
    loop {
        let v: Vec<T> = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z)
            })
            .collect();
        let n = norm(&v);
        if n > T::zero() {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn frobenius_norm<T: Real>(m: &Mat<T>) -> T {
    m.frobenius_norm()
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: T = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (ca, cb) in chunks_a.zip(chunks_b) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm_sq<T: Real>(v: &[T]) -> T {
    dot(v, v)
}

pub fn norm<T: Real>(v: &[T]) -> T {
    norm_sq(v).sqrt()
}

/// `y += alpha * x`
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn distance<T: Real>(a: &[T], b: &[T]) -> T {
    norm(&sub(a, b))
}

pub fn scale_in_place<T: Real>(alpha: T, v: &mut [T]) {
    for x in v {
        *x *= alpha;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frobenius_basics() {
        assert_eq!(Mat::<f64>::zeros(3, 4).frobenius_norm(), 0.0);
        let eye = Mat::<f64>::identity(7);
        assert!((eye.frobenius_norm() - 7f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn frobenius_two_by_two_direct_sum() {
        let m = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut direct = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                direct += m[(i, j)] * m[(i, j)];
            }
        }
        assert_eq!(direct, 30.0);
        assert!((frobenius_norm(&m) - direct.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_matrix_is_deterministic() {
        let s = SeedSpec::with_labels(11, &[3]);
        let a: Mat<f64> = gaussian_matrix(2, 2, 1.0, &s).unwrap();
        let b: Mat<f64> = gaussian_matrix(2, 2, 1.0, &s).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn gaussian_matrix_rejects_empty_and_bad_variance() {
        let s = SeedSpec::new(0);
        assert!(matches!(
            gaussian_matrix::<f64>(0, 3, 1.0, &s),
            Err(Error::EmptyShape { rows: 0, cols: 3 })
        ));
        assert!(gaussian_matrix::<f64>(2, 0, 1.0, &s).is_err());
        assert!(gaussian_matrix::<f64>(2, 2, 0.0, &s).is_err());
        assert!(gaussian_matrix::<f64>(2, 2, f64::NAN, &s).is_err());
    }

    #[test]
    fn gaussian_matrix_moments() {
        let (m, p) = (128, 784);
        let var = 2.0 / m as f64;
        let a: Mat<f64> = gaussian_matrix(m, p, var, &SeedSpec::new(2024)).unwrap();
        assert_eq!(a.shape(), (128, 784));
        assert!(a.is_finite());
        let n = (m * p) as f64;
        let mean = a.as_slice().iter().sum::<f64>() / n;
        let emp_var = a.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // standard error of the mean is sqrt(var / n)
        assert!(mean.abs() < 4.0 * (var / n).sqrt(), "mean {mean}");
        assert!((emp_var / var - 1.0).abs() < 0.1, "var {emp_var}");
    }

    #[test]
    fn matvec_and_transpose_agree() {
        let a: Mat<f64> = gaussian_matrix(5, 7, 1.0, &SeedSpec::new(1)).unwrap();
        let x: Vec<f64> = gaussian_vector(5, &SeedSpec::new(2));
        let via_t = a.transpose().matvec(&x);
        let direct = a.matvec_t(&x);
        for (u, v) in via_t.iter().zip(&direct) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (1..=7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), 140.0);
        assert_eq!(dot::<f64>(&[], &[]), 0.0);
    }

    #[test]
    fn works_in_single_precision() {
        let m = Mat::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert!((m.frobenius_norm() - 30f32.sqrt()).abs() < 1e-6);
        assert_eq!(m.matvec(&[1.0, 1.0]), vec![3.0, 7.0]);
    }
}

//! Small dense symmetric linear algebra.
//!
//! Everything here targets the dimensions used by the quadratic problems in
//! this crate (a handful up to a few dozen). [`SymMatrix`] stores only the
//! upper triangle, so symmetry cannot be broken by construction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sweep cap for the cyclic Jacobi eigensolver.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Relative off-diagonal Frobenius mass at which Jacobi stops.
pub const JACOBI_TOL: f64 = 1e-14;

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(entries: Vec<f64>) -> Self {
        Vector(entries)
    }

    pub fn zeros(d: usize) -> Self {
        Vector(vec![0.0; d])
    }

    pub fn from_scalar(x: f64) -> Self {
        Vector(vec![x])
    }

    pub fn filled(d: usize, value: f64) -> Self {
        Vector(vec![value; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.0.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: self.0.len(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * s).collect())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Vector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn dist(&self, other: &Vector) -> f64 {
        self.sub(other).norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Symmetric matrix stored as its packed upper triangle (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    upper: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(d: usize) -> Self {
        SymMatrix {
            dim: d,
            upper: vec![0.0; d * (d + 1) / 2],
        }
    }

    pub fn identity(d: usize) -> Self {
        Self::scaled_identity(d, 1.0)
    }

    pub fn scaled_identity(d: usize, a: f64) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d {
            m.set(i, i, a);
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn from_scalar(a: f64) -> Self {
        Self::diag(&[a])
    }

    /// Builds a matrix from `f(i, j)` evaluated on the upper triangle only.
    pub fn from_fn(d: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut upper = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in i..d {
                upper.push(f(i, j));
            }
        }
        SymMatrix { dim: d, upper }
    }

    /// Row-major packed upper triangle, as produced by [`SymMatrix::upper`].
    pub fn from_upper(d: usize, upper: Vec<f64>) -> Result<Self> {
        if upper.len() != d * (d + 1) / 2 {
            return Err(Error::DimensionMismatch {
                expected: d * (d + 1) / 2,
                found: upper.len(),
            });
        }
        Ok(SymMatrix { dim: d, upper })
    }

    /// Symmetric part `(M + Mᵀ)/2` of a dense row-major matrix.
    pub fn symmetrize_dense(d: usize, dense: &[f64]) -> Self {
        debug_assert_eq!(dense.len(), d * d);
        Self::from_fn(d, |i, j| 0.5 * (dense[i * d + j] + dense[j * d + i]))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[idx(self.dim, i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = idx(self.dim, i, j);
        self.upper[k] = v;
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = self.get(i, j);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.upper.iter().all(|v| v.is_finite())
    }

    pub fn mul_vec(&self, v: &Vector) -> Result<Vector> {
        v.check_dim(self.dim)?;
        let d = self.dim;
        let mut out = vec![0.0; d];
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..d {
                s += self.get(i, j) * v[j];
            }
            *o = s;
        }
        Ok(Vector::new(out))
    }

    fn zip_map(&self, other: &SymMatrix, f: impl Fn(f64, f64) -> f64) -> Result<SymMatrix> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        Ok(SymMatrix {
            dim: self.dim,
            upper: self.upper.iter().zip(&other.upper).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix {
            dim: self.dim,
            upper: self.upper.iter().map(|a| a * s).collect(),
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &SymMatrix) {
        debug_assert_eq!(self.dim, other.dim);
        for (a, b) in self.upper.iter_mut().zip(&other.upper) {
            *a += s * b;
        }
    }

    pub fn add_identity(&self, a: f64) -> SymMatrix {
        let mut m = self.clone();
        for i in 0..self.dim {
            let v = m.get(i, i);
            m.set(i, i, v + a);
        }
        m
    }

    /// Dense row-major product `self · other`.
    pub fn mul_dense(&self, other: &SymMatrix) -> Result<Vec<f64>> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out[i * d + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    /// Symmetric part of `self · other`. Exact whenever the two commute.
    pub fn sym_product(&self, other: &SymMatrix) -> Result<SymMatrix> {
        let dense = self.mul_dense(other)?;
        Ok(Self::symmetrize_dense(self.dim, &dense))
    }

    pub fn frobenius_norm(&self) -> f64 {
        let d = self.dim;
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                let v = self.get(i, j);
                s += v * v;
            }
        }
        s.sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }
}

#[inline]
fn idx(d: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // rows 0..i hold d + (d-1) + ... + (d-i+1) entries
    i * d - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns of a dense row-major `d×d` matrix.
    pub vectors: Vec<f64>,
    dim: usize,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, j: usize) -> Vector {
        let d = self.dim;
        Vector::new((0..d).map(|i| self.vectors[i * d + j]).collect())
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// `V · diag(f(λ)) · Vᵀ`
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let d = self.dim;
        let mapped: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        SymMatrix::from_fn(d, |i, j| {
            (0..d)
                .map(|k| self.vectors[i * d + k] * mapped[k] * self.vectors[j * d + k])
                .sum()
        })
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map(|l| l)
    }
}

/// Cyclic Jacobi eigendecomposition.
pub fn sym_eigen(m: &SymMatrix) -> Result<SymEigen> {
    sym_eigen_named(m, "matrix")
}

/// As [`sym_eigen`], naming the matrix in the non-convergence diagnostic.
pub fn sym_eigen_named(m: &SymMatrix, what: &str) -> Result<SymEigen> {
    let n = m.dim();
    let mut a = m.to_dense();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = m.frobenius_norm();
    let off_mass = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off_mass(&a) <= JACOBI_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let off = off_mass(&a);
        if off > JACOBI_TOL * scale {
            return Err(Error::NoConvergence {
                what: what.to_string(),
                sweeps: JACOBI_MAX_SWEEPS,
                off,
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            vectors[i * n + new_col] = v[i * n + old_col];
        }
    }
    Ok(SymEigen {
        values,
        vectors,
        dim: n,
    })
}

/// Inverse of a symmetric positive definite matrix.
pub fn sym_inverse(m: &SymMatrix) -> Result<SymMatrix> {
    sym_inverse_named(m, "matrix")
}

pub fn sym_inverse_named(m: &SymMatrix, what: &str) -> Result<SymMatrix> {
    let eig = sym_eigen_named(m, what)?;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || lo <= 1e-12 * hi {
        return Err(Error::Singular {
            what: what.to_string(),
            lambda_min: lo,
            lambda_max: hi,
        });
    }
    Ok(eig.map(|l| 1.0 / l))
}

/// Solves `m x = b` for symmetric positive definite `m`.
pub fn sym_solve(m: &SymMatrix, b: &Vector, what: &str) -> Result<Vector> {
    b.check_dim(m.dim())?;
    sym_inverse_named(m, what)?.mul_vec(b)
}

/// Largest absolute eigenvalue.
pub fn operator_norm(m: &SymMatrix) -> Result<f64> {
    let eig = sym_eigen(m)?;
    Ok(eig.values.iter().fold(0.0_f64, |acc, l| acc.max(l.abs())))
}

/// `vᵀ m v`
pub fn quad_form(m: &SymMatrix, v: &Vector) -> Result<f64> {
    v.check_dim(m.dim())?;
    let d = m.dim();
    let mut s = 0.0;
    for i in 0..d {
        s += m.get(i, i) * v[i] * v[i];
        for j in (i + 1)..d {
            s += 2.0 * m.get(i, j) * v[i] * v[j];
        }
    }
    Ok(s)
}

/// Random orthogonal `d×d` matrix (dense row-major), from Gram-Schmidt on a
/// Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for j in 0..d {
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for k in 0..j {
                    let proj: f64 = (0..d).map(|i| cols[j][i] * cols[k][i]).sum();
                    for i in 0..d {
                        cols[j][i] -= proj * cols[k][i];
                    }
                }
            }
            let n: f64 = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-8 {
                ok = false;
                break;
            }
            for x in cols[j].iter_mut() {
                *x /= n;
            }
        }
        if ok {
            let mut q = vec![0.0; d * d];
            for (j, col) in cols.iter().enumerate() {
                for i in 0..d {
                    q[i * d + j] = col[i];
                }
            }
            return q;
        }
    }
}

/// Random symmetric positive definite matrix with spectrum in
/// `[eig_lo, eig_hi]`. For `d ≥ 2` the extreme eigenvalues are exactly
/// `eig_lo` and `eig_hi`; a 1×1 result is `eig_lo`.
pub fn random_spd<R: Rng + ?Sized>(d: usize, eig_lo: f64, eig_hi: f64, rng: &mut R) -> Result<SymMatrix> {
    if !(eig_lo > 0.0) || !(eig_hi >= eig_lo) || !eig_hi.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "random_spd needs 0 < eig_lo <= eig_hi, got [{eig_lo}, {eig_hi}]"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidParameter("random_spd needs d >= 1".into()));
    }
    let mut lambdas: Vec<f64> = (0..d).map(|_| rng.random_range(eig_lo..=eig_hi)).collect();
    lambdas[0] = eig_lo;
    if d > 1 {
        lambdas[d - 1] = eig_hi;
    }
    if eig_lo == eig_hi {
        return Ok(SymMatrix::scaled_identity(d, eig_lo));
    }
    let q = random_orthogonal(d, rng);
    Ok(SymMatrix::from_fn(d, |i, j| {
        (0..d).map(|k| q[i * d + k] * lambdas[k] * q[j * d + k]).sum()
    }))
}

/// Random symmetric matrix with i.i.d. standard normal upper triangle.
pub fn random_symmetric<R: Rng + ?Sized>(d: usize, rng: &mut R) -> SymMatrix {
    SymMatrix::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

//! Small dense matrices for the truncated state space (N is at most a handful).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    n: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(d: &[f64]) -> Self {
        Self::from_fn(d.len(), |i, j| if i == j { d[i] } else { 0.0 })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("matrix must be square ({n} rows)")));
        }
        Ok(Self { n, data: rows.concat() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.n, |i, j| self.get(j, i))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { n: self.n, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn matmul(&self, other: &Mat) -> Self {
        Self::from_fn(self.n, |i, j| (0..self.n).map(|k| self.get(i, k) * other.get(k, j)).sum())
    }

    /// `out = self * x`
    #[inline]
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.mul_vec_into(x, &mut out);
        out
    }

    /// `out = x^T * self` (row vector times matrix).
    #[inline]
    pub fn vec_mul_into(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..self.n).map(|i| x[i] * self.data[i * self.n + j]).sum();
        }
    }

    pub fn vec_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.vec_mul_into(x, &mut out);
        out
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Operator 2-norm.
    pub fn norm2(&self) -> f64 {
        self.to_nalgebra().singular_values().max()
    }

    pub fn inverse(&self) -> Option<Self> {
        self.to_nalgebra().try_inverse().map(|m| Self::from_nalgebra(&m))
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Option<Self> {
        self.to_nalgebra().cholesky().map(|c| Self::from_nalgebra(&c.l()))
    }

    /// Solves `L y = b` for lower-triangular `self`.
    pub fn solve_lower_into(&self, b: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.get(i, k) * out[k];
            }
            out[i] = s / self.get(i, i);
        }
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.data)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), |i, j| m[(i, j)])
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let m = Mat::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = m.cholesky().unwrap();
        assert!(l.matmul(&l.transpose()).max_abs_diff(&m) < 1e-14);
        let mut y = [0.0; 2];
        l.solve_lower_into(&[1.0, 2.0], &mut y);
        assert!((l.mul_vec(&y)[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn row_vector_product() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.vec_mul(&[1.0, 1.0]), vec![4.0, 6.0]);
        assert_eq!(m.mul_vec(&[1.0, 1.0]), vec![3.0, 7.0]);
    }
}

//! Small dense d×d matrices (d ≤ 3) used for coefficient values and effective tensors.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Maximum spatial dimension supported.
pub const MAX_DIM: usize = 3;

/// Relative tolerance for symmetry validation.
const SYM_TOL: f64 = 1e-12;

/// A d×d real matrix stored in a fixed 3×3 block.
#[derive(Clone, Copy, PartialEq)]
pub struct Tensor {
    dim: usize,
    m: [[f64; 3]; 3],
}

impl Tensor {
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "dimension must be 1, 2 or 3");
        Self { dim, m: [[0.0; 3]; 3] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scalar(dim, 1.0)
    }

    /// `alpha * I`.
    pub fn scalar(dim: usize, alpha: f64) -> Self {
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            t.m[i][i] = alpha;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut t = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            t.m[i][i] = v;
        }
        t
    }

    /// Builds a matrix from rows; all rows must have the matrix dimension.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::InvalidInput(format!("matrix dimension {dim} not in 1..=3")));
        }
        let mut t = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} entries, expected {dim}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!("entry ({i},{j}) is not finite")));
                }
                t.m[i][j] = v;
            }
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i][j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.m[i][j] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|i| self.m[i][..self.dim].to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                t.m[i][j] = self.m[j][i];
            }
        }
        t
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        let t = self.transpose();
        self.add(&t).scale(0.5)
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..i {
                worst = worst.max((self.m[i][j] - self.m[j][i]).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn is_symmetric(&self) -> bool {
        self.asymmetry() <= SYM_TOL * self.max_abs().max(1.0)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim);
        let mut t = *self;
        for i in 0..3 {
            for j in 0..3 {
                t.m[i][j] += other.m[i][j];
            }
        }
        t
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut t = *self;
        for row in t.m.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        t
    }

    pub fn mul_vec(&self, v: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate().take(self.dim) {
            *o = (0..self.dim).map(|j| self.m[i][j] * v[j]).sum();
        }
        out
    }

    /// `ν · A ν`.
    pub fn quad_form(&self, nu: &[f64]) -> f64 {
        let av = self.mul_vec(nu);
        (0..self.dim).map(|i| av[i] * nu[i]).sum()
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let s = self.symmetrized();
        let mat = DMatrix::from_fn(self.dim, self.dim, |i, j| s.m[i][j]);
        let mut ev: Vec<f64> = mat.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Whether the matrix has no nonzero off-diagonal entries.
    pub fn is_diagonal(&self) -> bool {
        (0..self.dim).all(|i| (0..self.dim).all(|j| i == j || self.m[i][j] == 0.0))
    }

    /// Largest entrywise distance to another matrix.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.sub(other).max_abs()
    }

    fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.dim).flat_map(move |i| (0..self.dim).map(move |j| self.m[i][j]))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.rows()).finish()
    }
}

impl Serialize for Tensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Tensor::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_two_by_two() {
        let t = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let ev = t.eigenvalues();
        assert!((ev[0] - 1.0).abs() < 1e-12);
        assert!((ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0]]).is_err());
        assert!(Tensor::from_rows(&[]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let t = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 3.0]]).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, "[[2.0,0.5],[0.5,3.0]]");
        let back: Tensor = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn quad_form_and_symmetry() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(!t.is_symmetric());
        assert_eq!(t.asymmetry(), 2.0);
        assert_eq!(t.symmetrized().get(0, 1), 1.0);
        assert_eq!(t.quad_form(&[1.0, 1.0]), 4.0);
    }
}

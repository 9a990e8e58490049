//! Minimal dense linear algebra: Cholesky factors with rank-one updates, and
//! sorted sparse vectors, sized for desk-scale Gram matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal floor below which a factor is treated as numerically singular.
const PD_FLOOR: f64 = 1e-150;

/// Sparse vector with sorted, unique indices. Exact zeros are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseVec {
    /// Builds from `(index, value)` pairs; sorts and drops zero entries.
    pub fn new(dim: usize, mut entries: Vec<(usize, f64)>) -> Self {
        entries.retain(|&(_, v)| v != 0.0);
        entries.sort_unstable_by_key(|&(i, _)| i);
        debug_assert!(entries.iter().all(|&(i, _)| i < dim));
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        SparseVec { dim, entries }
    }

    pub fn zeros(dim: usize) -> Self {
        SparseVec { dim, entries: Vec::new() }
    }

    /// Standard basis vector `e_idx`.
    pub fn unit(dim: usize, idx: usize) -> Self {
        debug_assert!(idx < dim);
        SparseVec { dim, entries: vec![(idx, 1.0)] }
    }

    pub fn from_dense(v: &[f64]) -> Self {
        let entries = v
            .iter()
            .enumerate()
            .filter(|&(_, &x)| x != 0.0)
            .map(|(i, &x)| (i, x))
            .collect();
        SparseVec { dim: v.len(), entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn first_index(&self) -> Option<usize> {
        self.entries.first().map(|&(i, _)| i)
    }

    pub fn dot_dense(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.dim);
        self.entries.iter().map(|&(i, x)| x * v[i]).sum()
    }

    pub fn dot(&self, other: &SparseVec) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (ia, va) = self.entries[i];
            let (ib, vb) = other.entries[j];
            match ia.cmp(&ib) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += va * vb;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    /// `out += scale * self`.
    pub fn add_scaled_into(&self, scale: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        for &(i, v) in &self.entries {
            out[i] += scale * v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|&(_, v)| v.is_finite())
    }
}

/// Lower-triangular Cholesky factor `L` of a symmetric positive definite
/// matrix `A = L Lᵀ`, stored row-major with the upper triangle zeroed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cholesky {
    dim: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factor of `lambda * I`.
    pub fn scaled_identity(dim: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Numeric(format!(
                "ridge weight must be positive and finite, got {lambda}"
            )));
        }
        let mut l = vec![0.0; dim * dim];
        let root = lambda.sqrt();
        for i in 0..dim {
            l[i * dim + i] = root;
        }
        Ok(Cholesky { dim, l })
    }

    /// Full factorization of a dense symmetric matrix given row-major.
    pub fn from_gram(dim: usize, a: &[f64]) -> Result<Self> {
        if a.len() != dim * dim {
            return Err(Error::Structural(format!(
                "gram matrix has {} entries, expected {}",
                a.len(),
                dim * dim
            )));
        }
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut sum = a[i * dim + j];
                for k in 0..j {
                    sum -= l[i * dim + k] * l[j * dim + k];
                }
                if i == j {
                    if !(sum > PD_FLOOR) || !sum.is_finite() {
                        return Err(Error::Numeric(format!(
                            "matrix is not positive definite at pivot {i} (value {sum:e})"
                        )));
                    }
                    l[i * dim + j] = sum.sqrt();
                } else {
                    l[i * dim + j] = sum / l[j * dim + j];
                }
            }
        }
        Ok(Cholesky { dim, l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// In-place update of the factor for `A + v vᵀ`.
    ///
    /// Columns before the first nonzero of `v` are untouched, so sparse
    /// updates with a late first index stay cheap.
    pub fn rank_one_update(&mut self, v: &SparseVec) {
        debug_assert_eq!(v.dim(), self.dim);
        let n = self.dim;
        let first = match v.first_index() {
            Some(i) => i,
            None => return,
        };
        let mut w = v.to_dense();
        let mut b = 1.0;
        for j in first..n {
            let ljj = self.l[j * n + j];
            let wj = w[j];
            if wj == 0.0 {
                continue;
            }
            let nljj = (ljj * ljj + wj * wj / b).sqrt();
            let gamma = ljj * ljj * b + wj * wj;
            for k in (j + 1)..n {
                w[k] -= (wj / ljj) * self.l[k * n + j];
                self.l[k * n + j] = nljj * (self.l[k * n + j] / ljj + wj * w[k] / gamma);
            }
            self.l[j * n + j] = nljj;
            b += wj * wj / (ljj * ljj);
        }
    }

    /// Solves `A x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(rhs.len(), self.dim);
        let n = self.dim;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut sum = y[i];
            for j in 0..i {
                sum -= self.l[i * n + j] * y[j];
            }
            y[i] = sum / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut sum = y[i];
            for j in (i + 1)..n {
                sum -= self.l[j * n + i] * y[j];
            }
            y[i] = sum / self.l[i * n + i];
        }
        y
    }

    /// Quadratic form `vᵀ A⁻¹ v`, computed as `‖L⁻¹ v‖²` by forward
    /// substitution starting at the first nonzero of `v`.
    pub fn quad_form_inv(&self, v: &SparseVec) -> f64 {
        debug_assert_eq!(v.dim(), self.dim);
        let n = self.dim;
        let first = match v.first_index() {
            Some(i) => i,
            None => return 0.0,
        };
        let mut y = v.to_dense();
        let mut acc = 0.0;
        for i in first..n {
            let mut sum = y[i];
            for j in first..i {
                sum -= self.l[i * n + j] * y[j];
            }
            let yi = sum / self.l[i * n + i];
            y[i] = yi;
            acc += yi * yi;
        }
        acc
    }

    /// Rebuilds `A = L Lᵀ` row-major; used for factorization audits.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.dim;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut sum = 0.0;
                for k in 0..=i.min(j) {
                    sum += self.l[i * n + k] * self.l[j * n + k];
                }
                a[i * n + j] = sum;
            }
        }
        a
    }

    /// Row-major lower-triangular factor storage.
    pub fn lower(&self) -> &[f64] {
        &self.l
    }

    pub fn min_diag(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.l[i * self.dim + i])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.l.iter().all(|x| x.is_finite())
    }
}

/// Largest absolute elementwise difference between two equally sized matrices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

//! Compressed sparse row matrices and the linear solvers used by the time
//! stepping: Jacobi-preconditioned conjugate gradients and a banded Cholesky
//! factorization for the structured meshes.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|t| (t.0, t.1));
        let mut row_offsets = vec![0; n_rows + 1];
        let mut col_indices: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n_rows && c < n_cols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(c);
                values.push(v);
                row_offsets[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n_rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    /// `y = self * x`.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for (r, yr) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                s += self.values[k] * x[self.col_indices[k]];
            }
            *yr = s;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `x^T self y`.
    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for (r, xr) in x.iter().enumerate() {
            let mut t = 0.0;
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                t += self.values[k] * y[self.col_indices[k]];
            }
            s += xr * t;
        }
        s
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.get(r, r)).collect()
    }

    /// `a * self + b * other` for matrices with identical sparsity patterns.
    pub fn linear_combination(&self, a: f64, other: &CsrMatrix, b: f64) -> CsrMatrix {
        assert!(
            self.row_offsets == other.row_offsets && self.col_indices == other.col_indices,
            "sparsity patterns differ"
        );
        CsrMatrix {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            ..self.clone()
        }
    }

    /// Largest `|i - j|` over the stored entries.
    pub fn half_bandwidth(&self) -> usize {
        (0..self.n_rows)
            .flat_map(|r| self.row(r).map(move |(c, _)| r.abs_diff(c)))
            .max()
            .unwrap_or(0)
    }

    pub fn max_asymmetry(&self) -> f64 {
        (0..self.n_rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] += v;
            }
        }
        d
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned conjugate gradients for a symmetric positive definite
/// `matrix`. Iterates until `||S x - b|| <= tol ||b||`; gives up after `20 n`
/// iterations.
pub fn cg_solve(matrix: &CsrMatrix, rhs: &[f64], tol: f64) -> Result<Vec<f64>> {
    cg_solve_from(matrix, rhs, vec![0.0; rhs.len()], tol)
}

/// As [`cg_solve`], starting from `x`.
pub fn cg_solve_from(matrix: &CsrMatrix, rhs: &[f64], mut x: Vec<f64>, tol: f64) -> Result<Vec<f64>> {
    let n = rhs.len();
    if matrix.n_rows != n || matrix.n_cols != n {
        return Err(Error::Dimension {
            expected: matrix.n_rows,
            got: n,
        });
    }
    let b_norm = norm2(rhs);
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let inv_diag: Vec<f64> = matrix.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut r = matrix.mul_vec(&x);
    for (ri, bi) in r.iter_mut().zip(rhs) {
        *ri = bi - *ri;
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut sp = vec![0.0; n];
    let cap = 20 * n.max(1);
    let mut res = norm2(&r) / b_norm;
    for _ in 0..cap {
        if res <= tol {
            return Ok(x);
        }
        matrix.mul_vec_into(&p, &mut sp);
        let alpha = rz / dot(&p, &sp);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * sp[i];
        }
        res = norm2(&r) / b_norm;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if res <= tol {
        return Ok(x);
    }
    Err(Error::CgNotConverged {
        iterations: cap,
        residual: res,
    })
}

/// Cholesky factor `L` of a symmetric positive definite band matrix, stored
/// row-wise: row `i` holds `L[i][i - p..=i]`.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    p: usize,
    band: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(matrix: &CsrMatrix) -> Result<Self> {
        let n = matrix.n_rows;
        let p = matrix.half_bandwidth();
        let w = p + 1;
        let mut band = vec![0.0; n * w];
        for r in 0..n {
            for (c, v) in matrix.row(r) {
                if c <= r {
                    band[r * w + (c + p - r)] += v;
                }
            }
        }
        for i in 0..n {
            let j_start = i.saturating_sub(p);
            for j in j_start..=i {
                let k_start = j_start.max(j.saturating_sub(p));
                let mut s = band[i * w + (j + p - i)];
                let row_i = i * w + p - i;
                let row_j = j * w + p - j;
                for k in k_start..j {
                    s -= band[row_i + k] * band[row_j + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { row: i, pivot: s });
                    }
                    band[i * w + p] = s.sqrt();
                } else {
                    band[i * w + (j + p - i)] = s / band[j * w + p];
                }
            }
        }
        Ok(Self { n, p, band })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, p, w) = (self.n, self.p, self.p + 1);
        debug_assert_eq!(x.len(), n);
        for i in 0..n {
            let row = i * w + p - i;
            let mut s = x[i];
            for k in i.saturating_sub(p)..i {
                s -= self.band[row + k] * x[k];
            }
            x[i] = s / self.band[i * w + p];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n.min(i + p + 1) {
                s -= self.band[k * w + (i + p - k)] * x[k];
            }
            x[i] = s / self.band[i * w + p];
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

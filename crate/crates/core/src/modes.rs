//! Index arithmetic and validated stochastic matrices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Row-sum tolerance accepted by [`StochasticMatrix::new`].
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Entries above this threshold count as edges of the transition graph.
pub const EDGE_TOL: f64 = 1e-12;

/// Returns the unique `r` in `{1, ..., modulus}` with `k - r` divisible by `modulus`.
pub fn floor_mod(k: u64, modulus: usize) -> Result<usize> {
    if modulus == 0 {
        return Err(Error::ZeroModulus);
    }
    let m = modulus as u64;
    let r = k % m;
    Ok(if r == 0 { modulus } else { r as usize })
}

/// A residue of the clock operator, always in `1..=modulus`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModResidue {
    value: usize,
    modulus: usize,
}

impl ModResidue {
    pub fn of(k: u64, modulus: usize) -> Result<Self> {
        Ok(Self {
            value: floor_mod(k, modulus)?,
            modulus,
        })
    }

    pub fn value(&self) -> usize {
        self.value
    }

    pub fn modulus(&self) -> usize {
        self.modulus
    }

    /// Zero-based position of the residue (`value - 1`).
    pub fn index(&self) -> usize {
        self.value - 1
    }

    /// The residue of `k + 1` given the residue of `k`.
    pub fn succ(&self) -> Self {
        let value = if self.value == self.modulus { 1 } else { self.value + 1 };
        Self {
            value,
            modulus: self.modulus,
        }
    }
}

/// A dense row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    entries: DMatrix<f64>,
}

impl StochasticMatrix {
    /// Validates `m`: square, entries in `[0, 1]`, rows summing to one within
    /// [`ROW_SUM_TOL`]. Accepted rows are renormalized once.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = m.shape();
        if rows != cols || rows == 0 {
            return Err(Error::NotSquare { rows, cols });
        }
        let mut entries = m;
        for i in 0..rows {
            let mut sum = 0.0;
            for j in 0..cols {
                let v = entries[(i, j)];
                if !v.is_finite() || !(0.0..=1.0 + ROW_SUM_TOL).contains(&v) {
                    return Err(Error::NonStochastic(format!(
                        "entry ({}, {}) = {v} is not a probability",
                        i + 1,
                        j + 1
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::NonStochastic(format!(
                    "row {} sums to {sum}",
                    i + 1
                )));
            }
            for j in 0..cols {
                entries[(i, j)] = (entries[(i, j)] / sum).min(1.0);
            }
        }
        Ok(Self { entries })
    }

    /// Builds from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(matrix_from_rows(rows)?)
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            entries: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.dim()).map(move |j| self.entries[(i, j)])
    }

    /// Indices `j` with a strictly positive transition `i -> j`.
    pub fn successors(&self, i: usize) -> Vec<usize> {
        (0..self.dim())
            .filter(|&j| self.entries[(i, j)] > EDGE_TOL)
            .collect()
    }

    /// Draws the successor of `i` from a uniform variate `u` in `[0, 1)`.
    pub fn sample_next(&self, i: usize, u: f64) -> usize {
        let n = self.dim();
        let mut acc = 0.0;
        let mut last_positive = i;
        for j in 0..n {
            let p = self.entries[(i, j)];
            if p <= 0.0 {
                continue;
            }
            last_positive = j;
            acc += p;
            if u < acc {
                return j;
            }
        }
        last_positive
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.entries)
    }
}

/// Converts nested row-major arrays into a dense matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!(
            "row {} has {} entries, expected {ncols}",
            i + 1,
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

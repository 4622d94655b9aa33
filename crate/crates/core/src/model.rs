//! The Markov jump linear system and its gain-scheduled closed loop.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::modes::StochasticMatrix;

/// `x(k+1) = A_{r(k)} x(k) + B_{r(k)} u(k)` with mode chain `r` driven by `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct MjlsModel {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    p: StochasticMatrix,
    n: usize,
    m: usize,
}

impl MjlsModel {
    pub fn new(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>, p: StochasticMatrix) -> Result<Self> {
        let modes = p.dim();
        if a.len() != modes || b.len() != modes {
            return Err(Error::DimensionMismatch(format!(
                "P has {modes} modes but {} A and {} B matrices were given",
                a.len(),
                b.len()
            )));
        }
        let n = a[0].nrows();
        if n == 0 {
            return Err(Error::DimensionMismatch("state dimension is zero".into()));
        }
        let m = b[0].ncols();
        for (i, ai) in a.iter().enumerate() {
            if ai.shape() != (n, n) {
                return Err(Error::DimensionMismatch(format!(
                    "A_{} is {}x{}, expected {n}x{n}",
                    i + 1,
                    ai.nrows(),
                    ai.ncols()
                )));
            }
        }
        for (i, bi) in b.iter().enumerate() {
            if bi.shape() != (n, m) {
                return Err(Error::DimensionMismatch(format!(
                    "B_{} is {}x{}, expected {n}x{m}",
                    i + 1,
                    bi.nrows(),
                    bi.ncols()
                )));
            }
        }
        Ok(Self { a, b, p, n, m })
    }

    /// Number of modes `N`.
    pub fn modes(&self) -> usize {
        self.p.dim()
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Input dimension `m`.
    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn a(&self, mode: usize) -> &DMatrix<f64> {
        &self.a[mode]
    }

    pub fn b(&self, mode: usize) -> &DMatrix<f64> {
        &self.b[mode]
    }

    pub fn transition(&self) -> &StochasticMatrix {
        &self.p
    }

    /// `A_mode + B_mode K_{observed, clock}` (all indices zero-based).
    pub fn closed_loop_matrix(
        &self,
        gains: &GainSchedule,
        mode: usize,
        observed: usize,
        clock: usize,
    ) -> Result<DMatrix<f64>> {
        if mode >= self.modes() {
            return Err(Error::IndexOutOfRange(format!("mode {}", mode + 1)));
        }
        if gains.input_dim() != self.m || gains.state_dim() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "gains are {}x{}, system needs {}x{}",
                gains.input_dim(),
                gains.state_dim(),
                self.m,
                self.n
            )));
        }
        let k = gains.get(observed, clock)?;
        Ok(&self.a[mode] + &self.b[mode] * k)
    }
}

/// Feedback gains `K_{gamma, delta}`, indexed by the last observed mode and the clock.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    modes: usize,
    clock: usize,
    m: usize,
    n: usize,
    gains: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn zeros(modes: usize, clock: usize, m: usize, n: usize) -> Self {
        Self {
            modes,
            clock,
            m,
            n,
            gains: vec![DMatrix::zeros(m, n); modes * clock],
        }
    }

    /// Builds a schedule from a closure over zero-based `(gamma, delta)`.
    pub fn from_fn(
        modes: usize,
        clock: usize,
        m: usize,
        n: usize,
        mut f: impl FnMut(usize, usize) -> DMatrix<f64>,
    ) -> Result<Self> {
        let mut gains = Vec::with_capacity(modes * clock);
        for gamma in 0..modes {
            for delta in 0..clock {
                let k = f(gamma, delta);
                if k.shape() != (m, n) {
                    return Err(Error::DimensionMismatch(format!(
                        "K_({},{}) is {}x{}, expected {m}x{n}",
                        gamma + 1,
                        delta + 1,
                        k.nrows(),
                        k.ncols()
                    )));
                }
                gains.push(k);
            }
        }
        if modes == 0 || clock == 0 {
            return Err(Error::InvalidParameter("empty gain schedule".into()));
        }
        Ok(Self {
            modes,
            clock,
            m,
            n,
            gains,
        })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn clock(&self) -> usize {
        self.clock
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, gamma: usize, delta: usize) -> Result<&DMatrix<f64>> {
        if gamma >= self.modes || delta >= self.clock {
            return Err(Error::IndexOutOfRange(format!(
                "gain ({}, {}) outside {}x{} schedule",
                gamma + 1,
                delta + 1,
                self.modes,
                self.clock
            )));
        }
        Ok(&self.gains[gamma * self.clock + delta])
    }

    /// Iterates `(gamma, delta, K)` in row-major `(gamma, delta)` order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &DMatrix<f64>)> {
        self.gains
            .iter()
            .enumerate()
            .map(move |(i, k)| (i / self.clock, i % self.clock, k))
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }
}

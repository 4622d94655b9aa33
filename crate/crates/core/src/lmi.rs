//! Block LMI for gain synthesis on the extended chain.
//!
//! Variables are a symmetric `R_chi` per extended state and a pair
//! `(G_{gamma,delta}, F_{gamma,delta})` per observable index. The constraint
//! attached to `chi = (alpha, beta, gamma, delta)` is
//!
//! ```text
//! [ R_chi                      A_alpha G + B_alpha F      ]
//! [ (A_alpha G + B_alpha F)^T  G + G^T - D_chi(R)         ]  > 0
//! ```
//!
//! with `D_chi(R) = sum_{chi'} pbar[chi', chi] R_chi'`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embedding::{start_states, ExtendedChain};
use crate::error::{Error, Result};
use crate::model::MjlsModel;
use crate::obsproc::ObservationModel;

/// Offsets of every matrix variable inside the flat scalar vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmiVariableLayout {
    n: usize,
    m: usize,
    extended_states: usize,
    modes: usize,
    clock: usize,
}

impl LmiVariableLayout {
    pub fn new(n: usize, m: usize, extended_states: usize, modes: usize, clock: usize) -> Self {
        Self {
            n,
            m,
            extended_states,
            modes,
            clock,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn clock(&self) -> usize {
        self.clock
    }

    pub fn extended_states(&self) -> usize {
        self.extended_states
    }

    fn sym_len(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    fn g_base(&self) -> usize {
        self.extended_states * self.sym_len()
    }

    fn f_base(&self) -> usize {
        self.g_base() + self.modes * self.clock * self.n * self.n
    }

    /// Total number of scalar variables.
    pub fn len(&self) -> usize {
        self.f_base() + self.modes * self.clock * self.m * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of `R_state`; entries `(i, j)`, `i <= j`, stored row by row.
    pub fn r_offset(&self, state: usize) -> usize {
        state * self.sym_len()
    }

    pub fn g_offset(&self, gamma: usize, delta: usize) -> usize {
        self.g_base() + (gamma * self.clock + delta) * self.n * self.n
    }

    pub fn f_offset(&self, gamma: usize, delta: usize) -> usize {
        self.f_base() + (gamma * self.clock + delta) * self.m * self.n
    }

    /// Position of upper-triangular entry `(i, j)` within an `R` block.
    pub fn sym_position(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + i + (j - i)
    }

    pub fn r_matrix(&self, y: &[f64], state: usize) -> DMatrix<f64> {
        let base = self.r_offset(state);
        DMatrix::from_fn(self.n, self.n, |i, j| y[base + self.sym_position(i, j)])
    }

    pub fn g_matrix(&self, y: &[f64], gamma: usize, delta: usize) -> DMatrix<f64> {
        let base = self.g_offset(gamma, delta);
        DMatrix::from_fn(self.n, self.n, |i, j| y[base + i * self.n + j])
    }

    pub fn f_matrix(&self, y: &[f64], gamma: usize, delta: usize) -> DMatrix<f64> {
        let base = self.f_offset(gamma, delta);
        DMatrix::from_fn(self.m, self.n, |i, j| y[base + i * self.n + j])
    }

    /// Inverse of the accessors above: packs matrices into a flat vector.
    pub fn pack(
        &self,
        r: impl Fn(usize) -> DMatrix<f64>,
        g: impl Fn(usize, usize) -> DMatrix<f64>,
        f: impl Fn(usize, usize) -> DMatrix<f64>,
    ) -> Vec<f64> {
        let mut y = vec![0.0; self.len()];
        for s in 0..self.extended_states {
            let rs = r(s);
            for i in 0..self.n {
                for j in i..self.n {
                    y[self.r_offset(s) + self.sym_position(i, j)] = rs[(i, j)];
                }
            }
        }
        for gamma in 0..self.modes {
            for delta in 0..self.clock {
                let gm = g(gamma, delta);
                let fm = f(gamma, delta);
                for i in 0..self.n {
                    for j in 0..self.n {
                        y[self.g_offset(gamma, delta) + i * self.n + j] = gm[(i, j)];
                    }
                }
                for i in 0..self.m {
                    for j in 0..self.n {
                        y[self.f_offset(gamma, delta) + i * self.n + j] = fm[(i, j)];
                    }
                }
            }
        }
        y
    }
}

/// One symmetric constraint `sum_v y_v C_v > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlock {
    /// Extended state this block belongs to.
    pub state: usize,
    /// Flat index `gamma * T + delta` of the `(G, F)` pair the block uses.
    pub gain: usize,
    pub dim: usize,
    /// `(variable, coefficient)` pairs, sorted by variable, coefficients symmetric.
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl LmiBlock {
    pub fn evaluate(&self, y: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (v, c) in &self.terms {
            out += c * y[*v];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiProblem {
    pub layout: LmiVariableLayout,
    pub blocks: Vec<LmiBlock>,
}

impl LmiProblem {
    pub fn evaluate(&self, y: &[f64]) -> Vec<DMatrix<f64>> {
        self.blocks.iter().map(|b| b.evaluate(y)).collect()
    }

    pub fn num_vars(&self) -> usize {
        self.layout.len()
    }

    /// Whether each `(gamma, delta)` pair, flattened as `gamma * T + delta`,
    /// appears in at least one block.
    pub fn constrained_gains(&self) -> Vec<bool> {
        let mut used = vec![false; self.layout.modes() * self.layout.clock()];
        for b in &self.blocks {
            used[b.gain] = true;
        }
        used
    }
}

/// `D_chi(R) = sum_{chi'} pbar[chi', chi] R_chi'` (flow into `chi`).
pub fn d_operator(chain: &ExtendedChain, r: &[DMatrix<f64>], state: usize) -> DMatrix<f64> {
    let n = r[0].nrows();
    let mut out = DMatrix::zeros(n, n);
    for (from, r_from) in r.iter().enumerate() {
        let w = chain.prob(from, state);
        if w != 0.0 {
            out += r_from * w;
        }
    }
    out
}

/// Which extended states receive an LMI block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmiStates {
    /// Every state of the extended chain.
    #[default]
    All,
    /// States reachable from any admissible initial condition.
    Reachable,
    /// States reachable when the mode is observed at time zero.
    ObservedStart,
}

impl LmiStates {
    /// Forward-closed set of retained states, `None` for [`LmiStates::All`].
    pub fn retained(self, chain: &ExtendedChain, obs: &ObservationModel) -> Option<Vec<usize>> {
        let initial = match self {
            LmiStates::All => return None,
            LmiStates::Reachable => obs.unrestricted(),
            LmiStates::ObservedStart => obs.observed_at_start(),
        };
        Some(chain.reachable_states(&start_states(chain, obs, &initial)))
    }
}

/// Builds one block per extended state, or per state in `retain` when given.
///
/// With `retain`, `D_chi` only sums over retained predecessors, so `retain`
/// should be forward-closed (see [`ExtendedChain::reachable_states`]).
pub fn assemble(model: &MjlsModel, chain: &ExtendedChain, retain: Option<&[usize]>) -> Result<LmiProblem> {
    let dims = chain.dims();
    if dims.modes != model.modes() {
        return Err(Error::DimensionMismatch(format!(
            "extended chain has {} modes, system has {}",
            dims.modes,
            model.modes()
        )));
    }
    let (n, m) = (model.state_dim(), model.input_dim());
    let layout = LmiVariableLayout::new(n, m, chain.size(), dims.modes, dims.clock);
    let mut kept = vec![retain.is_none(); chain.size()];
    if let Some(states) = retain {
        for &s in states {
            if s >= chain.size() {
                return Err(Error::IndexOutOfRange(format!("extended state index {}", s + 1)));
            }
            kept[s] = true;
        }
    }
    let blocks = (0..chain.size())
        .filter(|&s| kept[s])
        .map(|s| build_block(model, chain, &layout, s, &kept))
        .collect();
    Ok(LmiProblem { layout, blocks })
}

fn build_block(
    model: &MjlsModel,
    chain: &ExtendedChain,
    layout: &LmiVariableLayout,
    state: usize,
    kept: &[bool],
) -> LmiBlock {
    let (n, m) = (layout.state_dim(), layout.input_dim());
    let dim = 2 * n;
    let chi = chain.dims().state(state);
    let a = model.a(chi.mode);
    let b = model.b(chi.mode);
    let mut terms: Vec<(usize, DMatrix<f64>)> = Vec::new();

    // R_chi in the upper-left block.
    for i in 0..n {
        for j in i..n {
            let mut c = DMatrix::zeros(dim, dim);
            c[(i, j)] = 1.0;
            c[(j, i)] = 1.0;
            terms.push((layout.r_offset(state) + layout.sym_position(i, j), c));
        }
    }
    // -D_chi(R) in the lower-right block.
    for from in chain.predecessors(state).into_iter().filter(|&f| kept[f]) {
        let w = chain.prob(from, state);
        for i in 0..n {
            for j in i..n {
                let mut c = DMatrix::zeros(dim, dim);
                c[(n + i, n + j)] = -w;
                c[(n + j, n + i)] = -w;
                terms.push((layout.r_offset(from) + layout.sym_position(i, j), c));
            }
        }
    }
    // G: A G off the diagonal, G + G^T lower-right.
    for i in 0..n {
        for j in 0..n {
            let mut c = DMatrix::zeros(dim, dim);
            for r in 0..n {
                c[(r, n + j)] += a[(r, i)];
                c[(n + j, r)] += a[(r, i)];
            }
            c[(n + i, n + j)] += 1.0;
            c[(n + j, n + i)] += 1.0;
            terms.push((layout.g_offset(chi.last, chi.clock) + i * n + j, c));
        }
    }
    // F: B F off the diagonal.
    for i in 0..m {
        for j in 0..n {
            let mut c = DMatrix::zeros(dim, dim);
            for r in 0..n {
                c[(r, n + j)] += b[(r, i)];
                c[(n + j, r)] += b[(r, i)];
            }
            terms.push((layout.f_offset(chi.last, chi.clock) + i * n + j, c));
        }
    }

    terms.sort_by_key(|(v, _)| *v);
    let mut merged: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(terms.len());
    for (v, c) in terms {
        match merged.last_mut() {
            Some((last, acc)) if *last == v => *acc += c,
            _ => merged.push((v, c)),
        }
    }
    merged.retain(|(_, c)| c.amax() > 0.0);
    LmiBlock {
        state,
        gain: chi.last * layout.clock() + chi.clock,
        dim,
        terms: merged,
    }
}

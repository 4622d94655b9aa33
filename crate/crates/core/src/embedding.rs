//! The extended chain on (mode, observation-chain state, last observed mode, clock).
//!
//! Along a closed-loop path the tuple `(r(k), s(k), sigma(k), [k + 1 - tau(k)]_T)`
//! is a time-homogeneous Markov chain; its transition matrix is assembled here.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::MjlsModel;
use crate::modes::{floor_mod, StochasticMatrix, EDGE_TOL};
use crate::obsproc::{InitialSet, ObservationModel};

/// Component ranges `(N, M, N, T)` of the extended state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtendedDims {
    pub modes: usize,
    pub obs_states: usize,
    pub clock: usize,
}

impl ExtendedDims {
    pub fn size(&self) -> usize {
        self.modes * self.obs_states * self.modes * self.clock
    }

    /// Lexicographic position of `state` in `(mode, obs, last, clock)`, clock fastest.
    pub fn flat_index(&self, state: &ExtendedState) -> Result<usize> {
        let ExtendedState {
            mode,
            obs,
            last,
            clock,
        } = *state;
        if mode >= self.modes || obs >= self.obs_states || last >= self.modes || clock >= self.clock {
            return Err(Error::IndexOutOfRange(format!(
                "extended state {state} outside ({}, {}, {}, {})",
                self.modes, self.obs_states, self.modes, self.clock
            )));
        }
        Ok(((mode * self.obs_states + obs) * self.modes + last) * self.clock + clock)
    }

    pub fn state(&self, index: usize) -> ExtendedState {
        let clock = index % self.clock;
        let rest = index / self.clock;
        let last = rest % self.modes;
        let rest = rest / self.modes;
        ExtendedState {
            mode: rest / self.obs_states,
            obs: rest % self.obs_states,
            last,
            clock,
        }
    }

    pub fn states(&self) -> impl Iterator<Item = ExtendedState> + '_ {
        (0..self.size()).map(|i| self.state(i))
    }
}

/// A point `(alpha, beta, gamma, delta)` of the extended space, zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExtendedState {
    /// Current mode `r(k)`.
    pub mode: usize,
    /// Observation chain state `s(k)`.
    pub obs: usize,
    /// Last observed mode `sigma(k)`.
    pub last: usize,
    /// Clock `[k + 1 - tau(k)]_T - 1`.
    pub clock: usize,
}

impl std::fmt::Display for ExtendedState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.mode + 1,
            self.obs + 1,
            self.last + 1,
            self.clock + 1
        )
    }
}

/// Extended state at `k = 0` for the given initial mode, chain state and
/// pre-observation augmentation `(sigma0, tau0)`, with `tau0 < 0`.
pub fn initial_state(
    obs: &ObservationModel,
    r0: usize,
    s0: usize,
    sigma0: usize,
    tau0: i64,
) -> Result<ExtendedState> {
    if tau0 >= 0 {
        return Err(Error::InvalidParameter(format!("tau0 = {tau0} must be negative")));
    }
    if s0 >= obs.states() {
        return Err(Error::IndexOutOfRange(format!("s0 = {}", s0 + 1)));
    }
    if obs.is_observed(s0) {
        Ok(ExtendedState {
            mode: r0,
            obs: s0,
            last: r0,
            clock: 0,
        })
    } else {
        Ok(ExtendedState {
            mode: r0,
            obs: s0,
            last: sigma0,
            clock: floor_mod((1 - tau0) as u64, obs.clock())? - 1,
        })
    }
}

/// Flat indices of every extended state the tuple can start in when the
/// observation chain starts in `initial`, over all `r0`, `sigma0` and
/// `tau0 < 0` (only `tau0` modulo `T` matters).
pub fn start_states(chain: &ExtendedChain, obs: &ObservationModel, initial: &InitialSet) -> Vec<usize> {
    let dims = chain.dims();
    let mut out = Vec::new();
    for r0 in 0..dims.modes {
        for &s0 in initial.states() {
            for sigma0 in 0..dims.modes {
                for tau0 in 1..=dims.clock as i64 {
                    let chi = initial_state(obs, r0, s0, sigma0, -tau0).expect("arguments in range");
                    out.push(dims.flat_index(&chi).expect("arguments in range"));
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedChain {
    dims: ExtendedDims,
    pbar: StochasticMatrix,
}

impl ExtendedChain {
    /// Assembles the extended transition matrix.
    ///
    /// Entering an observed chain state resets the tuple to
    /// `(alpha', beta', alpha', 1)`; otherwise the last observed mode is kept
    /// and the clock advances modulo `T`. Both branches carry weight
    /// `p_{alpha, alpha'} q_{beta, beta'}`.
    pub fn build(model: &MjlsModel, obs: &ObservationModel) -> Result<Self> {
        let dims = ExtendedDims {
            modes: model.modes(),
            obs_states: obs.states(),
            clock: obs.clock(),
        };
        let size = dims.size();
        let p = model.transition();
        let q = obs.chain();
        let mut pbar = DMatrix::zeros(size, size);
        for from in 0..size {
            let chi = dims.state(from);
            for next_mode in p.successors(chi.mode) {
                let pm = p.get(chi.mode, next_mode);
                for next_obs in q.successors(chi.obs) {
                    let to = successor(&dims, obs, &chi, next_mode, next_obs);
                    pbar[(from, dims.flat_index(&to)?)] += pm * q.get(chi.obs, next_obs);
                }
            }
        }
        Ok(Self {
            dims,
            pbar: StochasticMatrix::new(pbar)?,
        })
    }

    pub fn dims(&self) -> ExtendedDims {
        self.dims
    }

    pub fn size(&self) -> usize {
        self.dims.size()
    }

    pub fn transition(&self) -> &StochasticMatrix {
        &self.pbar
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.pbar.get(from, to)
    }

    /// Flat indices reachable from `initial` through positive-probability transitions.
    pub fn reachable_states(&self, initial: &[usize]) -> Vec<usize> {
        let mut seen = vec![false; self.size()];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for &i in initial {
            if !seen[i] {
                seen[i] = true;
                queue.push_back(i);
            }
        }
        while let Some(i) = queue.pop_front() {
            for j in self.pbar.successors(i) {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        (0..self.size()).filter(|&i| seen[i]).collect()
    }

    /// Flat indices `chi'` with `pbar[chi', chi] > 0`.
    pub fn predecessors(&self, to: usize) -> Vec<usize> {
        (0..self.size())
            .filter(|&from| self.pbar.get(from, to) > EDGE_TOL)
            .collect()
    }
}

fn successor(
    dims: &ExtendedDims,
    obs: &ObservationModel,
    chi: &ExtendedState,
    next_mode: usize,
    next_obs: usize,
) -> ExtendedState {
    if obs.is_observed(next_obs) {
        ExtendedState {
            mode: next_mode,
            obs: next_obs,
            last: next_mode,
            clock: 0,
        }
    } else {
        ExtendedState {
            mode: next_mode,
            obs: next_obs,
            last: chi.last,
            clock: (chi.clock + 1) % dims.clock,
        }
    }
}

//! Mean-square stabilizing gain schedules for discrete-time Markov jump
//! linear systems whose mode is observed only at random times.
//!
//! The observation times are the visits of a second Markov chain to an
//! observation set. The mode, the observation chain, the last observed mode
//! and an elapsed-time clock together form an extended Markov chain
//! ([`embedding`]), which turns the partially observed closed loop into an
//! ordinary jump linear system. Gains indexed by (last observed mode, clock)
//! are then found from a block LMI ([`lmi`], [`sdpsolve`]), certified by the
//! spectral radius of the second-moment operator ([`synth`]) and checked by
//! simulation ([`sim`]).

pub mod cli;
pub mod config;
pub mod embedding;
pub mod error;
pub mod lmi;
pub mod model;
pub mod modes;
pub mod obsproc;
pub mod sdpsolve;
pub mod sim;
pub mod synth;

pub use embedding::{ExtendedChain, ExtendedDims, ExtendedState};
pub use error::{Error, Result};
pub use model::{GainSchedule, MjlsModel};
pub use modes::{floor_mod, StochasticMatrix};
pub use obsproc::ObservationModel;
pub use sdpsolve::{solve_feasibility, SdpSolution, SolveStatus, SolverOptions};
pub use synth::{certify_mss, extract_gains, StabilityCertificate};

//! Random instance generators shared by the integration tests.
#![allow(dead_code)]

use mjls_core::modes::StochasticMatrix;
use mjls_core::{GainSchedule, MjlsModel, ObservationModel};
use nalgebra::DMatrix;
use rand::Rng;

/// Row-stochastic matrix whose rows each keep a random nonempty support.
pub fn random_stochastic<R: Rng>(rng: &mut R, dim: usize, zero_prob: f64) -> StochasticMatrix {
    let mut rows = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut row: Vec<f64> = (0..dim)
            .map(|_| if rng.random::<f64>() < zero_prob { 0.0 } else { rng.random::<f64>() + 0.05 })
            .collect();
        if row.iter().all(|&v| v == 0.0) {
            row[rng.random_range(0..dim)] = 1.0;
        }
        let total: f64 = row.iter().sum();
        rows.push(row.into_iter().map(|v| v / total).collect());
    }
    StochasticMatrix::from_rows(&rows).expect("normalized rows")
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Observation chain with a random observation set that is recurrent.
pub fn random_observation<R: Rng>(rng: &mut R, states: usize, clock: usize) -> ObservationModel {
    loop {
        let q = random_stochastic(rng, states, 0.4);
        let lambda: Vec<usize> = (0..states).filter(|_| rng.random::<f64>() < 0.5).collect();
        if lambda.is_empty() {
            continue;
        }
        if let Ok(obs) = ObservationModel::new(q, &lambda, clock) {
            return obs;
        }
    }
}

pub struct Instance {
    pub model: MjlsModel,
    pub obs: ObservationModel,
}

/// Random system with `n <= max_n`, `N <= max_modes`, `M <= max_obs`,
/// `T <= max_clock`; `a_scale` bounds the entries of every `A_i`.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    max_n: usize,
    max_modes: usize,
    max_obs: usize,
    max_clock: usize,
    a_scale: f64,
) -> Instance {
    let n = rng.random_range(1..=max_n);
    let m = rng.random_range(1..=n);
    let modes = rng.random_range(1..=max_modes);
    let a = (0..modes).map(|_| random_matrix(rng, n, n, a_scale)).collect();
    let b = (0..modes).map(|_| random_matrix(rng, n, m, 1.0)).collect();
    let p = random_stochastic(rng, modes, 0.3);
    let model = MjlsModel::new(a, b, p).expect("consistent dimensions");
    let states = rng.random_range(1..=max_obs);
    let clock = rng.random_range(1..=max_clock);
    let obs = random_observation(rng, states, clock);
    Instance { model, obs }
}

pub fn random_gains<R: Rng>(rng: &mut R, model: &MjlsModel, clock: usize, scale: f64) -> GainSchedule {
    let (n, m) = (model.state_dim(), model.input_dim());
    GainSchedule::from_fn(model.modes(), clock, m, n, |_, _| random_matrix(rng, m, n, scale)).expect("shapes")
}

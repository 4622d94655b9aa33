//! Monte Carlo simulation of the closed loop under randomized observations.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{ExtendedChain, ExtendedState};
use crate::error::{Error, Result};
use crate::model::{GainSchedule, MjlsModel};
use crate::modes::floor_mod;
use crate::obsproc::ObservationModel;
use crate::synth::SecondMomentOperator;

/// How the observation chain starts on each path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainStart {
    Fixed(usize),
    /// Uniform over all chain states.
    Uniform,
    /// Uniform over the observation set (mode observed at `k = 0`).
    UniformObserved,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub horizon: usize,
    pub num_paths: usize,
    pub x0: Vec<f64>,
    pub r0: usize,
    pub s0: ChainStart,
    pub sigma0: usize,
    /// Pre-observation value of the last observation time; must be negative.
    pub tau0: i64,
    pub seed: u64,
    pub keep_paths: bool,
}

impl SimConfig {
    pub fn new(x0: Vec<f64>) -> Self {
        Self {
            horizon: 50,
            num_paths: 100,
            x0,
            r0: 0,
            s0: ChainStart::Fixed(0),
            sigma0: 0,
            tau0: -1,
            seed: 0,
            keep_paths: false,
        }
    }

    fn validate(&self, model: &MjlsModel, obs: &ObservationModel) -> Result<()> {
        if self.num_paths == 0 {
            return Err(Error::InvalidParameter("num_paths must be positive".into()));
        }
        if self.tau0 >= 0 {
            return Err(Error::InvalidParameter(format!("tau0 = {} must be negative", self.tau0)));
        }
        if self.x0.len() != model.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "x0 has {} entries, state dimension is {}",
                self.x0.len(),
                model.state_dim()
            )));
        }
        if self.r0 >= model.modes() || self.sigma0 >= model.modes() {
            return Err(Error::IndexOutOfRange("initial mode".into()));
        }
        if let ChainStart::Fixed(s) = self.s0 {
            if s >= obs.states() {
                return Err(Error::IndexOutOfRange(format!("s0 = {}", s + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    /// Sample mean of `|x(k)|^2`, `k = 0..=horizon`.
    pub mean_sq_norm: Vec<f64>,
    /// Standard error of the sample mean at each `k`.
    pub std_err: Vec<f64>,
    pub paths: Option<Vec<Vec<f64>>>,
    pub observation_times: Vec<Vec<u64>>,
}

impl SimResult {
    /// `mean_sq_norm[horizon] / mean_sq_norm[0]`.
    pub fn decay_ratio(&self) -> f64 {
        self.mean_sq_norm[self.mean_sq_norm.len() - 1] / self.mean_sq_norm[0]
    }
}

/// Joint realization of the mode, the observation chain and the derived
/// last-observation time and last observed mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessTrace {
    pub r: Vec<usize>,
    pub s: Vec<usize>,
    pub tau: Vec<i64>,
    pub sigma: Vec<usize>,
    pub observation_times: Vec<u64>,
}

impl ProcessTrace {
    /// `(r(k), s(k), sigma(k), [k + 1 - tau(k)]_T)` along the trace.
    pub fn extended(&self, clock: usize) -> Vec<ExtendedState> {
        (0..self.r.len())
            .map(|k| ExtendedState {
                mode: self.r[k],
                obs: self.s[k],
                last: self.sigma[k],
                clock: clock_index(k, self.tau[k], clock),
            })
            .collect()
    }
}

fn clock_index(k: usize, tau: i64, clock: usize) -> usize {
    let elapsed = k as i64 + 1 - tau;
    debug_assert!(elapsed >= 1);
    floor_mod(elapsed as u64, clock).expect("positive clock") - 1
}

/// Independent random stream for path `path_id`.
pub fn path_rng(seed: u64, path_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_id);
    rng
}

fn draw_start<R: Rng>(start: &ChainStart, obs: &ObservationModel, rng: &mut R) -> usize {
    match start {
        ChainStart::Fixed(s) => *s,
        ChainStart::Uniform => rng.random_range(0..obs.states()),
        ChainStart::UniformObserved => {
            let set = obs.observation_set();
            set[rng.random_range(0..set.len())]
        }
    }
}

/// Walks `r` and `s` as independent chains and tracks `tau`, `sigma`;
/// `step` sees each `(k, r, sigma, clock)` before the chains move.
fn walk<R: Rng>(
    model: &MjlsModel,
    obs: &ObservationModel,
    cfg: &SimConfig,
    rng: &mut R,
    mut step: impl FnMut(usize, usize, usize, i64),
) -> ProcessTrace {
    let horizon = cfg.horizon;
    let mut trace = ProcessTrace {
        r: Vec::with_capacity(horizon + 1),
        s: Vec::with_capacity(horizon + 1),
        tau: Vec::with_capacity(horizon + 1),
        sigma: Vec::with_capacity(horizon + 1),
        observation_times: Vec::new(),
    };
    let mut s = draw_start(&cfg.s0, obs, rng);
    let mut r = cfg.r0;
    let mut tau = cfg.tau0;
    let mut sigma = cfg.sigma0;
    for k in 0..=horizon {
        if obs.is_observed(s) {
            tau = k as i64;
            sigma = r;
            trace.observation_times.push(k as u64);
        }
        trace.r.push(r);
        trace.s.push(s);
        trace.tau.push(tau);
        trace.sigma.push(sigma);
        step(k, r, sigma, tau);
        if k < horizon {
            r = model.transition().sample_next(r, rng.random());
            s = obs.chain().sample_next(s, rng.random());
        }
    }
    trace
}

/// Simulates the mode/observation processes of one path (stream 0 of `cfg.seed`).
pub fn simulate_processes(model: &MjlsModel, obs: &ObservationModel, cfg: &SimConfig) -> Result<ProcessTrace> {
    cfg.validate(model, obs)?;
    let mut rng = path_rng(cfg.seed, 0);
    Ok(walk(model, obs, cfg, &mut rng, |_, _, _, _| {}))
}

/// Extended-state trajectory built from direct simulation of the processes.
pub fn simulate_extended_tuple(
    model: &MjlsModel,
    obs: &ObservationModel,
    cfg: &SimConfig,
) -> Result<Vec<ExtendedState>> {
    Ok(simulate_processes(model, obs, cfg)?.extended(obs.clock()))
}

/// Simulates `x(k+1) = (A_r + B_r K_{sigma, [k+1-tau]_T}) x(k)` on every path.
pub fn simulate_closed_loop(
    model: &MjlsModel,
    obs: &ObservationModel,
    gains: &GainSchedule,
    cfg: &SimConfig,
) -> Result<SimResult> {
    cfg.validate(model, obs)?;
    if gains.modes() != model.modes()
        || gains.clock() != obs.clock()
        || gains.state_dim() != model.state_dim()
        || gains.input_dim() != model.input_dim()
    {
        return Err(Error::DimensionMismatch(format!(
            "gain schedule {}x{} of {}x{} gains does not fit N = {}, T = {}, m = {}, n = {}",
            gains.modes(),
            gains.clock(),
            gains.input_dim(),
            gains.state_dim(),
            model.modes(),
            obs.clock(),
            model.input_dim(),
            model.state_dim()
        )));
    }
    let horizon = cfg.horizon;
    let clock = obs.clock();
    // Closed-loop matrices indexed by (mode, last observed mode, clock).
    let mut table = Vec::with_capacity(model.modes() * model.modes() * clock);
    for mode in 0..model.modes() {
        for last in 0..model.modes() {
            for delta in 0..clock {
                table.push(model.closed_loop_matrix(gains, mode, last, delta)?);
            }
        }
    }
    let mut sum = vec![0.0; horizon + 1];
    let mut sum_sq = vec![0.0; horizon + 1];
    let mut paths = cfg.keep_paths.then(|| Vec::with_capacity(cfg.num_paths));
    let mut observation_times = Vec::with_capacity(cfg.num_paths);
    for path in 0..cfg.num_paths {
        let mut rng = path_rng(cfg.seed, path as u64);
        let mut x = DVector::from_vec(cfg.x0.clone());
        let mut norms = Vec::with_capacity(horizon + 1);
        let trace = walk(model, obs, cfg, &mut rng, |k, r, sigma, tau| {
            norms.push(x.norm_squared());
            if k < horizon {
                let idx = (r * model.modes() + sigma) * clock + clock_index(k, tau, clock);
                x = &table[idx] * &x;
            }
        });
        for (k, v) in norms.iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
        observation_times.push(trace.observation_times);
        if let Some(p) = paths.as_mut() {
            p.push(norms);
        }
    }
    let count = cfg.num_paths as f64;
    let mean_sq_norm: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std_err = sum_sq
        .iter()
        .zip(&mean_sq_norm)
        .map(|(sq, mean)| {
            if cfg.num_paths < 2 {
                return 0.0;
            }
            let var = ((sq - count * mean * mean) / (count - 1.0)).max(0.0);
            (var / count).sqrt()
        })
        .collect();
    Ok(SimResult {
        mean_sq_norm,
        std_err,
        paths,
        observation_times,
    })
}

/// Exact `E|x(k)|^2` for `k = 0..=horizon`, propagating the second moments
/// `X_chi(k) = E[x(k) x(k)^T 1{theta(k) = chi}]` from `theta(0) = start`.
pub fn second_moment_iterate(
    model: &MjlsModel,
    chain: &ExtendedChain,
    gains: &GainSchedule,
    start: &ExtendedState,
    x0: &[f64],
    horizon: usize,
) -> Result<Vec<f64>> {
    let n = model.state_dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch(format!("x0 has {} entries, expected {n}", x0.len())));
    }
    let op = SecondMomentOperator::new(model, chain, gains)?;
    let idx = chain.dims().flat_index(start)?;
    let x0 = DVector::from_column_slice(x0);
    let mut x: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); chain.size()];
    x[idx] = &x0 * x0.transpose();
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(x0.norm_squared());
    for _ in 0..horizon {
        x = op.apply(&x);
        out.push(x.iter().map(|m| m.trace()).sum());
    }
    Ok(out)
}

/// Comparison of empirical transition frequencies of a simulated tuple path
/// against the analytic extended transition matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EmbeddingReport {
    pub steps: usize,
    pub max_abs_error: f64,
    pub worst_transition: Option<(String, String)>,
    pub rows_compared: usize,
    pub entries_compared: usize,
    /// Observed transitions to which the analytic matrix assigns probability zero.
    pub unexpected_transitions: usize,
    pub min_row_visits: usize,
    pub probability_floor: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Rows visited fewer than `min_row_visits` times are skipped; entries with
/// analytic probability below `probability_floor` are not compared.
pub fn check_embedding_law(
    model: &MjlsModel,
    obs: &ObservationModel,
    chain: &ExtendedChain,
    cfg: &SimConfig,
    min_row_visits: usize,
    probability_floor: f64,
    tolerance: f64,
) -> Result<EmbeddingReport> {
    let path = simulate_extended_tuple(model, obs, cfg)?;
    let dims = chain.dims();
    let size = chain.size();
    let mut visits = vec![0usize; size];
    let mut counts: std::collections::HashMap<(usize, usize), usize> = std::collections::HashMap::new();
    for pair in path.windows(2) {
        let from = dims.flat_index(&pair[0])?;
        let to = dims.flat_index(&pair[1])?;
        visits[from] += 1;
        *counts.entry((from, to)).or_insert(0) += 1;
    }
    let unexpected_transitions = counts
        .keys()
        .filter(|(from, to)| chain.prob(*from, *to) <= 0.0)
        .count();
    let mut max_abs_error: f64 = 0.0;
    let mut worst = None;
    let mut rows_compared = 0;
    let mut entries_compared = 0;
    for from in (0..size).filter(|&i| visits[i] >= min_row_visits.max(1)) {
        rows_compared += 1;
        for to in chain.transition().successors(from) {
            let p = chain.prob(from, to);
            if p < probability_floor {
                continue;
            }
            entries_compared += 1;
            let freq = counts.get(&(from, to)).copied().unwrap_or(0) as f64 / visits[from] as f64;
            let err = (freq - p).abs();
            if err > max_abs_error {
                max_abs_error = err;
                worst = Some((dims.state(from).to_string(), dims.state(to).to_string()));
            }
        }
    }
    Ok(EmbeddingReport {
        steps: path.len().saturating_sub(1),
        max_abs_error,
        worst_transition: worst,
        rows_compared,
        entries_compared,
        unexpected_transitions,
        min_row_visits,
        probability_floor,
        tolerance,
        pass: unexpected_transitions == 0 && max_abs_error <= tolerance,
    })
}

/// Shortest round-trip decimal, switching to exponent form for extreme magnitudes.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Writes `k,mean_sq_norm` rows.
pub fn write_summary_csv<W: Write>(mut w: W, result: &SimResult) -> io::Result<()> {
    writeln!(w, "k,mean_sq_norm")?;
    for (k, v) in result.mean_sq_norm.iter().enumerate() {
        writeln!(w, "{k},{}", format_float(*v))?;
    }
    Ok(())
}

/// Writes `path_id,k,sq_norm` rows (path ids start at 1).
pub fn write_paths_csv<W: Write>(mut w: W, result: &SimResult) -> io::Result<()> {
    writeln!(w, "path_id,k,sq_norm")?;
    for (p, norms) in result.paths.iter().flatten().enumerate() {
        for (k, v) in norms.iter().enumerate() {
            writeln!(w, "{},{k},{}", p + 1, format_float(*v))?;
        }
    }
    Ok(())
}

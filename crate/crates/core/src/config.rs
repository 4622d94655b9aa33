//! JSON problem description and the gains file format.
//!
//! Indices are one-based in every file; matrices are row-major nested arrays.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::lmi::LmiStates;
use crate::model::{GainSchedule, MjlsModel};
use crate::modes::{matrix_from_rows, matrix_to_rows, StochasticMatrix};
use crate::obsproc::{ObservationModel, ObservationRegistry};
use crate::sdpsolve::SolverOptions;
use crate::sim::{ChainStart, SimConfig};

/// A configuration problem tied to the field that caused it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            field: field.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub system: SystemConfig,
    /// Single-key object naming the observation family, e.g.
    /// `{"renewal": {"mu": [0.5, 0.5]}}`.
    pub observation: BTreeMap<String, Value>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub clock: Option<usize>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub lmi_states: LmiStates,
    #[serde(default)]
    pub sim: SimSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub method: String,
    pub max_iterations: usize,
    pub margin_target: f64,
    pub tolerance: f64,
    pub gap_tolerance: f64,
    pub barrier_growth: f64,
    pub variable_bound: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self {
            method: "barrier".into(),
            max_iterations: d.max_iterations,
            margin_target: d.margin_target,
            tolerance: d.tolerance,
            gap_tolerance: d.gap_tolerance,
            barrier_growth: d.barrier_growth,
            variable_bound: d.variable_bound,
        }
    }
}

impl SolverSection {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            max_iterations: self.max_iterations,
            margin_target: self.margin_target,
            tolerance: self.tolerance,
            gap_tolerance: self.gap_tolerance,
            barrier_growth: self.barrier_growth,
            variable_bound: self.variable_bound,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    pub method: String,
}

impl Default for CertifySection {
    fn default() -> Self {
        Self { method: "auto".into() }
    }
}

/// `s0` is a one-based state, `"uniform"` or `"uniform_observed"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StartSpec {
    State(usize),
    Named(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub horizon: usize,
    pub num_paths: usize,
    pub x0: Option<Vec<f64>>,
    pub r0: usize,
    pub s0: StartSpec,
    pub sigma0: usize,
    pub tau0: i64,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            horizon: 50,
            num_paths: 100,
            x0: None,
            r0: 1,
            s0: StartSpec::State(1),
            sigma0: 1,
            tau0: -1,
            seed: 0,
        }
    }
}

/// A parsed and validated problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub config: ProblemConfig,
    pub model: MjlsModel,
    pub obs: ObservationModel,
    /// SHA-256 of the raw configuration text.
    pub hash: String,
}

impl Problem {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ProblemConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(if path == "." { String::new() } else { path }, e.into_inner())
        })?;
        let model = build_model(&config.system)?;
        let obs = build_observation(&config)?;
        let hash = hex_digest(text.as_bytes());
        let problem = Self {
            config,
            model,
            obs,
            hash,
        };
        problem.sim_config()?;
        Ok(problem)
    }

    /// Simulation settings with one-based indices converted.
    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let s = &self.config.sim;
        let n = self.model.state_dim();
        let x0 = s.x0.clone().unwrap_or_else(|| vec![1.0; n]);
        if x0.len() != n {
            return Err(ConfigError::new("sim.x0", format!("expected {n} entries, got {}", x0.len())));
        }
        let modes = self.model.modes();
        let mode = |v: usize, field: &str| {
            if (1..=modes).contains(&v) {
                Ok(v - 1)
            } else {
                Err(ConfigError::new(field, format!("{v} outside 1..={modes}")))
            }
        };
        let r0 = mode(s.r0, "sim.r0")?;
        let sigma0 = mode(s.sigma0, "sim.sigma0")?;
        let s0 = match &s.s0 {
            StartSpec::State(v) if (1..=self.obs.states()).contains(v) => ChainStart::Fixed(v - 1),
            StartSpec::State(v) => {
                return Err(ConfigError::new("sim.s0", format!("{v} outside 1..={}", self.obs.states())))
            }
            StartSpec::Named(name) if name == "uniform" => ChainStart::Uniform,
            StartSpec::Named(name) if name == "uniform_observed" => ChainStart::UniformObserved,
            StartSpec::Named(name) => {
                return Err(ConfigError::new(
                    "sim.s0",
                    format!("'{name}' is not a state, \"uniform\" or \"uniform_observed\""),
                ))
            }
        };
        if s.tau0 >= 0 {
            return Err(ConfigError::new("sim.tau0", "must be negative"));
        }
        if s.num_paths == 0 {
            return Err(ConfigError::new("sim.num_paths", "must be positive"));
        }
        Ok(SimConfig {
            horizon: s.horizon,
            num_paths: s.num_paths,
            x0,
            r0,
            s0,
            sigma0,
            tau0: s.tau0,
            seed: s.seed,
            keep_paths: true,
        })
    }
}

fn build_model(sys: &SystemConfig) -> Result<MjlsModel, ConfigError> {
    let p = matrix_from_rows(&sys.p)
        .and_then(StochasticMatrix::new)
        .map_err(|e| ConfigError::new("system.P", e))?;
    let convert = |mats: &[Vec<Vec<f64>>], name: &str| {
        mats.iter()
            .enumerate()
            .map(|(i, m)| matrix_from_rows(m).map_err(|e| ConfigError::new(format!("system.{name}[{i}]"), e)))
            .collect::<Result<Vec<_>, _>>()
    };
    let a = convert(&sys.a, "A")?;
    let b = convert(&sys.b, "B")?;
    if a.is_empty() {
        return Err(ConfigError::new("system.A", "no mode matrices"));
    }
    MjlsModel::new(a, b, p).map_err(|e| {
        let field = match &e {
            Error::DimensionMismatch(msg) if msg.starts_with("B_") => "system.B",
            _ => "system.A",
        };
        ConfigError::new(field, e)
    })
}

fn build_observation(config: &ProblemConfig) -> Result<ObservationModel, ConfigError> {
    let registry = ObservationRegistry::default();
    let mut entries = config.observation.iter();
    let (name, params) = match (entries.next(), entries.next()) {
        (Some(entry), None) => entry,
        _ => {
            return Err(ConfigError::new(
                "observation",
                format!("expected exactly one of: {}", registry.names().join(", ")),
            ))
        }
    };
    let family = registry
        .get(name)
        .map_err(|e| ConfigError::new("observation", e))?;
    family.build(params, config.clock).map_err(|e| match e.field.as_deref() {
        Some("T") => ConfigError::new("T", e.error),
        Some(f) => ConfigError::new(format!("observation.{name}.{f}"), e.error),
        None => ConfigError::new(format!("observation.{name}"), e.error),
    })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// On-disk gain schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainsFile {
    pub config_hash: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub modes: usize,
    #[serde(rename = "T")]
    pub clock: usize,
    pub m: usize,
    pub n: usize,
    pub gains: Vec<GainEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEntry {
    pub gamma: usize,
    pub delta: usize,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
}

impl GainsFile {
    pub fn from_schedule(gains: &GainSchedule, config_hash: &str, seed: u64) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            seed,
            modes: gains.modes(),
            clock: gains.clock(),
            m: gains.input_dim(),
            n: gains.state_dim(),
            gains: gains
                .iter()
                .map(|(g, d, k)| GainEntry {
                    gamma: g + 1,
                    delta: d + 1,
                    k: matrix_to_rows(k),
                })
                .collect(),
        }
    }

    pub fn to_schedule(&self) -> Result<GainSchedule, ConfigError> {
        let mut table: BTreeMap<(usize, usize), &GainEntry> = BTreeMap::new();
        for (i, e) in self.gains.iter().enumerate() {
            if !(1..=self.modes).contains(&e.gamma) || !(1..=self.clock).contains(&e.delta) {
                return Err(ConfigError::new(
                    format!("gains[{i}]"),
                    format!("index ({}, {}) outside {}x{}", e.gamma, e.delta, self.modes, self.clock),
                ));
            }
            if table.insert((e.gamma - 1, e.delta - 1), e).is_some() {
                return Err(ConfigError::new(format!("gains[{i}]"), "duplicate entry"));
            }
        }
        let mut failure = None;
        let schedule = GainSchedule::from_fn(self.modes, self.clock, self.m, self.n, |g, d| {
            match table.get(&(g, d)).map(|e| matrix_from_rows(&e.k)) {
                Some(Ok(k)) => k,
                Some(Err(err)) => {
                    failure.get_or_insert(ConfigError::new("gains", err));
                    nalgebra::DMatrix::zeros(self.m, self.n)
                }
                None => {
                    failure.get_or_insert(ConfigError::new("gains", format!("missing K for ({}, {})", g + 1, d + 1)));
                    nalgebra::DMatrix::zeros(self.m, self.n)
                }
            }
        })
        .map_err(|e| ConfigError::new("gains", e))?;
        match failure {
            Some(e) => Err(e),
            None => Ok(schedule),
        }
    }
}

//! Observation processes induced by a Markov chain `s` and an observation set.
//!
//! The controller sees the mode exactly at the times `k` with `s(k)` in the
//! observation set. Three families are provided and registered by name in
//! [`ObservationRegistry`]: periodic observation with failures, renewal
//! observation with a finitely supported inter-arrival law, and arbitrary
//! user-supplied chains.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::Rng;
use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::modes::{matrix_from_rows, StochasticMatrix};

/// Tolerance on the renewal recursion leaving `[0, 1]`.
pub const RENEWAL_TOL: f64 = 1e-9;

/// Chain `Q`, observation set and clock modulus for gain scheduling.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    q: StochasticMatrix,
    observed: Vec<bool>,
    clock: usize,
}

impl ObservationModel {
    /// Validates the set and its recurrence. `lambda` holds zero-based states.
    pub fn new(q: StochasticMatrix, lambda: &[usize], clock: usize) -> Result<Self> {
        let dim = q.dim();
        if lambda.is_empty() {
            return Err(Error::InvalidParameter("observation set is empty".into()));
        }
        if clock == 0 {
            return Err(Error::ZeroModulus);
        }
        let mut observed = vec![false; dim];
        for &l in lambda {
            if l >= dim {
                return Err(Error::IndexOutOfRange(format!(
                    "observation state {} outside 1..={dim}",
                    l + 1
                )));
            }
            observed[l] = true;
        }
        if let Some(class) = unobserved_closed_class(&q, &observed) {
            return Err(Error::LambdaNotRecurrent(
                class.into_iter().map(|s| s + 1).collect(),
            ));
        }
        Ok(Self { q, observed, clock })
    }

    /// Periodic observation every `period` steps, each attempt succeeding with
    /// probability `success`. Gaps are `period * k` with probability
    /// `(1 - success)^(k-1) * success`.
    pub fn periodic_with_failures(period: usize, success: f64) -> Result<Self> {
        if period == 0 {
            return Err(Error::InvalidParameter("period must be positive".into()));
        }
        if !(0.0..=1.0).contains(&success) {
            return Err(Error::InvalidParameter(format!(
                "success probability {success} outside [0, 1]"
            )));
        }
        let dim = period + 1;
        let mut q = DMatrix::zeros(dim, dim);
        // State 0 is the successful observation, state 1 the failed attempt;
        // both restart the countdown 2 -> 3 -> ... -> period, and the last
        // state decides the next attempt.
        let decide = period;
        for start in [0, 1] {
            if start == decide || period == 1 {
                q[(start, 0)] = success;
                q[(start, 1)] = 1.0 - success;
            } else {
                q[(start, 2)] = 1.0;
            }
        }
        for i in 2..dim {
            if i == decide {
                q[(i, 0)] = success;
                q[(i, 1)] = 1.0 - success;
            } else {
                q[(i, i + 1)] = 1.0;
            }
        }
        Self::new(StochasticMatrix::new(q)?, &[0], dim)
    }

    /// Renewal observation whose inter-arrival law puts mass `mu[k-1]` on gap `k`.
    pub fn renewal(mu: &[f64]) -> Result<Self> {
        let hazards = renewal_hazards(mu)?;
        let tau = mu.len();
        let mut q = DMatrix::zeros(tau, tau);
        for k in 0..tau - 1 {
            q[(k, 0)] = hazards[k];
            q[(k, k + 1)] = 1.0 - hazards[k];
        }
        q[(tau - 1, 0)] = 1.0;
        Self::new(StochasticMatrix::new(q)?, &[0], tau)
    }

    /// Arbitrary chain with zero-based observation set.
    pub fn custom(q: StochasticMatrix, lambda: &[usize], clock: usize) -> Result<Self> {
        Self::new(q, lambda, clock)
    }

    /// Same chain and set with a different clock modulus `T`.
    pub fn with_clock(mut self, clock: usize) -> Result<Self> {
        if clock == 0 {
            return Err(Error::ZeroModulus);
        }
        self.clock = clock;
        Ok(self)
    }

    pub fn chain(&self) -> &StochasticMatrix {
        &self.q
    }

    /// Number of chain states `M`.
    pub fn states(&self) -> usize {
        self.q.dim()
    }

    /// Clock modulus `T`.
    pub fn clock(&self) -> usize {
        self.clock
    }

    pub fn is_observed(&self, state: usize) -> bool {
        self.observed[state]
    }

    /// Zero-based observation set, ascending.
    pub fn observation_set(&self) -> Vec<usize> {
        (0..self.states()).filter(|&s| self.observed[s]).collect()
    }

    /// Observation times `k <= horizon` along one path started at `s0`.
    pub fn sample_observation_times<R: Rng + ?Sized>(
        &self,
        s0: usize,
        horizon: u64,
        rng: &mut R,
    ) -> Vec<u64> {
        let mut times = Vec::new();
        let mut s = s0;
        for k in 0..=horizon {
            if self.observed[s] {
                times.push(k);
            }
            if k < horizon {
                s = self.q.sample_next(s, rng.random());
            }
        }
        times
    }

    /// `count` consecutive gaps between observation times, started at `s0`.
    pub fn sample_gaps<R: Rng + ?Sized>(&self, s0: usize, count: usize, rng: &mut R) -> Vec<u64> {
        let mut gaps = Vec::with_capacity(count);
        let mut s = s0;
        let mut last: Option<u64> = None;
        let mut k = 0u64;
        while gaps.len() < count {
            if self.observed[s] {
                if let Some(prev) = last {
                    gaps.push(k - prev);
                }
                last = Some(k);
            }
            s = self.q.sample_next(s, rng.random());
            k += 1;
        }
        gaps
    }

    /// Admissible initial chain states when the mode must be observed at `k = 0`.
    pub fn observed_at_start(&self) -> InitialSet {
        InitialSet {
            states: self.observation_set(),
        }
    }

    /// All chain states.
    pub fn unrestricted(&self) -> InitialSet {
        InitialSet {
            states: (0..self.states()).collect(),
        }
    }
}

/// Set of admissible initial states of the observation chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitialSet {
    states: Vec<usize>,
}

impl InitialSet {
    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn contains(&self, s: usize) -> bool {
        self.states.contains(&s)
    }
}

/// Hazard rates `p~_k = p_k / prod_{l<k} (1 - p~_l)` of a finitely supported law.
pub fn renewal_hazards(mu: &[f64]) -> Result<Vec<f64>> {
    let tau = mu.len();
    if tau == 0 {
        return Err(Error::InvalidParameter("empty inter-arrival law".into()));
    }
    if let Some(p) = mu.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidParameter(format!("negative or non-finite atom {p}")));
    }
    let total: f64 = mu.iter().sum();
    if (total - 1.0).abs() > RENEWAL_TOL {
        return Err(Error::InvalidParameter(format!("atoms sum to {total}")));
    }
    if mu[tau - 1] <= 0.0 {
        return Err(Error::DegenerateDistribution(format!(
            "last atom of a length-{tau} law must be positive"
        )));
    }
    let mut hazards = Vec::with_capacity(tau);
    let mut survival = 1.0;
    for (k, &p) in mu.iter().enumerate() {
        let h = if survival > 0.0 {
            p / survival
        } else if p == 0.0 {
            0.0
        } else {
            return Err(Error::DegenerateDistribution(format!(
                "atom {} has mass after the survival function vanished",
                k + 1
            )));
        };
        if !(-RENEWAL_TOL..=1.0 + RENEWAL_TOL).contains(&h) {
            return Err(Error::DegenerateDistribution(format!(
                "hazard {} = {h} outside [0, 1]",
                k + 1
            )));
        }
        let h = h.clamp(0.0, 1.0);
        hazards.push(h);
        survival *= 1.0 - h;
    }
    Ok(hazards)
}

/// Whether every closed communicating class of `q` meets the observation set.
pub fn check_recurrent(q: &StochasticMatrix, lambda: &[usize]) -> bool {
    let mut observed = vec![false; q.dim()];
    for &l in lambda.iter().filter(|&&l| l < q.dim()) {
        observed[l] = true;
    }
    unobserved_closed_class(q, &observed).is_none()
}

/// Closed communicating classes of `q`, each sorted ascending.
pub fn closed_classes(q: &StochasticMatrix) -> Vec<Vec<usize>> {
    let dim = q.dim();
    let mut graph = DiGraph::<(), ()>::with_capacity(dim, dim * dim);
    let nodes: Vec<_> = (0..dim).map(|_| graph.add_node(())).collect();
    for i in 0..dim {
        for j in q.successors(i) {
            graph.add_edge(nodes[i], nodes[j], ());
        }
    }
    let mut classes = Vec::new();
    for scc in tarjan_scc(&graph) {
        let members: BTreeSet<usize> = scc.iter().map(|n| n.index()).collect();
        let closed = members
            .iter()
            .all(|&i| q.successors(i).iter().all(|j| members.contains(j)));
        if closed {
            classes.push(members.into_iter().collect());
        }
    }
    classes.sort();
    classes
}

fn unobserved_closed_class(q: &StochasticMatrix, observed: &[bool]) -> Option<Vec<usize>> {
    closed_classes(q)
        .into_iter()
        .find(|class| class.iter().all(|&s| !observed[s]))
}

/// Builds an [`ObservationModel`] from JSON parameters.
pub trait ObservationFamily: Send + Sync {
    fn name(&self) -> &'static str;

    /// `clock` overrides the family's default modulus when given.
    fn build(&self, params: &Value, clock: Option<usize>) -> std::result::Result<ObservationModel, FamilyError>;
}

/// Failure to build a family member: either malformed parameters (with the
/// offending parameter name) or a model error.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyError {
    pub field: Option<String>,
    pub error: Error,
}

impl FamilyError {
    fn at(field: &str, error: Error) -> Self {
        Self {
            field: Some(field.to_string()),
            error,
        }
    }
}

impl From<Error> for FamilyError {
    fn from(error: Error) -> Self {
        Self { field: None, error }
    }
}

fn parse_params<T: serde::de::DeserializeOwned>(params: &Value) -> std::result::Result<T, FamilyError> {
    serde_path_to_error::deserialize(params.clone()).map_err(|e| {
        let path = e.path().to_string();
        FamilyError {
            field: (path != ".").then_some(path),
            error: Error::InvalidParameter(e.into_inner().to_string()),
        }
    })
}

fn apply_clock(model: ObservationModel, clock: Option<usize>) -> std::result::Result<ObservationModel, FamilyError> {
    match clock {
        Some(t) => model.with_clock(t).map_err(|e| FamilyError::at("T", e)),
        None => Ok(model),
    }
}

struct PeriodicWithFailures;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PeriodicParams {
    tau: usize,
    p: f64,
}

impl ObservationFamily for PeriodicWithFailures {
    fn name(&self) -> &'static str {
        "periodic_with_failures"
    }

    fn build(&self, params: &Value, clock: Option<usize>) -> std::result::Result<ObservationModel, FamilyError> {
        let p: PeriodicParams = parse_params(params)?;
        let model = ObservationModel::periodic_with_failures(p.tau, p.p).map_err(|e| match e {
            Error::InvalidParameter(ref msg) if msg.starts_with("period") => FamilyError::at("tau", e),
            other => FamilyError::at("p", other),
        })?;
        apply_clock(model, clock)
    }
}

struct Renewal;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenewalParams {
    mu: Vec<f64>,
}

impl ObservationFamily for Renewal {
    fn name(&self) -> &'static str {
        "renewal"
    }

    fn build(&self, params: &Value, clock: Option<usize>) -> std::result::Result<ObservationModel, FamilyError> {
        let p: RenewalParams = parse_params(params)?;
        let model = ObservationModel::renewal(&p.mu).map_err(|e| FamilyError::at("mu", e))?;
        apply_clock(model, clock)
    }
}

struct Custom;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CustomParams {
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    lambda_set: Vec<usize>,
}

impl ObservationFamily for Custom {
    fn name(&self) -> &'static str {
        "custom"
    }

    fn build(&self, params: &Value, clock: Option<usize>) -> std::result::Result<ObservationModel, FamilyError> {
        let p: CustomParams = parse_params(params)?;
        let q = matrix_from_rows(&p.q)
            .and_then(StochasticMatrix::new)
            .map_err(|e| FamilyError::at("Q", e))?;
        if let Some(&bad) = p.lambda_set.iter().find(|&&l| l == 0 || l > q.dim()) {
            return Err(FamilyError::at(
                "lambda_set",
                Error::IndexOutOfRange(format!("state {bad} outside 1..={}", q.dim())),
            ));
        }
        let lambda: Vec<usize> = p.lambda_set.iter().map(|l| l - 1).collect();
        let clock = clock.unwrap_or(q.dim());
        ObservationModel::custom(q, &lambda, clock).map_err(|e| match e {
            Error::ZeroModulus => FamilyError::at("T", e),
            other => FamilyError::at("lambda_set", other),
        })
    }
}

/// Observation families available by name.
pub struct ObservationRegistry {
    families: BTreeMap<&'static str, Box<dyn ObservationFamily>>,
}

impl ObservationRegistry {
    pub fn empty() -> Self {
        Self {
            families: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, family: Box<dyn ObservationFamily>) {
        self.families.insert(family.name(), family);
    }

    pub fn get(&self, name: &str) -> Result<&dyn ObservationFamily> {
        self.families
            .get(name)
            .map(|f| f.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "observation family",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.families.keys().copied().collect()
    }
}

impl Default for ObservationRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(PeriodicWithFailures));
        reg.register(Box::new(Renewal));
        reg.register(Box::new(Custom));
        reg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    fn cycle3() -> StochasticMatrix {
        StochasticMatrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap()
    }

    fn gap_histogram(gaps: &[u64]) -> BTreeMap<u64, f64> {
        let mut h = BTreeMap::new();
        for &g in gaps {
            *h.entry(g).or_insert(0.0) += 1.0;
        }
        for v in h.values_mut() {
            *v /= gaps.len() as f64;
        }
        h
    }

    #[test]
    fn periodic_unit_period_observes_every_step() {
        let obs = ObservationModel::periodic_with_failures(1, 1.0).unwrap();
        assert_eq!(obs.states(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(obs.sample_observation_times(0, 6, &mut rng), (0..=6).collect::<Vec<_>>());
        assert!(obs.sample_gaps(0, 100, &mut rng).iter().all(|&g| g == 1));
    }

    #[test]
    fn periodic_layout_for_benchmark() {
        let obs = ObservationModel::periodic_with_failures(4, 0.5).unwrap();
        assert_eq!(obs.states(), 5);
        assert_eq!(obs.clock(), 5);
        let q = obs.chain();
        assert_eq!(q.get(0, 2), 1.0);
        assert_eq!(q.get(1, 2), 1.0);
        assert_eq!(q.get(2, 3), 1.0);
        assert_eq!(q.get(3, 4), 1.0);
        assert_eq!((q.get(4, 0), q.get(4, 1)), (0.5, 0.5));
        assert_eq!(obs.observation_set(), vec![0]);
    }

    #[test]
    fn periodic_gap_law() {
        let obs = ObservationModel::periodic_with_failures(2, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gaps = obs.sample_gaps(0, 100_000, &mut rng);
        assert!(gaps.iter().all(|g| g % 2 == 0 && *g > 0));
        let h = gap_histogram(&gaps);
        for (gap, p) in [(2, 0.5), (4, 0.25), (6, 0.125)] {
            assert!((h[&gap] - p).abs() < 0.01, "gap {gap}: {}", h[&gap]);
        }
    }

    #[test]
    fn periodic_rejects_zero_success() {
        assert!(matches!(
            ObservationModel::periodic_with_failures(3, 0.0),
            Err(Error::LambdaNotRecurrent(_))
        ));
        assert!(ObservationModel::periodic_with_failures(0, 0.5).is_err());
    }

    #[test]
    fn renewal_hazard_recursion() {
        assert_eq!(renewal_hazards(&[1.0]).unwrap(), vec![1.0]);
        let h = renewal_hazards(&[0.5, 0.5]).unwrap();
        assert!((h[0] - 0.5).abs() < 1e-15 && (h[1] - 1.0).abs() < 1e-15);
        // 0.3 / 0.8 = 0.375; 0.5 / (0.8 * 0.625) = 1.
        let h = renewal_hazards(&[0.2, 0.3, 0.5]).unwrap();
        for (got, want) in h.iter().zip([0.2, 0.375, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(matches!(
            renewal_hazards(&[0.5, 0.5, 0.0]),
            Err(Error::DegenerateDistribution(_))
        ));
        assert!(renewal_hazards(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn renewal_chains() {
        let point = ObservationModel::renewal(&[1.0]).unwrap();
        assert_eq!(point.chain().to_rows(), vec![vec![1.0]]);
        let uniform = ObservationModel::renewal(&[0.5, 0.5]).unwrap();
        assert_eq!(uniform.chain().to_rows(), vec![vec![0.5, 0.5], vec![1.0, 0.0]]);
        let interior_zero = ObservationModel::renewal(&[0.5, 0.0, 0.5]).unwrap();
        assert_eq!(interior_zero.chain().get(1, 0), 0.0);
        assert_eq!(interior_zero.chain().get(1, 2), 1.0);
    }

    #[test]
    fn custom_cycle_observation_times() {
        let obs = ObservationModel::custom(cycle3(), &[0, 2], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(obs.sample_observation_times(0, 9, &mut rng), vec![0, 2, 3, 5, 6, 8, 9]);
        let gaps = obs.sample_gaps(0, 6, &mut rng);
        assert_eq!(gaps, vec![2, 1, 2, 1, 2, 1]);
    }

    #[test]
    fn custom_two_cycle_has_gap_two() {
        let q = StochasticMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let obs = ObservationModel::custom(q, &[0], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(obs.sample_gaps(0, 50, &mut rng).iter().all(|&g| g == 2));
    }

    #[test]
    fn identity_chain_is_not_recurrent() {
        let q = StochasticMatrix::identity(2);
        assert!(!check_recurrent(&q, &[0]));
        assert_eq!(
            ObservationModel::custom(q, &[0], 2),
            Err(Error::LambdaNotRecurrent(vec![2]))
        );
    }

    #[test]
    fn recurrence_examples() {
        assert!(check_recurrent(&cycle3(), &[0]));
        for tau in 1..6 {
            for p in [0.1, 0.5, 1.0] {
                let obs = ObservationModel::periodic_with_failures(tau, p).unwrap();
                assert!(check_recurrent(obs.chain(), &[0]));
            }
        }
    }

    #[test]
    fn initial_sets() {
        let obs = ObservationModel::custom(cycle3(), &[0, 2], 3).unwrap();
        assert_eq!(obs.observed_at_start().states(), &[0, 2]);
        let full = ObservationModel::custom(cycle3(), &[0, 1, 2], 3).unwrap();
        assert_eq!(full.observed_at_start(), full.unrestricted());
        let per = ObservationModel::periodic_with_failures(4, 0.5).unwrap();
        assert_eq!(per.observed_at_start().states(), &[0]);
    }

    #[test]
    fn registry_builds_each_family() {
        let reg = ObservationRegistry::default();
        assert_eq!(reg.names(), vec!["custom", "periodic_with_failures", "renewal"]);
        let per = reg
            .get("periodic_with_failures")
            .unwrap()
            .build(&json!({"tau": 4, "p": 0.5}), Some(4))
            .unwrap();
        assert_eq!((per.states(), per.clock()), (5, 4));
        let ren = reg.get("renewal").unwrap().build(&json!({"mu": [0.2, 0.3, 0.5]}), None).unwrap();
        assert_eq!(ren.states(), 3);
        let cus = reg
            .get("custom")
            .unwrap()
            .build(&json!({"Q": [[0, 1, 0], [0, 0, 1], [1, 0, 0]], "lambda_set": [1, 3]}), None)
            .unwrap();
        assert_eq!(cus.observation_set(), vec![0, 2]);
        let err = reg
            .get("custom")
            .unwrap()
            .build(&json!({"Q": [[1, 0], [0, 1]], "lambda_set": [1]}), None)
            .unwrap_err();
        assert_eq!(err.field.as_deref(), Some("lambda_set"));
        assert!(reg.get("poisson").is_err());
    }

    proptest::proptest! {
        #[test]
        fn full_set_is_always_recurrent(seed in 0u64..500, dim in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..dim)
                .map(|_| {
                    let w: Vec<f64> = (0..dim).map(|_| if rng.random::<f64>() < 0.4 { 0.0 } else { rng.random() }).collect();
                    let s: f64 = w.iter().sum();
                    if s == 0.0 { let mut e = vec![0.0; dim]; e[0] = 1.0; e } else { w.iter().map(|x| x / s).collect() }
                })
                .collect();
            let q = StochasticMatrix::from_rows(&rows).unwrap();
            let all: Vec<usize> = (0..dim).collect();
            proptest::prop_assert!(check_recurrent(&q, &all));
        }
    }
}

//! Gain extraction and mean-square stability certification.
//!
//! The closed loop on the extended chain is an ordinary Markov jump linear
//! system with matrices `Gamma_chi = A_alpha + B_alpha K_{gamma,delta}`. It is
//! mean-square stable iff the second-moment operator
//! `(X_chi) -> (sum_{chi'} pbar[chi', chi] Gamma_chi' X_chi' Gamma_chi'^T)_chi`
//! has spectral radius below one.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::Serialize;

use crate::embedding::ExtendedChain;
use crate::error::{Error, Result};
use crate::lmi::{LmiProblem, LmiVariableLayout};
use crate::model::{GainSchedule, MjlsModel};
use crate::modes::EDGE_TOL;
use crate::sdpsolve::SdpSolution;

/// A radius at or above `1 - STABILITY_SLACK` is reported unstable.
pub const STABILITY_SLACK: f64 = 1e-9;

/// Largest condition number accepted for `G_{gamma,delta}`.
pub const MAX_G_CONDITION: f64 = 1e12;

/// Operators up to this dimension use the dense eigensolver under `auto`.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityCertificate {
    pub spectral_radius: f64,
    pub stable: bool,
    pub operator_dim: usize,
    pub method: String,
}

/// `K_{gamma,delta} = F_{gamma,delta} G_{gamma,delta}^{-1}`.
///
/// Pairs that no block constrains (possible when the problem keeps only part
/// of the extended chain) never act on a retained state and get a zero gain.
pub fn extract_gains(solution: &SdpSolution, problem: &LmiProblem) -> Result<GainSchedule> {
    gains_from_assignment(solution, &problem.layout, &problem.constrained_gains())
}

fn gains_from_assignment(solution: &SdpSolution, layout: &LmiVariableLayout, used: &[bool]) -> Result<GainSchedule> {
    if !solution.is_feasible() {
        return Err(Error::NotFeasible(solution.status.to_string()));
    }
    let y = &solution.assignment;
    let mut out = Vec::with_capacity(layout.modes() * layout.clock());
    for gamma in 0..layout.modes() {
        for delta in 0..layout.clock() {
            if !used[gamma * layout.clock() + delta] {
                out.push(DMatrix::zeros(layout.input_dim(), layout.state_dim()));
                continue;
            }
            let g = layout.g_matrix(y, gamma, delta);
            let f = layout.f_matrix(y, gamma, delta);
            let sv = g.singular_values();
            let smax = sv.max();
            let smin = sv.min();
            let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
            if cond > MAX_G_CONDITION {
                return Err(Error::SingularG {
                    gamma: gamma + 1,
                    delta: delta + 1,
                    cond,
                });
            }
            let ginv = g.try_inverse().ok_or(Error::SingularG {
                gamma: gamma + 1,
                delta: delta + 1,
                cond,
            })?;
            out.push(f * ginv);
        }
    }
    let mut it = out.into_iter();
    GainSchedule::from_fn(
        layout.modes(),
        layout.clock(),
        layout.input_dim(),
        layout.state_dim(),
        |_, _| it.next().expect("one gain per index"),
    )
}

/// Closed-loop matrices `Gamma_chi` for every extended state.
pub fn closed_loop_modes(
    model: &MjlsModel,
    chain: &ExtendedChain,
    gains: &GainSchedule,
) -> Result<Vec<DMatrix<f64>>> {
    let dims = chain.dims();
    if gains.modes() != dims.modes || gains.clock() != dims.clock {
        return Err(Error::DimensionMismatch(format!(
            "gain schedule is {}x{}, extended chain needs {}x{}",
            gains.modes(),
            gains.clock(),
            dims.modes,
            dims.clock
        )));
    }
    dims.states()
        .map(|chi| model.closed_loop_matrix(gains, chi.mode, chi.last, chi.clock))
        .collect()
}

/// The second-moment operator of the closed loop on a forward-closed set of
/// extended states.
#[derive(Debug, Clone)]
pub struct SecondMomentOperator<'a> {
    chain: &'a ExtendedChain,
    gammas: Vec<DMatrix<f64>>,
    states: Vec<usize>,
}

impl<'a> SecondMomentOperator<'a> {
    pub fn new(model: &MjlsModel, chain: &'a ExtendedChain, gains: &GainSchedule) -> Result<Self> {
        Ok(Self {
            chain,
            gammas: closed_loop_modes(model, chain, gains)?,
            states: (0..chain.size()).collect(),
        })
    }

    /// Restricts to `states`, which must be closed under transitions.
    pub fn restricted(mut self, states: &[usize]) -> Self {
        let mut s = states.to_vec();
        s.sort_unstable();
        s.dedup();
        self.states = s;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.gammas[0].nrows()
    }

    /// Dimension of the matrix representation, `|states| n^2`.
    pub fn dim(&self) -> usize {
        let n = self.state_dim();
        self.states.len() * n * n
    }

    pub fn gammas(&self) -> &[DMatrix<f64>] {
        &self.gammas
    }

    /// Applies the operator to a full-length tuple (entries outside the active set stay zero).
    pub fn apply(&self, x: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let n = self.state_dim();
        let mut out = vec![DMatrix::zeros(n, n); self.chain.size()];
        let pbar = self.chain.transition();
        for &from in &self.states {
            if x[from].amax() == 0.0 {
                continue;
            }
            let g = &self.gammas[from];
            let moved = g * &x[from] * g.transpose();
            for to in pbar.successors(from) {
                out[to] += &moved * pbar.get(from, to);
            }
        }
        out
    }

    /// Strongly connected pieces of the active chain with at least one internal edge.
    fn recurrent_pieces(&self) -> Vec<Vec<usize>> {
        let pbar = self.chain.transition();
        let mut graph = DiGraph::<usize, ()>::new();
        let mut node_of = BTreeMap::new();
        for &s in &self.states {
            node_of.insert(s, graph.add_node(s));
        }
        for &s in &self.states {
            for t in pbar.successors(s) {
                if let Some(&nt) = node_of.get(&t) {
                    graph.add_edge(node_of[&s], nt, ());
                }
            }
        }
        tarjan_scc(&graph)
            .into_iter()
            .map(|c| {
                let mut v: Vec<usize> = c.into_iter().map(|n| graph[n]).collect();
                v.sort_unstable();
                v
            })
            .filter(|c| c.len() > 1 || pbar.get(c[0], c[0]) > EDGE_TOL)
            .collect()
    }

    /// Dense matrix of the operator on `piece`: block `(chi, chi')` is
    /// `pbar[chi', chi] (Gamma_chi' kron Gamma_chi')` acting on column-major `vec(X)`.
    pub fn dense_matrix(&self, piece: &[usize]) -> DMatrix<f64> {
        let n = self.state_dim();
        let nn = n * n;
        let mut m = DMatrix::zeros(piece.len() * nn, piece.len() * nn);
        let krons: Vec<DMatrix<f64>> = piece.iter().map(|&s| self.gammas[s].kronecker(&self.gammas[s])).collect();
        for (col, &from) in piece.iter().enumerate() {
            for (row, &to) in piece.iter().enumerate() {
                let w = self.chain.prob(from, to);
                if w > 0.0 {
                    m.view_mut((row * nn, col * nn), (nn, nn)).copy_from(&(&krons[col] * w));
                }
            }
        }
        m
    }
}

/// A way to compute the spectral radius of a [`SecondMomentOperator`].
pub trait SpectralRadiusMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn spectral_radius(&self, op: &SecondMomentOperator<'_>) -> f64;
}

/// Dense eigenvalues of each strongly connected piece; the operator is block
/// triangular along the condensation, so its radius is the largest piece radius.
pub struct DenseEigen;

impl SpectralRadiusMethod for DenseEigen {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn spectral_radius(&self, op: &SecondMomentOperator<'_>) -> f64 {
        op.recurrent_pieces()
            .iter()
            .map(|piece| {
                let m = op.dense_matrix(piece);
                match m.clone().try_schur(f64::EPSILON, 100_000) {
                    Some(schur) => schur
                        .complex_eigenvalues()
                        .iter()
                        .map(|z| z.norm())
                        .fold(0.0, f64::max),
                    None => PowerIteration::default().radius_on(op, piece),
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Growth rate of the iterates started at the identity tuple. The operator
/// maps positive semidefinite tuples into themselves, so the growth rate of
/// an interior starting point is the spectral radius.
pub struct PowerIteration {
    pub iterations: usize,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self { iterations: 4000 }
    }
}

impl PowerIteration {
    fn radius_on(&self, op: &SecondMomentOperator<'_>, piece: &[usize]) -> f64 {
        let n = op.state_dim();
        let sub = op.clone().restricted(piece);
        let mut x = vec![DMatrix::zeros(n, n); op.chain.size()];
        for &s in piece {
            x[s] = DMatrix::identity(n, n);
        }
        let mut logs = Vec::with_capacity(self.iterations);
        for _ in 0..self.iterations {
            let mut next = sub.apply(&x);
            // Mass leaving the piece is dropped.
            for (i, m) in next.iter_mut().enumerate() {
                if piece.binary_search(&i).is_err() {
                    m.fill(0.0);
                }
            }
            let size: f64 = piece.iter().map(|&s| next[s].trace()).sum();
            if size <= 0.0 || !size.is_finite() {
                return 0.0;
            }
            logs.push(size.ln());
            for m in next.iter_mut() {
                *m /= size;
            }
            x = next;
        }
        let tail = &logs[logs.len() / 2..];
        (tail.iter().sum::<f64>() / tail.len() as f64).exp()
    }
}

impl SpectralRadiusMethod for PowerIteration {
    fn name(&self) -> &'static str {
        "power"
    }

    fn spectral_radius(&self, op: &SecondMomentOperator<'_>) -> f64 {
        op.recurrent_pieces()
            .iter()
            .map(|piece| self.radius_on(op, piece))
            .fold(0.0, f64::max)
    }
}

/// Dense below [`DENSE_LIMIT`], power iteration above.
pub struct AutoSpectral;

impl SpectralRadiusMethod for AutoSpectral {
    fn name(&self) -> &'static str {
        "auto"
    }

    fn spectral_radius(&self, op: &SecondMomentOperator<'_>) -> f64 {
        if op.dim() <= DENSE_LIMIT {
            DenseEigen.spectral_radius(op)
        } else {
            PowerIteration::default().spectral_radius(op)
        }
    }
}

pub struct SpectralRegistry {
    methods: BTreeMap<&'static str, Box<dyn SpectralRadiusMethod>>,
}

impl SpectralRegistry {
    pub fn register(&mut self, method: Box<dyn SpectralRadiusMethod>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SpectralRadiusMethod> {
        self.methods
            .get(name)
            .map(|m| m.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "spectral method",
                name: name.to_string(),
                available: self.methods.keys().copied().collect::<Vec<_>>().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }
}

impl Default for SpectralRegistry {
    fn default() -> Self {
        let mut reg = Self {
            methods: BTreeMap::new(),
        };
        reg.register(Box::new(AutoSpectral));
        reg.register(Box::new(DenseEigen));
        reg.register(Box::new(PowerIteration::default()));
        reg
    }
}

/// Certifies mean-square stability of the closed loop on the whole extended chain.
pub fn certify_mss(model: &MjlsModel, chain: &ExtendedChain, gains: &GainSchedule) -> Result<StabilityCertificate> {
    certify_with(&AutoSpectral, model, chain, gains, None)
}

/// Certification with an explicit method, optionally on a forward-closed subset.
pub fn certify_with(
    method: &dyn SpectralRadiusMethod,
    model: &MjlsModel,
    chain: &ExtendedChain,
    gains: &GainSchedule,
    states: Option<&[usize]>,
) -> Result<StabilityCertificate> {
    let mut op = SecondMomentOperator::new(model, chain, gains)?;
    if let Some(s) = states {
        op = op.restricted(s);
    }
    let rho = method.spectral_radius(&op);
    Ok(StabilityCertificate {
        spectral_radius: rho,
        stable: rho < 1.0 - STABILITY_SLACK,
        operator_dim: op.dim(),
        method: method.name().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obsproc::ObservationModel;
    use crate::lmi::assemble;
    use crate::modes::StochasticMatrix;
    use crate::sdpsolve::{solve_feasibility, SolveStatus, SolverOptions};
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64) -> (MjlsModel, ExtendedChain) {
        let model = MjlsModel::new(vec![dmatrix![a]], vec![dmatrix![0.0]], StochasticMatrix::identity(1)).unwrap();
        let obs = ObservationModel::custom(StochasticMatrix::identity(1), &[0], 1).unwrap();
        let chain = ExtendedChain::build(&model, &obs).unwrap();
        (model, chain)
    }

    fn feasible(y: Vec<f64>) -> SdpSolution {
        SdpSolution {
            assignment: y,
            margin: 1.0,
            status: SolveStatus::Feasible,
            iterations: 0,
            history: vec![],
        }
    }

    #[test]
    fn scalar_radius_is_a_squared() {
        for a in [0.0, 0.5, -0.9, 1.0, 1.5] {
            let (model, chain) = scalar(a);
            let cert = certify_mss(&model, &chain, &GainSchedule::zeros(1, 1, 1, 1)).unwrap();
            assert!((cert.spectral_radius - a * a).abs() < 1e-12, "a = {a}");
            assert_eq!(cert.stable, a.abs() < 1.0);
        }
    }

    #[test]
    fn zero_closed_loop_has_zero_radius() {
        let model = crate::model::tests::benchmark_model();
        let zero = MjlsModel::new(
            vec![DMatrix::zeros(2, 2); 3],
            vec![DMatrix::zeros(2, 1); 3],
            model.transition().clone(),
        )
        .unwrap();
        let obs = ObservationModel::periodic_with_failures(4, 0.5).unwrap().with_clock(4).unwrap();
        let chain = ExtendedChain::build(&zero, &obs).unwrap();
        let cert = certify_mss(&zero, &chain, &GainSchedule::zeros(3, 4, 1, 2)).unwrap();
        assert_eq!(cert.spectral_radius, 0.0);
        assert!(cert.stable);
        assert_eq!(cert.operator_dim, 720);
    }

    #[test]
    fn gains_from_f_and_g() {
        let layout = LmiVariableLayout::new(1, 1, 1, 1, 1);
        let y = layout.pack(|_| dmatrix![1.0], |_, _| dmatrix![2.0], |_, _| dmatrix![1.0]);
        let k = gains_from_assignment(&feasible(y), &layout, &[true; 4]).unwrap();
        assert_eq!(k.get(0, 0).unwrap(), &dmatrix![0.5]);

        let layout = LmiVariableLayout::new(2, 1, 4, 2, 2);
        let y = layout.pack(
            |_| DMatrix::identity(2, 2),
            |g, d| dmatrix![1.0 + g as f64, 0.2; -0.1, 1.0 + d as f64],
            |_, _| DMatrix::zeros(1, 2),
        );
        let k = gains_from_assignment(&feasible(y), &layout, &[true; 4]).unwrap();
        assert!(k.iter().all(|(_, _, m)| m.amax() == 0.0));
    }

    #[test]
    fn unconstrained_pairs_get_zero_gains() {
        let layout = LmiVariableLayout::new(1, 1, 2, 1, 2);
        let y = layout.pack(|_| dmatrix![1.0], |_, d| dmatrix![d as f64], |_, _| dmatrix![1.0]);
        let k = gains_from_assignment(&feasible(y), &layout, &[false, true]).unwrap();
        assert_eq!(k.get(0, 0).unwrap(), &dmatrix![0.0]);
        assert_eq!(k.get(0, 1).unwrap(), &dmatrix![1.0]);
    }

    #[test]
    fn singular_g_is_rejected() {
        let layout = LmiVariableLayout::new(2, 1, 1, 1, 1);
        let y = layout.pack(
            |_| DMatrix::identity(2, 2),
            |_, _| dmatrix![1.0, 1.0; 1.0, 1.0],
            |_, _| dmatrix![1.0, 0.0],
        );
        assert!(matches!(gains_from_assignment(&feasible(y), &layout, &[true; 4]), Err(Error::SingularG { .. })));
        let mut infeasible = feasible(vec![0.0; layout.len()]);
        infeasible.status = SolveStatus::MarginTooSmall;
        assert!(matches!(gains_from_assignment(&infeasible, &layout, &[true]), Err(Error::NotFeasible(_))));
    }

    #[test]
    fn dense_and_power_agree() {
        let model = crate::model::tests::benchmark_model();
        let obs = ObservationModel::periodic_with_failures(4, 0.5).unwrap().with_clock(4).unwrap();
        let chain = ExtendedChain::build(&model, &obs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gains = GainSchedule::from_fn(3, 4, 1, 2, |_, _| {
            dmatrix![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]
        })
        .unwrap();
        let dense = certify_with(&DenseEigen, &model, &chain, &gains, None).unwrap();
        let power = certify_with(&PowerIteration::default(), &model, &chain, &gains, None).unwrap();
        assert!(
            (dense.spectral_radius - power.spectral_radius).abs() < 1e-3 * dense.spectral_radius,
            "{} vs {}",
            dense.spectral_radius,
            power.spectral_radius
        );
    }

    #[test]
    fn dense_operator_matches_direct_application() {
        let model = crate::model::tests::benchmark_model();
        let obs = ObservationModel::renewal(&[0.3, 0.7]).unwrap();
        let chain = ExtendedChain::build(&model, &obs).unwrap();
        let gains = GainSchedule::from_fn(3, 2, 1, 2, |g, d| dmatrix![0.1 * g as f64, -0.2 * d as f64]).unwrap();
        let op = SecondMomentOperator::new(&model, &chain, &gains).unwrap();
        let all: Vec<usize> = (0..chain.size()).collect();
        let m = op.dense_matrix(&all);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<DMatrix<f64>> = (0..chain.size())
            .map(|_| DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let vecx = nalgebra::DVector::from_iterator(x.len() * 4, x.iter().flat_map(|m| m.iter().copied()));
        let out = &m * vecx;
        let direct = op.apply(&x);
        for (s, d) in direct.iter().enumerate() {
            for (k, v) in d.iter().enumerate() {
                assert!((out[s * 4 + k] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stable_scalar_synthesis_certifies() {
        let model = MjlsModel::new(vec![dmatrix![1.8]], vec![dmatrix![1.0]], StochasticMatrix::identity(1)).unwrap();
        let obs = ObservationModel::custom(StochasticMatrix::identity(1), &[0], 1).unwrap();
        let chain = ExtendedChain::build(&model, &obs).unwrap();
        let problem = assemble(&model, &chain, None).unwrap();
        let sol = solve_feasibility(&problem, &SolverOptions::default());
        let gains = extract_gains(&sol, &problem).unwrap();
        let cert = certify_mss(&model, &chain, &gains).unwrap();
        assert!(cert.stable, "{cert:?}");
    }

    #[test]
    fn registry_lists_methods() {
        let reg = SpectralRegistry::default();
        assert_eq!(reg.names(), vec!["auto", "dense", "power"]);
        assert!(reg.get("lanczos").is_err());
    }
}

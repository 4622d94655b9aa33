//! Strict feasibility of block LMIs by a log-det barrier method.
//!
//! The solver maximizes the common margin `t` in `Block_b(y) - t I >= 0`
//! over a box `|y_i| <= bound`. The box removes the homogeneity of the
//! constraints (scaling a feasible point scales the margin) and keeps the
//! margin finite. Backends implement [`FeasibilitySolver`] and are selected by
//! name through [`SolverRegistry`].

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmi::LmiProblem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Cap on Newton steps across all barrier stages.
    pub max_iterations: usize,
    /// Required margin, relative to `1 + max |y_i|`.
    pub margin_target: f64,
    /// Newton decrement `lambda^2 / 2` at which a barrier stage is centered.
    pub tolerance: f64,
    /// Stop once the duality-gap bound is below this fraction of `|t|`.
    pub gap_tolerance: f64,
    /// Multiplier applied to the barrier weight between stages.
    pub barrier_growth: f64,
    /// Box bound on each scalar variable.
    pub variable_bound: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            margin_target: 1e-7,
            tolerance: 1e-10,
            gap_tolerance: 1e-3,
            barrier_growth: 10.0,
            variable_bound: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Feasible,
    MarginTooSmall,
    IterationLimit,
    NumericalFailure,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Feasible => "feasible",
            SolveStatus::MarginTooSmall => "margin_too_small",
            SolveStatus::IterationLimit => "iteration_limit",
            SolveStatus::NumericalFailure => "numerical_failure",
        };
        f.write_str(s)
    }
}

/// One Newton step of the barrier method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub barrier_weight: f64,
    pub margin: f64,
    pub decrement: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub assignment: Vec<f64>,
    /// Smallest eigenvalue over all blocks, recomputed by dense eigendecomposition.
    pub margin: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
}

impl SdpSolution {
    pub fn is_feasible(&self) -> bool {
        self.status == SolveStatus::Feasible
    }

    /// `1 + max |y_i|`, the scale the margin target is measured against.
    pub fn scale(&self) -> f64 {
        1.0 + self.assignment.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// A backend that searches for a strictly feasible point of an [`LmiProblem`].
pub trait FeasibilitySolver: Send + Sync {
    fn name(&self) -> &'static str;

    fn solve(&self, problem: &LmiProblem, options: &SolverOptions) -> SdpSolution;
}

/// Smallest eigenvalue of every block at `y` (dense symmetric eigensolver).
pub fn block_min_eigenvalues(problem: &LmiProblem, y: &[f64]) -> Vec<f64> {
    problem
        .blocks
        .iter()
        .map(|b| {
            SymmetricEigen::new(b.evaluate(y))
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn verified_margin(problem: &LmiProblem, y: &[f64]) -> f64 {
    block_min_eigenvalues(problem, y)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Solves with the built-in barrier backend.
pub fn solve_feasibility(problem: &LmiProblem, options: &SolverOptions) -> SdpSolution {
    BarrierSolver.solve(problem, options)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BarrierSolver;

impl FeasibilitySolver for BarrierSolver {
    fn name(&self) -> &'static str {
        "barrier"
    }

    fn solve(&self, problem: &LmiProblem, options: &SolverOptions) -> SdpSolution {
        Barrier::new(problem, options).run()
    }
}

struct Barrier<'a> {
    problem: &'a LmiProblem,
    opts: &'a SolverOptions,
    nv: usize,
    /// Barrier complexity: total block dimension plus two per box constraint.
    nu: f64,
}

enum Centering {
    Centered,
    Stalled,
    Failed,
    OutOfIterations,
}

impl<'a> Barrier<'a> {
    fn new(problem: &'a LmiProblem, opts: &'a SolverOptions) -> Self {
        let nv = problem.num_vars();
        let dims: usize = problem.blocks.iter().map(|b| b.dim).sum();
        Self {
            problem,
            opts,
            nv,
            nu: (dims + 2 * nv) as f64,
        }
    }

    fn start(&self) -> Vec<f64> {
        let l = &self.problem.layout;
        let c = 0.5 * self.opts.variable_bound;
        let n = l.state_dim();
        let mut z = l.pack(
            |_| DMatrix::identity(n, n) * c,
            |_, _| DMatrix::identity(n, n) * c,
            |_, _| DMatrix::zeros(l.input_dim(), n),
        );
        let lowest = verified_margin(self.problem, &z);
        let t0 = if lowest.is_finite() { lowest - c } else { -c };
        z.push(t0);
        z
    }

    fn run(&self) -> SdpSolution {
        let mut z = self.start();
        let mut history = Vec::new();
        let mut kappa = 1.0;
        let mut iterations = 0;
        let mut failed = false;
        let target = self.opts.margin_target;
        let status = loop {
            match self.center(&mut z, kappa, &mut iterations, &mut history) {
                Centering::Centered | Centering::Stalled => {}
                Centering::Failed => {
                    failed = true;
                    break SolveStatus::NumericalFailure;
                }
                Centering::OutOfIterations => break SolveStatus::IterationLimit,
            }
            let t = z[self.nv];
            let gap = self.nu / kappa;
            if t + gap < target {
                break SolveStatus::MarginTooSmall;
            }
            if t > 0.0 && gap <= self.opts.gap_tolerance * t {
                break SolveStatus::Feasible;
            }
            kappa *= self.opts.barrier_growth;
        };
        z.truncate(self.nv);
        let margin = verified_margin(self.problem, &z);
        let scale = 1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let status = if !failed && margin > target * scale {
            SolveStatus::Feasible
        } else if status == SolveStatus::Feasible {
            SolveStatus::MarginTooSmall
        } else {
            status
        };
        SdpSolution {
            assignment: z,
            margin,
            status,
            iterations,
            history,
        }
    }

    /// Newton iterations on `-kappa t + barrier(z)` until the decrement is small.
    fn center(
        &self,
        z: &mut Vec<f64>,
        kappa: f64,
        iterations: &mut usize,
        history: &mut Vec<IterationRecord>,
    ) -> Centering {
        loop {
            if *iterations >= self.opts.max_iterations {
                return Centering::OutOfIterations;
            }
            let Some((grad, hess)) = self.derivatives(z, kappa) else {
                return Centering::Failed;
            };
            let Some(step) = newton_step(hess, &grad) else {
                return Centering::Failed;
            };
            let decrement = -grad.dot(&step);
            *iterations += 1;
            if decrement / 2.0 <= self.opts.tolerance {
                history.push(IterationRecord {
                    iteration: *iterations,
                    barrier_weight: kappa,
                    margin: z[self.nv],
                    decrement,
                    step: 0.0,
                });
                return Centering::Centered;
            }
            let f0 = self.objective(z, kappa).expect("current iterate is interior");
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a + alpha * d).collect();
                if let Some(f) = self.objective(&trial, kappa) {
                    if f <= f0 - 0.01 * alpha * decrement {
                        accepted = Some(trial);
                        break;
                    }
                }
                alpha *= 0.5;
            }
            history.push(IterationRecord {
                iteration: *iterations,
                barrier_weight: kappa,
                margin: z[self.nv],
                decrement,
                step: if accepted.is_some() { alpha } else { 0.0 },
            });
            match accepted {
                Some(next) => *z = next,
                None => return Centering::Stalled,
            }
        }
    }

    /// Barrier objective, or `None` outside the domain.
    fn objective(&self, z: &[f64], kappa: f64) -> Option<f64> {
        let t = z[self.nv];
        let u = self.opts.variable_bound;
        let mut f = -kappa * t;
        for &y in &z[..self.nv] {
            let slack = u * u - y * y;
            if slack <= 0.0 {
                return None;
            }
            f -= slack.ln();
        }
        for block in &self.problem.blocks {
            let mut s = block.evaluate(z);
            for i in 0..block.dim {
                s[(i, i)] -= t;
            }
            let chol = Cholesky::new(s)?;
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            f -= logdet;
        }
        f.is_finite().then_some(f)
    }

    fn derivatives(&self, z: &[f64], kappa: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let dim = self.nv + 1;
        let t_index = self.nv;
        let t = z[t_index];
        let u = self.opts.variable_bound;
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        grad[t_index] = -kappa;
        for (i, &y) in z[..self.nv].iter().enumerate() {
            let slack = u * u - y * y;
            grad[i] += 2.0 * y / slack;
            hess[(i, i)] += 2.0 * (u * u + y * y) / (slack * slack);
        }
        for block in &self.problem.blocks {
            let d = block.dim;
            let mut s = block.evaluate(z);
            for i in 0..d {
                s[(i, i)] -= t;
            }
            let l = Cholesky::new(s)?.unpack();
            let linv = l.solve_lower_triangular(&DMatrix::identity(d, d))?;
            let k = block.terms.len() + 1;
            // Row j holds vec(L^-1 C_j L^-T); the Hessian block is V V^T.
            let mut v = DMatrix::zeros(k, d * d);
            let mut vars = Vec::with_capacity(k);
            for (row, (var, c)) in block.terms.iter().enumerate() {
                let w = &linv * c * linv.transpose();
                for (col, x) in w.iter().enumerate() {
                    v[(row, col)] = *x;
                }
                vars.push(*var);
            }
            let wt = -(&linv * linv.transpose());
            for (col, x) in wt.iter().enumerate() {
                v[(k - 1, col)] = *x;
            }
            vars.push(t_index);
            let local = &v * v.transpose();
            for (a, &va) in vars.iter().enumerate() {
                let trace: f64 = (0..d).map(|i| v[(a, i * d + i)]).sum();
                grad[va] -= trace;
                for (b, &vb) in vars.iter().enumerate() {
                    hess[(va, vb)] += local[(a, b)];
                }
            }
        }
        Some((grad, hess))
    }
}

fn newton_step(hess: DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let rhs = -grad;
    if let Some(chol) = Cholesky::new(hess.clone()) {
        return Some(chol.solve(&rhs));
    }
    let scale = hess.diagonal().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut reg = hess;
    for i in 0..reg.nrows() {
        reg[(i, i)] += 1e-12 * scale;
    }
    Cholesky::new(reg).map(|c| c.solve(&rhs))
}

/// Feasibility backends available by name.
pub struct SolverRegistry {
    solvers: BTreeMap<&'static str, Box<dyn FeasibilitySolver>>,
}

impl SolverRegistry {
    pub fn empty() -> Self {
        Self {
            solvers: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, solver: Box<dyn FeasibilitySolver>) {
        self.solvers.insert(solver.name(), solver);
    }

    pub fn get(&self, name: &str) -> Result<&dyn FeasibilitySolver> {
        self.solvers
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "solver",
                name: name.to_string(),
                available: self.solvers.keys().copied().collect::<Vec<_>>().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.solvers.keys().copied().collect()
    }
}

impl Default for SolverRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(BarrierSolver));
        reg
    }
}

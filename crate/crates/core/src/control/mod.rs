//! Equilibrium relocation: redispatching injections so the operating point
//! moves through a certified sequence of EPs.

pub mod lp;
mod plan;
mod sopf;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{self, GridNetwork, InjectionVector};
use crate::powerflow::EquilibriumPoint;
use lp::LinearProgram;

pub use plan::{execute_plan, next_ep_on_segment, plan_emergency_control, ControlPlan, ControlStage, FirstStageCheck, SegmentStep, DEFAULT_SWITCH_TOLERANCE};
pub use sopf::{sopf_dispatch, QuadraticCost, SopfProblem, SopfResult};

/// Which injections may move, and within what range.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchProblem {
    /// 0-based bus indices.
    pub controllable: Vec<usize>,
    /// One entry per bus; entries of controllable buses are ignored.
    pub fixed_injections: Vec<f64>,
    /// `[P_min, P_max]` in `controllable` order; infinite ends allowed.
    pub bounds: Vec<(f64, f64)>,
    pub lambda: f64,
}

impl DispatchProblem {
    pub fn new(
        grid: &GridNetwork,
        controllable: Vec<usize>,
        fixed_injections: Vec<f64>,
        bounds: Vec<(f64, f64)>,
        lambda: f64,
    ) -> Result<Self> {
        let problem = Self {
            controllable,
            fixed_injections,
            bounds,
            lambda,
        };
        problem.validate(grid)?;
        Ok(problem)
    }

    /// Every bus free and unbounded.
    pub fn unconstrained(grid: &GridNetwork, lambda: f64) -> Self {
        let n = grid.n_buses();
        Self {
            controllable: (0..n).collect(),
            fixed_injections: vec![0.0; n],
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
            lambda,
        }
    }

    pub fn validate(&self, grid: &GridNetwork) -> Result<()> {
        grid.check_len(&self.fixed_injections)?;
        if self.bounds.len() != self.controllable.len() {
            return Err(Error::LengthMismatch {
                expected: self.controllable.len(),
                got: self.bounds.len(),
            });
        }
        let mut seen = vec![false; grid.n_buses()];
        for &k in &self.controllable {
            if k >= grid.n_buses() {
                return Err(Error::validation(format!("controllable bus {}", k + 1), "does not exist"));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::validation(format!("controllable bus {}", k + 1), "listed twice"));
            }
        }
        for (&k, &(lo, hi)) in self.controllable.iter().zip(&self.bounds) {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::validation(format!("bounds of bus {}", k + 1), "lower bound exceeds upper bound"));
            }
        }
        Ok(())
    }

    fn is_controllable(&self, k: usize) -> bool {
        self.controllable.contains(&k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispatchResult {
    pub injections: InjectionVector,
    /// `‖L†p‖_{E,∞}` at the optimum.
    pub norm: f64,
    /// `sin λ − norm`; nonnegative when the synchronization test passes.
    pub sync_margin: f64,
}

/// Minimizes `‖L†p‖_{E,∞}` over the controllable injections as a linear program
/// in `(p_c, t)`.
pub fn min_sync_dispatch(grid: &GridNetwork, problem: &DispatchProblem) -> Result<DispatchResult> {
    problem.validate(grid)?;
    let n = grid.n_buses();
    let nc = problem.controllable.len();
    let pinv = grid::laplacian_pseudoinverse(grid)?;
    let fixed: Vec<f64> = (0..n)
        .map(|k| if problem.is_controllable(k) { 0.0 } else { problem.fixed_injections[k] })
        .collect();
    let fixed_sum: f64 = fixed.iter().sum();

    let mut lp = LinearProgram::new(nc + 1);
    lp.cost[nc] = 1.0;
    lp.lower[nc] = 0.0;
    for (i, &(lo, hi)) in problem.bounds.iter().enumerate() {
        lp.lower[i] = lo;
        lp.upper[i] = hi;
    }
    for line in grid.lines() {
        // Row `e` of B L†; L† is symmetric.
        let row: Vec<f64> = (0..n).map(|c| pinv[(line.from, c)] - pinv[(line.to, c)]).collect();
        let offset: f64 = row.iter().zip(&fixed).map(|(r, p)| r * p).sum();
        let mut coeffs: Vec<f64> = problem.controllable.iter().map(|&k| row[k]).collect();
        coeffs.push(-1.0);
        lp.a_ub.push(coeffs.clone());
        lp.b_ub.push(-offset);
        let mut neg: Vec<f64> = coeffs[..nc].iter().map(|v| -v).collect();
        neg.push(-1.0);
        lp.a_ub.push(neg);
        lp.b_ub.push(offset);
    }
    let mut balance = vec![1.0; nc];
    balance.push(0.0);
    lp.a_eq.push(balance);
    lp.b_eq.push(-fixed_sum);

    let sol = lp.solve().map_err(|e| match e {
        Error::Infeasible(_) => Error::Infeasible("no balanced dispatch within the bounds".into()),
        other => other,
    })?;
    let mut p = fixed;
    for (i, &k) in problem.controllable.iter().enumerate() {
        p[k] = sol.x[i];
    }
    let injections = InjectionVector::rebalanced(p);
    let dc = grid::mat_vec(&pinv, injections.values());
    let norm = grid::edge_infinity_norm(grid, &dc)?;
    Ok(DispatchResult {
        injections,
        norm,
        sync_margin: problem.lambda.sin() - norm,
    })
}

/// `P_k = Σ_j a_kj sin δ*_kj`: the injections for which `ep` is an equilibrium.
pub fn dispatch_for_ep(grid: &GridNetwork, ep: &EquilibriumPoint) -> InjectionVector {
    dispatch_for_angles(grid, &ep.angles)
}

pub fn dispatch_for_angles(grid: &GridNetwork, angles: &[f64]) -> InjectionVector {
    InjectionVector::rebalanced(grid.flows(angles))
}

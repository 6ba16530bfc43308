//! Relaxed stability-constrained dispatch.
//!
//! Works in angle space: every angle vector `δ` defines injections
//! `P(δ) = flows(δ)`, so the power-flow equations hold by construction and
//! the feasible set is the convex
//! `{|δ_kj| ≤ u_kj} ∩ {F(δ₀, δ) ≤ R/4}` with `u_kj = min(λ, asin(S̄_kj / a_kj))`.
//! The generator cost is minimized by projected gradient.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::certificates::{inverse_region, InverseStabilityRegion, Membership};
use crate::dynamics::SystemState;
use crate::error::{Error, Result};
use crate::grid::{self, CouplingChoice, GridNetwork, InjectionVector};
use crate::powerflow::{gauge_to_mean_zero, EquilibriumPoint};
use crate::qp::{self, Constraint};

use super::dispatch_for_angles;

const STATIONARITY_TOL: f64 = 1e-6;
const MAX_ITERATIONS: usize = 20_000;
const BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl QuadraticCost {
    pub fn eval(&self, p: f64) -> f64 {
        (self.c2 * p + self.c1) * p + self.c0
    }

    fn slope(&self, p: f64) -> f64 {
        2.0 * self.c2 * p + self.c1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SopfProblem {
    /// One entry per generator, in ascending bus order.
    pub cost: Vec<QuadraticCost>,
    pub start: SystemState,
    pub lambda: f64,
    /// Per-line apparent-power limit; `None` leaves the line unconstrained.
    pub thermal_limits: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SopfResult {
    pub ep: EquilibriumPoint,
    pub injections: InjectionVector,
    pub cost: f64,
    pub iterations: usize,
    /// `‖δ − proj(δ − ∇c)‖_∞` at the returned point.
    pub stationarity: f64,
    pub membership: Membership,
}

/// Feasible set and its Euclidean projection.
struct FeasibleSet {
    polyhedron: Vec<Constraint>,
    ball_hessian: DMatrix<f64>,
    center: Vec<f64>,
    budget: f64,
    region: InverseStabilityRegion,
}

impl FeasibleSet {
    fn ball(&self, x: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let hd = grid::mat_vec(&self.ball_hessian, &d);
        0.5 * d.iter().zip(&hd).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `argmin ½‖x − y‖² + μ·ball(x)` over the polyhedron.
    fn penalized(&self, y: &[f64], mu: f64) -> Result<Vec<f64>> {
        let n = y.len();
        let mut h = &self.ball_hessian * mu;
        for i in 0..n {
            h[(i, i)] += 1.0;
        }
        let hc = grid::mat_vec(&self.ball_hessian, &self.center);
        let f: Vec<f64> = y.iter().zip(&hc).map(|(a, b)| -a - mu * b).collect();
        Ok(qp::solve(&h, &f, &self.polyhedron)?.x)
    }

    fn project(&self, y: &[f64]) -> Result<Vec<f64>> {
        let x0 = self.penalized(y, 0.0)?;
        if self.ball(&x0) <= self.budget {
            return Ok(x0);
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut x_hi = self.penalized(y, hi)?;
        while self.ball(&x_hi) > self.budget {
            lo = hi;
            hi *= 4.0;
            if hi > 1e16 {
                return Err(Error::Infeasible("ball and line limits do not intersect".into()));
            }
            x_hi = self.penalized(y, hi)?;
        }
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let x = self.penalized(y, mid)?;
            if self.ball(&x) > self.budget {
                lo = mid;
            } else {
                hi = mid;
                x_hi = x;
            }
        }
        Ok(x_hi)
    }
}

fn build_set(grid: &GridNetwork, problem: &SopfProblem) -> Result<FeasibleSet> {
    let region = inverse_region(grid, &problem.start, problem.lambda)?;
    if region.empty {
        return Err(Error::EmptyRegion);
    }
    let n = grid.n_buses();
    let mut polyhedron = vec![Constraint::eq(vec![1.0; n], 0.0)];
    for (line, limit) in grid.lines().iter().zip(&problem.thermal_limits) {
        let mut bound = problem.lambda;
        if let Some(s) = *limit {
            if s < line.coupling {
                bound = bound.min((s / line.coupling).asin());
            }
        }
        let mut row = vec![0.0; n];
        row[line.from] = 1.0;
        row[line.to] = -1.0;
        let neg = row.iter().map(|v| -v).collect();
        polyhedron.push(Constraint::le(row, bound));
        polyhedron.push(Constraint::le(neg, bound));
    }
    let ball_hessian = grid::weighted_laplacian(grid, CouplingChoice::Upper);
    let center = gauge_to_mean_zero(&problem.start.angles);
    let budget = region.threshold - region.kinetic_offset;

    // Nearest polyhedron point to the center in the ball metric.
    let mut h = ball_hessian.clone();
    h.add_scalar_mut(1.0 / n as f64);
    let hc = grid::mat_vec(&ball_hessian, &center);
    let f: Vec<f64> = hc.iter().map(|v| -v).collect();
    let nearest = qp::solve(&h, &f, &polyhedron)?.x;
    let set = FeasibleSet {
        polyhedron,
        ball_hessian,
        center,
        budget,
        region,
    };
    if set.ball(&nearest) > budget {
        return Err(Error::Infeasible(format!(
            "line limits exclude the stability region (closest point {:.3e} > {:.3e})",
            set.ball(&nearest),
            budget
        )));
    }
    Ok(set)
}

fn validate(grid: &GridNetwork, problem: &SopfProblem) -> Result<()> {
    if problem.cost.len() != grid.n_generators() {
        return Err(Error::LengthMismatch {
            expected: grid.n_generators(),
            got: problem.cost.len(),
        });
    }
    if problem.thermal_limits.len() != grid.n_lines() {
        return Err(Error::LengthMismatch {
            expected: grid.n_lines(),
            got: problem.thermal_limits.len(),
        });
    }
    for (slot, c) in problem.cost.iter().enumerate() {
        if c.c2.is_nan() || c.c2 < 0.0 || !c.c1.is_finite() || !c.c0.is_finite() {
            let bus = grid.generators()[slot] + 1;
            return Err(Error::validation(format!("cost of generator bus {bus}"), "needs c2 >= 0 and finite coefficients"));
        }
    }
    for (line, limit) in grid.lines().iter().zip(&problem.thermal_limits) {
        if let Some(s) = *limit {
            if s.is_nan() || s < 0.0 {
                let (a, b) = (line.from + 1, line.to + 1);
                return Err(Error::validation(format!("thermal limit of line {{{a}, {b}}}"), "must be nonnegative"));
            }
        }
    }
    grid.check_len(&problem.start.angles)?;
    Ok(())
}

fn total_cost(grid: &GridNetwork, cost: &[QuadraticCost], p: &[f64]) -> f64 {
    grid.generators().iter().zip(cost).map(|(&k, c)| c.eval(p[k])).sum()
}

fn cost_and_gradient(grid: &GridNetwork, cost: &[QuadraticCost], x: &[f64]) -> (f64, Vec<f64>) {
    let p = grid.flows(x);
    let mut slope = vec![0.0; x.len()];
    for (&k, c) in grid.generators().iter().zip(cost) {
        slope[k] = c.slope(p[k]);
    }
    let mut grad = vec![0.0; x.len()];
    for line in grid.lines() {
        let dflow = line.coupling * line.diff(x).cos();
        let w = (slope[line.from] - slope[line.to]) * dflow;
        grad[line.from] += w;
        grad[line.to] -= w;
    }
    (total_cost(grid, cost, &p), grad)
}

/// Cheapest generator dispatch whose EP lies in the inverse stability region
/// of `problem.start` and respects the line limits.
pub fn sopf_dispatch(grid: &GridNetwork, problem: &SopfProblem) -> Result<SopfResult> {
    validate(grid, problem)?;
    let set = build_set(grid, problem)?;
    let mut x = set.project(&set.center)?;
    let (mut value, mut grad) = cost_and_gradient(grid, &problem.cost, &x);
    let mut alpha: f64 = 1.0;
    let mut stationarity = f64::INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let trial: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - g).collect();
        let unit = set.project(&trial)?;
        stationarity = unit.iter().zip(&x).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        if stationarity <= STATIONARITY_TOL {
            break;
        }
        iterations += 1;
        alpha = (alpha * 2.0).min(1e6);
        let mut moved = false;
        while alpha > 1e-14 {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - alpha * g).collect();
            let cand = set.project(&trial)?;
            let decrease: f64 = grad.iter().zip(cand.iter().zip(&x)).map(|(g, (c, a))| g * (c - a)).sum();
            let (cv, cg) = cost_and_gradient(grid, &problem.cost, &cand);
            if cv <= value + 1e-4 * decrease {
                moved = cv < value || decrease < 0.0;
                x = cand;
                value = cv;
                grad = cg;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if stationarity > STATIONARITY_TOL {
        return Err(Error::NotConverged(iterations));
    }
    let injections = dispatch_for_angles(grid, &x);
    let ep = EquilibriumPoint::from_angles(grid, &x, &injections)?;
    let membership = set.region.contains(&ep.angles);
    let cost = total_cost(grid, &problem.cost, injections.values());
    Ok(SopfResult {
        ep,
        injections,
        cost,
        iterations,
        stationarity,
        membership,
    })
}

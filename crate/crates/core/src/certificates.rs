//! Energy certificates and the inverse stability region.
//!
//! For EPs whose line differences stay within `±λ` and states inside the
//! `±π/2` box, the energy function is sandwiched between two quadratics:
//!
//! ```text
//! D(δ, δ*) = g Σ a̲_kj (δ_kj − δ*_kj)² / 2
//! F(δ, δ*) = Σ_G m_k δ̇_k² / 2 + Σ ā_kj (δ_kj − δ*_kj)² / 2
//! ```
//!
//! with `g = (1 − sin λ)/(π/2 − λ)`. If `R` is the smallest `D` from a start
//! state to the boundary of the box, every EP inside the λ-box with
//! `F(start, EP) ≤ R/4` is reached from that start.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{energy, potential_energy, SystemState};
use crate::error::{Error, Result};
use crate::grid::{self, CouplingChoice, GridNetwork};
use crate::powerflow::{gauge_to_mean_zero, in_box, EquilibriumPoint};
use crate::qp::{self, Constraint};

pub const DEFAULT_LAMBDA: f64 = std::f64::consts::FRAC_PI_3;
pub const DEFAULT_RESTARTS: usize = 16;

pub fn g_constant(lambda: f64) -> Result<f64> {
    if !(0.0..FRAC_PI_2).contains(&lambda) {
        return Err(Error::Domain(format!("lambda = {lambda}")));
    }
    Ok((1.0 - lambda.sin()) / (FRAC_PI_2 - lambda))
}

/// Lower quadratic bound `D(x, y)` with the lower coupling bounds.
pub fn quad_lower(grid: &GridNetwork, lambda: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    let g = g_constant(lambda)?;
    grid.check_len(x)?;
    grid.check_len(y)?;
    Ok(g * weighted_gap(grid, CouplingChoice::Lower, x, y))
}

/// Upper quadratic bound `F(s, y)` with the upper coupling bounds.
pub fn quad_upper(grid: &GridNetwork, s: &SystemState, y: &[f64]) -> f64 {
    s.kinetic_energy(grid) + weighted_gap(grid, CouplingChoice::Upper, &s.angles, y)
}

/// `Σ w_kj (x_kj − y_kj)² / 2`.
fn weighted_gap(grid: &GridNetwork, choice: CouplingChoice, x: &[f64], y: &[f64]) -> f64 {
    grid.lines()
        .iter()
        .map(|l| {
            let d = l.diff(x) - l.diff(y);
            0.5 * l.weight(choice) * d * d
        })
        .sum()
}

/// A face `δ_kj = sign · π/2` of the box boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Face {
    pub line: usize,
    pub sign: i8,
}

impl Face {
    fn target(&self) -> f64 {
        f64::from(self.sign) * FRAC_PI_2
    }
}

/// Faces in lexicographic order of their (lower id, higher id) bus pairs,
/// positive side first.
fn faces(grid: &GridNetwork) -> Vec<Face> {
    let mut order: Vec<usize> = (0..grid.n_lines()).collect();
    order.sort_by_key(|&i| {
        let l = &grid.lines()[i];
        (l.from.min(l.to), l.from.max(l.to))
    });
    order
        .into_iter()
        .flat_map(|line| [Face { line, sign: 1 }, Face { line, sign: -1 }])
        .collect()
}

fn incidence_row(grid: &GridNetwork, line: usize) -> Vec<f64> {
    let l = &grid.lines()[line];
    let mut row = vec![0.0; grid.n_buses()];
    row[l.from] = 1.0;
    row[l.to] = -1.0;
    row
}

/// Gauge, the face equality, and `|δ_lm| ≤ π/2` on the other lines.
fn face_constraints(grid: &GridNetwork, face: Face) -> Vec<Constraint> {
    let n = grid.n_buses();
    let mut cons = vec![
        Constraint::eq(vec![1.0; n], 0.0),
        Constraint::eq(incidence_row(grid, face.line), face.target()),
    ];
    for l in 0..grid.n_lines() {
        if l == face.line {
            continue;
        }
        let row = incidence_row(grid, l);
        let neg: Vec<f64> = row.iter().map(|v| -v).collect();
        cons.push(Constraint::le(row, FRAC_PI_2));
        cons.push(Constraint::le(neg, FRAC_PI_2));
    }
    cons
}

fn within_box(grid: &GridNetwork, angles: &[f64], bound: f64, tol: f64) -> bool {
    grid.lines().iter().all(|l| l.diff(angles).abs() <= bound + tol)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryDistance {
    /// `R = min over the box boundary of D(start, ·)`; 0 when the start is
    /// not strictly inside.
    pub value: f64,
    /// Minimizing angles (mean-zero gauge); empty when `value` is 0 by fiat.
    pub point: Vec<f64>,
    pub face: Option<Face>,
    /// The start lies outside the `±π/2` box.
    pub outside: bool,
}

/// `R(δ₀)`: closed-form minimum of `D` on each face, refined by an active-set
/// QP when the face minimizer leaves the box.
pub fn min_distance_to_boundary(grid: &GridNetwork, angles: &[f64], lambda: f64) -> Result<BoundaryDistance> {
    let g = g_constant(lambda)?;
    grid.check_len(angles)?;
    let worst = in_box(grid, angles, FRAC_PI_2);
    if worst.worst_value >= FRAC_PI_2 {
        return Ok(BoundaryDistance {
            value: 0.0,
            point: Vec::new(),
            face: None,
            outside: worst.worst_value > FRAC_PI_2,
        });
    }

    let lower = grid.weights(CouplingChoice::Lower);
    let pinv = grid::pseudoinverse_from_weights(grid, &lower)?;
    let lap = grid::laplacian_from_weights(grid, &lower);
    let center = gauge_to_mean_zero(angles);
    let n = grid.n_buses();

    let mut best: Option<(f64, Vec<f64>, Face)> = None;
    for face in faces(grid) {
        let b = incidence_row(grid, face.line);
        let pb = grid::mat_vec(&pinv, &b);
        let resistance: f64 = b.iter().zip(&pb).map(|(x, y)| x * y).sum();
        let h = face.target() - grid.lines()[face.line].diff(&center);
        let mut point: Vec<f64> = center.iter().zip(&pb).map(|(c, v)| c + h * v / resistance).collect();
        if !within_box(grid, &point, FRAC_PI_2, 1e-12) {
            let mut hess = lap.clone();
            hess.add_scalar_mut(1.0 / n as f64);
            let f: Vec<f64> = grid::mat_vec(&lap, &center).iter().map(|v| -v).collect();
            match qp::solve(&hess, &f, &face_constraints(grid, face)) {
                Ok(sol) => point = sol.x,
                Err(Error::Infeasible(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        let value = g * weighted_gap(grid, CouplingChoice::Lower, &center, &point);
        if best.as_ref().is_none_or(|(v, _, _)| value < *v - 1e-12 * v.max(1.0)) {
            best = Some((value, point, face));
        }
    }
    let (value, point, face) = best.ok_or_else(|| Error::Infeasible("no boundary face is reachable".into()))?;
    Ok(BoundaryDistance {
        value,
        point,
        face: Some(face),
        outside: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Caveat {
    CenterOutsideP,
    EmptyRegion,
    EpOutsideLambda,
    EpOutsideP,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InverseStabilityRegion {
    pub center: SystemState,
    pub lambda: f64,
    pub gain: f64,
    pub radius: f64,
    pub threshold: f64,
    pub kinetic_offset: f64,
    pub lower_weights: Vec<f64>,
    pub upper_weights: Vec<f64>,
    pub empty: bool,
    pub caveats: Vec<Caveat>,
    #[serde(skip)]
    lines: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Membership {
    pub inside: bool,
    /// `λ − max |δ*_kj|`.
    pub lambda_margin: f64,
    /// `R/4 − (K₀ + Σ ā (δ₀_kj − δ*_kj)²/2)`.
    pub ball_margin: f64,
}

impl InverseStabilityRegion {
    /// `K₀ + Σ ā (δ₀_kj − δ*_kj)²/2`, i.e. `F(center, ep)`.
    pub fn ball_value(&self, ep_angles: &[f64]) -> f64 {
        let c = &self.center.angles;
        self.kinetic_offset
            + self
                .lines
                .iter()
                .zip(&self.upper_weights)
                .map(|(&(k, j), w)| {
                    let d = (c[k] - c[j]) - (ep_angles[k] - ep_angles[j]);
                    0.5 * w * d * d
                })
                .sum::<f64>()
    }

    pub fn contains(&self, ep_angles: &[f64]) -> Membership {
        let worst = self
            .lines
            .iter()
            .map(|&(k, j)| (ep_angles[k] - ep_angles[j]).abs())
            .fold(0.0_f64, f64::max);
        let lambda_margin = self.lambda - worst;
        let ball_margin = self.threshold - self.ball_value(ep_angles);
        Membership {
            inside: !self.empty && lambda_margin >= 0.0 && ball_margin >= 0.0,
            lambda_margin,
            ball_margin,
        }
    }

    pub fn report(&self) -> RegionReport {
        RegionReport {
            lambda: self.lambda,
            g: self.gain,
            r: self.radius,
            threshold: self.threshold,
            kinetic_offset: self.kinetic_offset,
            empty: self.empty,
            caveats: self.caveats.clone(),
        }
    }
}

/// JSON shape of the `region` command output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionReport {
    pub lambda: f64,
    pub g: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub threshold: f64,
    pub kinetic_offset: f64,
    pub empty: bool,
    pub caveats: Vec<Caveat>,
}

pub fn inverse_region(grid: &GridNetwork, start: &SystemState, lambda: f64) -> Result<InverseStabilityRegion> {
    if !(lambda > 0.0 && lambda < FRAC_PI_2) {
        return Err(Error::Domain(format!("lambda = {lambda}")));
    }
    let gain = g_constant(lambda)?;
    let boundary = min_distance_to_boundary(grid, &start.angles, lambda)?;
    let kinetic_offset = start.kinetic_energy(grid);
    let threshold = boundary.value / 4.0;
    let mut caveats = Vec::new();
    if boundary.outside {
        caveats.push(Caveat::CenterOutsideP);
    }
    let empty = kinetic_offset >= threshold;
    if empty {
        caveats.push(Caveat::EmptyRegion);
    }
    Ok(InverseStabilityRegion {
        center: start.clone(),
        lambda,
        gain,
        radius: boundary.value,
        threshold,
        kinetic_offset,
        lower_weights: grid.weights(CouplingChoice::Lower),
        upper_weights: grid.weights(CouplingChoice::Upper),
        empty,
        caveats,
        lines: grid.lines().iter().map(|l| (l.from, l.to)).collect(),
    })
}

pub fn region_contains(region: &InverseStabilityRegion, ep: &EquilibriumPoint) -> Membership {
    region.contains(&ep.angles)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EMinEstimate {
    pub value: f64,
    /// Zero-frequency boundary state attaining `value` (mean-zero gauge).
    pub point: Vec<f64>,
    pub face: Face,
}

/// Best value and point on one face, `None` when the face is unreachable.
type FaceMinimum = Option<(f64, Vec<f64>)>;

/// Smallest energy found on the box boundary: multi-start projected Newton on
/// every face. Inside the box the potential is convex, so each face is a convex
/// problem and the starts mostly guard against stalls.
pub fn e_min_oracle(grid: &GridNetwork, ep: &EquilibriumPoint, restarts: usize) -> Result<EMinEstimate> {
    grid.check_len(&ep.angles)?;
    let star = gauge_to_mean_zero(&ep.angles);
    let restarts = restarts.max(1);
    let per_face: Vec<Result<FaceMinimum>> = faces(grid)
        .par_iter()
        .map(|&face| minimize_on_face(grid, &star, face, restarts))
        .collect();
    let mut best: Option<EMinEstimate> = None;
    for (face, r) in faces(grid).into_iter().zip(per_face) {
        if let Some((value, point)) = r? {
            if best.as_ref().is_none_or(|b| value < b.value) {
                best = Some(EMinEstimate { value, point, face });
            }
        }
    }
    best.ok_or_else(|| Error::Infeasible("no boundary face is reachable".into()))
}

fn minimize_on_face(grid: &GridNetwork, star: &[f64], face: Face, restarts: usize) -> Result<FaceMinimum> {
    let n = grid.n_buses();
    let cons = face_constraints(grid, face);
    let mut identity = DMatrix::identity(n, n);
    identity.add_scalar_mut(1.0 / n as f64);
    let seed = 0x9e37_79b9_7f4a_7c15_u64 ^ ((face.line as u64) << 1) ^ u64::from(face.sign > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..restarts {
        let mut y = star.to_vec();
        if r > 0 {
            y.iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0));
        }
        let f: Vec<f64> = y.iter().map(|v| -v).collect();
        let start = match qp::solve(&identity, &f, &cons) {
            Ok(s) => s.x,
            Err(Error::Infeasible(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let (value, point) = face_newton(grid, star, start, &cons)?;
        if best.as_ref().is_none_or(|(v, _)| value < *v) {
            best = Some((value, point));
        }
    }
    Ok(best)
}

/// Projected Newton: each step minimizes the local quadratic model over the face.
fn face_newton(grid: &GridNetwork, star: &[f64], mut u: Vec<f64>, cons: &[Constraint]) -> Result<(f64, Vec<f64>)> {
    let n = grid.n_buses();
    let reg = 1e-8 * grid.lines().iter().map(|l| l.coupling).sum::<f64>();
    let mut value = potential_energy(grid, &u, star);
    for _ in 0..100 {
        let mut grad = vec![0.0; n];
        let mut weights = Vec::with_capacity(grid.n_lines());
        for l in grid.lines() {
            let x = l.diff(&u);
            let gx = l.coupling * (x.sin() - l.diff(star).sin());
            grad[l.from] += gx;
            grad[l.to] -= gx;
            weights.push(l.coupling * x.cos().max(0.0));
        }
        let mut hess = grid::laplacian_from_weights(grid, &weights);
        hess.add_scalar_mut(1.0 / n as f64);
        for i in 0..n {
            hess[(i, i)] += reg;
        }
        let hu = grid::mat_vec(&hess, &u);
        let f: Vec<f64> = grad.iter().zip(&hu).map(|(g, h)| g - h).collect();
        let v = qp::solve(&hess, &f, cons)?.x;
        let d: Vec<f64> = v.iter().zip(&u).map(|(a, b)| a - b).collect();
        if d.iter().all(|x| x.abs() < 1e-12) {
            break;
        }
        let slope: f64 = grad.iter().zip(&d).map(|(g, x)| g * x).sum();
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-10 {
            let trial: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            let tv = potential_energy(grid, &trial, star);
            if tv <= value + 1e-4 * alpha * slope.min(0.0) {
                accepted = Some((tv, trial));
                break;
            }
            alpha *= 0.5;
        }
        let Some((tv, trial)) = accepted else { break };
        let improvement = value - tv;
        value = tv;
        u = trial;
        if improvement.abs() <= 1e-15 * value.abs().max(1.0) {
            break;
        }
    }
    Ok((value, u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CertificateMethod {
    Classical,
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub method: CertificateMethod,
    pub passes: bool,
    pub energy_at_start: f64,
    pub level: f64,
    pub margin: f64,
    pub caveats: Vec<Caveat>,
}

/// `E(s0, ep) < E_min(ep)` with `s0` inside the box.
pub fn classical_certificate(grid: &GridNetwork, s0: &SystemState, ep: &EquilibriumPoint) -> Result<CertificateReport> {
    classical_certificate_with(grid, s0, ep, DEFAULT_RESTARTS)
}

pub fn classical_certificate_with(
    grid: &GridNetwork,
    s0: &SystemState,
    ep: &EquilibriumPoint,
    restarts: usize,
) -> Result<CertificateReport> {
    let mut caveats = Vec::new();
    if !in_box(grid, &s0.angles, FRAC_PI_2).inside {
        caveats.push(Caveat::CenterOutsideP);
    }
    if in_box(grid, &ep.angles, FRAC_PI_2).worst_value >= FRAC_PI_2 {
        caveats.push(Caveat::EpOutsideP);
    }
    let energy_at_start = energy(grid, s0, ep);
    let level = if caveats.contains(&Caveat::EpOutsideP) {
        0.0
    } else {
        e_min_oracle(grid, ep, restarts)?.value
    };
    let margin = level - energy_at_start;
    Ok(CertificateReport {
        method: CertificateMethod::Classical,
        passes: margin > 0.0 && caveats.is_empty(),
        energy_at_start,
        level,
        margin,
        caveats,
    })
}

/// `ep ∈ Λ ∩ {F(s0, ·) ≤ R(s0)/4}` with `s0` inside the box.
pub fn inverse_certificate(
    grid: &GridNetwork,
    s0: &SystemState,
    ep: &EquilibriumPoint,
    lambda: f64,
) -> Result<CertificateReport> {
    let region = inverse_region(grid, s0, lambda)?;
    let membership = region.contains(&ep.angles);
    let mut caveats = region.caveats.clone();
    if membership.lambda_margin < 0.0 {
        caveats.push(Caveat::EpOutsideLambda);
    }
    let energy_at_start = quad_upper(grid, s0, &ep.angles);
    let margin = region.threshold - energy_at_start;
    Ok(CertificateReport {
        method: CertificateMethod::Inverse,
        passes: membership.inside && margin > 0.0 && caveats.is_empty(),
        energy_at_start,
        level: region.threshold,
        margin,
        caveats,
    })
}

//! Equilibrium points of the lossless network: `Σ_j a_kj sin δ_kj = P_k`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{self, GridNetwork, InjectionVector};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 50,
            max_halvings: 10,
        }
    }
}

/// Angle vector solving the power-flow equations, reference bus pinned at 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumPoint {
    pub angles: Vec<f64>,
    /// Max-norm of the power mismatch at `angles`.
    pub residual: f64,
}

impl EquilibriumPoint {
    /// Wraps an angle vector, re-gauged so bus 1 sits at 0, and records its
    /// mismatch against `p`.
    pub fn from_angles(grid: &GridNetwork, angles: &[f64], p: &InjectionVector) -> Result<Self> {
        grid.check_len(angles)?;
        grid.check_len(p.values())?;
        let angles = gauge_to_reference(angles);
        let residual = mismatch(grid, &angles, p.values())
            .iter()
            .fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(Self { angles, residual })
    }

    pub fn in_box(&self, grid: &GridNetwork, bound: f64) -> BoxCheck {
        in_box(grid, &self.angles, bound)
    }

    /// All line angle differences within `±π/2`.
    pub fn in_p(&self, grid: &GridNetwork) -> bool {
        self.in_box(grid, FRAC_PI_2).inside
    }

    pub fn in_lambda(&self, grid: &GridNetwork, lambda: f64) -> bool {
        self.in_box(grid, lambda).inside
    }
}

/// Shifts `x` so its first entry is zero.
pub fn gauge_to_reference(x: &[f64]) -> Vec<f64> {
    let r = x[0];
    x.iter().map(|v| v - r).collect()
}

/// Shifts `x` to zero mean.
pub fn gauge_to_mean_zero(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

fn mismatch(grid: &GridNetwork, angles: &[f64], p: &[f64]) -> Vec<f64> {
    let mut f = grid.flows(angles);
    f.iter_mut().zip(p).for_each(|(fk, pk)| *fk -= pk);
    f
}

/// Cos-weighted Laplacian with the reference row and column removed.
fn reduced_jacobian(grid: &GridNetwork, angles: &[f64]) -> DMatrix<f64> {
    let n = grid.n_buses();
    let mut jac = DMatrix::zeros(n - 1, n - 1);
    for line in grid.lines() {
        let w = line.coupling * line.diff(angles).cos();
        let (k, j) = (line.from, line.to);
        if k > 0 {
            jac[(k - 1, k - 1)] += w;
        }
        if j > 0 {
            jac[(j - 1, j - 1)] += w;
        }
        if k > 0 && j > 0 {
            jac[(k - 1, j - 1)] -= w;
            jac[(j - 1, k - 1)] -= w;
        }
    }
    jac
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Damped Newton on the reduced system. The default guess is `L†p`.
pub fn solve_equilibrium(grid: &GridNetwork, p: &InjectionVector, guess: Option<&[f64]>) -> Result<EquilibriumPoint> {
    solve_equilibrium_with(grid, p, guess, NewtonOptions::default())
}

pub fn solve_equilibrium_with(
    grid: &GridNetwork,
    p: &InjectionVector,
    guess: Option<&[f64]>,
    opts: NewtonOptions,
) -> Result<EquilibriumPoint> {
    grid.check_len(p.values())?;
    let mut angles = match guess {
        Some(g) => {
            grid.check_len(g)?;
            gauge_to_reference(g)
        }
        None => gauge_to_reference(&dc_approx_ep(grid, p)?),
    };
    let n = grid.n_buses();
    let degree_scale = grid.lines().iter().map(|l| l.coupling).sum::<f64>();
    let mut res = mismatch(grid, &angles, p.values());
    let mut res_norm = norm2(&res[1..]);

    for iteration in 0..=opts.max_iterations {
        if norm_inf(&res) <= opts.tolerance {
            return Ok(EquilibriumPoint {
                angles,
                residual: norm_inf(&res),
            });
        }
        if iteration == opts.max_iterations {
            break;
        }
        let jac = reduced_jacobian(grid, &angles);
        let rhs = DVector::from_iterator(n - 1, res[1..].iter().map(|r| -r));
        let lu = jac.lu();
        let min_pivot = lu.u().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if min_pivot <= 1e-13 * degree_scale {
            return Err(Error::SingularJacobian { iteration });
        }
        let step = lu
            .solve(&rhs)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularJacobian { iteration })?;

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = std::iter::once(0.0)
                .chain(angles[1..].iter().zip(step.iter()).map(|(a, s)| a + scale * s))
                .collect();
            let trial_res = mismatch(grid, &trial, p.values());
            let trial_norm = norm2(&trial_res[1..]);
            if trial_norm < res_norm {
                angles = trial;
                res = trial_res;
                res_norm = trial_norm;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                iterations: iteration + 1,
                residual: norm_inf(&res),
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iterations,
        residual: norm_inf(&res),
    })
}

/// `L†p` in the mean-zero gauge.
pub fn dc_approx_ep(grid: &GridNetwork, p: &InjectionVector) -> Result<Vec<f64>> {
    grid.check_len(p.values())?;
    let pinv = grid::laplacian_pseudoinverse(grid)?;
    Ok(grid::mat_vec(&pinv, p.values()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxCheck {
    pub inside: bool,
    /// Index of the line with the largest `|δ_kj|`.
    pub worst_line: Option<usize>,
    pub worst_value: f64,
    /// `bound - max |δ_kj|`; negative when outside.
    pub margin: f64,
}

/// Is `|δ_kj| ≤ bound` on every line?
pub fn in_box(grid: &GridNetwork, angles: &[f64], bound: f64) -> BoxCheck {
    let mut worst_line = None;
    let mut worst_value = 0.0;
    for (i, line) in grid.lines().iter().enumerate() {
        let v = line.diff(angles).abs();
        if worst_line.is_none() || v > worst_value {
            worst_line = Some(i);
            worst_value = v;
        }
    }
    BoxCheck {
        inside: worst_value <= bound,
        worst_line,
        worst_value,
        margin: bound - worst_value,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyncCheckReport {
    pub norm_value: f64,
    pub threshold: f64,
    pub passes: bool,
    /// Whether a Newton EP seeded at `L†p` was found inside the λ-box; `None`
    /// when Newton failed.
    pub ep_in_lambda: Option<bool>,
}

/// `‖L†p‖_{E,∞} ≤ sin λ`, cross-checked by solving for the EP.
pub fn check_sync_condition(grid: &GridNetwork, p: &InjectionVector, lambda: f64) -> Result<SyncCheckReport> {
    if !(lambda > 0.0 && lambda < FRAC_PI_2) {
        return Err(Error::Domain(format!("lambda = {lambda}")));
    }
    let dc = dc_approx_ep(grid, p)?;
    let norm_value = grid::edge_infinity_norm(grid, &dc)?;
    let threshold = lambda.sin();
    let ep_in_lambda = solve_equilibrium(grid, p, Some(&dc))
        .ok()
        .map(|ep| ep.in_lambda(grid, lambda));
    Ok(SyncCheckReport {
        norm_value,
        threshold,
        passes: norm_value <= threshold,
        ep_in_lambda,
    })
}

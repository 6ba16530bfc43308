//! Batch screening of injection scenarios against a fixed initial state.

use rayon::prelude::*;
use serde::Serialize;

use crate::certificates::{inverse_region, InverseStabilityRegion};
use crate::dynamics::SystemState;
use crate::error::{Error, Result};
use crate::grid::{GridNetwork, InjectionVector};
use crate::powerflow::{check_sync_condition, dc_approx_ep, solve_equilibrium};

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenScenario {
    pub name: String,
    pub injections: InjectionVector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenResult {
    pub name: String,
    pub norm: f64,
    pub threshold: f64,
    pub sync_pass: bool,
    pub ep_found: bool,
    pub ep_in_lambda: Option<bool>,
    pub lambda_margin: Option<f64>,
    pub ball_margin: Option<f64>,
    pub in_region: Option<bool>,
    /// Synchronization test passed and the EP lies in the inverse stability
    /// region of the initial state.
    pub passes: bool,
    pub error: Option<String>,
}

fn screen_one(grid: &GridNetwork, region: &InverseStabilityRegion, scenario: &ScreenScenario) -> Result<ScreenResult> {
    let sync = check_sync_condition(grid, &scenario.injections, region.lambda)?;
    let guess = dc_approx_ep(grid, &scenario.injections)?;
    let mut result = ScreenResult {
        name: scenario.name.clone(),
        norm: sync.norm_value,
        threshold: sync.threshold,
        sync_pass: sync.passes,
        ep_found: false,
        ep_in_lambda: None,
        lambda_margin: None,
        ball_margin: None,
        in_region: None,
        passes: false,
        error: None,
    };
    match solve_equilibrium(grid, &scenario.injections, Some(&guess)) {
        Ok(ep) => {
            let m = region.contains(&ep.angles);
            result.ep_found = true;
            result.ep_in_lambda = Some(m.lambda_margin >= 0.0);
            result.lambda_margin = Some(m.lambda_margin);
            result.ball_margin = Some(m.ball_margin);
            result.in_region = Some(m.inside);
            result.passes = sync.passes && m.inside;
        }
        Err(e @ (Error::NonConvergence { .. } | Error::SingularJacobian { .. })) => {
            result.error = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok(result)
}

/// Screens every scenario independently; results come back in input order.
/// `workers = None` uses the global thread pool.
pub fn screen(
    grid: &GridNetwork,
    start: &SystemState,
    lambda: f64,
    scenarios: &[ScreenScenario],
    workers: Option<usize>,
) -> Result<Vec<ScreenResult>> {
    for s in scenarios {
        grid.check_len(s.injections.values())?;
    }
    let region = inverse_region(grid, start, lambda)?;
    let run = || -> Result<Vec<ScreenResult>> {
        scenarios.par_iter().map(|s| screen_one(grid, &region, s)).collect()
    };
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Domain(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

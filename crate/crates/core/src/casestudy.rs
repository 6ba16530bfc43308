//! Bundled 3-machine 9-bus fixture and the emergency-control study run on it.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::{execute_plan, min_sync_dispatch, plan_emergency_control, ControlPlan, DispatchProblem, DispatchResult};
use crate::dynamics::{angle_distance, simulate, SimOptions, SystemState, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{self, GridNetwork, InjectionVector};
use crate::io::{injections_from_records, InjectionRecord, StateRecord};
use crate::powerflow::{dc_approx_ep, gauge_to_mean_zero, in_box, solve_equilibrium, EquilibriumPoint};
use crate::sampling::rng_from_seed;
use crate::screening::{screen, ScreenResult, ScreenScenario};

pub const GRID_JSON: &str = include_str!("../fixtures/nine_bus_grid.json");
pub const INJECTIONS_JSON: &str = include_str!("../fixtures/nine_bus_injections.json");
pub const CASE_JSON: &str = include_str!("../fixtures/nine_bus_case.json");

pub const MAX_STAGES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceValues {
    pub min_sync_norm: f64,
    /// Injections of buses 1..=6 after the min-sync redispatch.
    pub optimized_injections: Vec<f64>,
    pub dc_approx_ep: Vec<f64>,
    pub desired_ep: Vec<f64>,
    pub segment_coefficient: f64,
    pub separating_lines: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub fault_cleared_state: StateRecord,
    pub tripped_line: [usize; 2],
    pub lambda: f64,
    pub lambda_note: String,
    pub controllable: Vec<usize>,
    pub dispatch_bounds: (f64, f64),
    pub reference: ReferenceValues,
}

#[derive(Debug, Clone)]
pub struct NineBusCase {
    pub grid: GridNetwork,
    /// Post-fault injections.
    pub injections: InjectionVector,
    pub fault_cleared: SystemState,
    pub lambda: f64,
    pub lambda_note: String,
    pub dispatch: DispatchProblem,
    pub reference: ReferenceValues,
}

impl NineBusCase {
    pub fn load() -> Result<Self> {
        let grid = grid::parse_grid(GRID_JSON)?;
        let records: Vec<InjectionRecord> =
            serde_json::from_str(INJECTIONS_JSON).map_err(|e| Error::Parse(format!("injection fixture: {e}")))?;
        let injections = injections_from_records(&grid, &records)?;
        let case: CaseFile = serde_json::from_str(CASE_JSON).map_err(|e| Error::Parse(format!("case fixture: {e}")))?;
        let s = case.fault_cleared_state;
        let fault_cleared = SystemState::new(&grid, s.angles, s.gen_frequencies)?;
        let controllable: Vec<usize> = case.controllable.iter().map(|id| id - 1).collect();
        let bounds = vec![case.dispatch_bounds; controllable.len()];
        let dispatch = DispatchProblem::new(&grid, controllable, injections.values().to_vec(), bounds, case.lambda)?;
        Ok(Self {
            grid,
            injections,
            fault_cleared,
            lambda: case.lambda,
            lambda_note: case.lambda_note,
            dispatch,
            reference: case.reference,
        })
    }

    /// Published first-stage injections for the controllable buses, with the
    /// fixed loads; rebalanced because the rounded values miss zero by ~1e-4.
    pub fn reference_optimized_injections(&self) -> InjectionVector {
        let mut p = self.injections.values().to_vec();
        for (&k, &v) in self.dispatch.controllable.iter().zip(&self.reference.optimized_injections) {
            p[k] = v;
        }
        InjectionVector::rebalanced(p)
    }

    /// Newton EP of the post-fault injections, seeded at `L†p`.
    pub fn desired_ep(&self) -> Result<EquilibriumPoint> {
        solve_equilibrium(&self.grid, &self.injections, None)
    }
}

/// Largest deviation of angle differences to bus 1.
pub fn max_relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - a[0]) - (y - b[0])).abs())
        .fold(0.0, f64::max)
}

/// Largest componentwise deviation after removing each vector's mean.
pub fn max_mean_zero_deviation(a: &[f64], b: &[f64]) -> f64 {
    gauge_to_mean_zero(a)
        .iter()
        .zip(gauge_to_mean_zero(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub passes: bool,
}

impl Check {
    fn within(name: &str, value: f64, reference: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            reference,
            tolerance,
            passes: (value - reference).abs() <= tolerance,
        }
    }

    fn below(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            reference: limit,
            tolerance: 0.0,
            passes: value < limit,
        }
    }

    fn flag(name: &str, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: f64::from(u8::from(ok)),
            reference: 1.0,
            tolerance: 0.0,
            passes: ok,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CaseStudyOptions {
    pub skip_control: bool,
    pub seed: u64,
    pub step: f64,
    pub uncontrolled_horizon: f64,
    pub horizon_per_stage: f64,
    /// Size of the random-fluctuation screening batch (0 disables it).
    pub fluctuation_scenarios: usize,
}

impl Default for CaseStudyOptions {
    fn default() -> Self {
        Self {
            skip_control: false,
            seed: 0,
            step: 1e-3,
            uncontrolled_horizon: 10.0,
            horizon_per_stage: 40.0,
            fluctuation_scenarios: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlledRun {
    pub dispatch: DispatchResult,
    pub reference_dc_approx: Vec<f64>,
    pub plan: ControlPlan,
    pub trajectory: Trajectory,
    pub final_distance: f64,
    pub fluctuation: Vec<ScreenResult>,
}

#[derive(Debug, Clone)]
pub struct CaseStudyReport {
    pub lambda: f64,
    pub lambda_note: String,
    pub desired: EquilibriumPoint,
    pub uncontrolled: Trajectory,
    pub controlled: Option<ControlledRun>,
    pub checks: Vec<Check>,
}

impl CaseStudyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passes)
    }
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    lambda: f64,
    lambda_note: &'a str,
    checks: &'a [Check],
    all_pass: bool,
    separation_events: Vec<[usize; 2]>,
    stages: Option<usize>,
    segment_coefficients: Option<Vec<Option<f64>>>,
}

impl CaseStudyReport {
    pub fn summary_json(&self) -> Result<String> {
        let plan = self.controlled.as_ref().map(|c| &c.plan);
        crate::io::to_json(&SummaryJson {
            lambda: self.lambda,
            lambda_note: &self.lambda_note,
            checks: &self.checks,
            all_pass: self.all_pass(),
            separation_events: self.uncontrolled.separation_lines(),
            stages: plan.map(|p| p.stages.len()),
            segment_coefficients: plan.map(|p| p.stages.iter().map(|s| s.t).collect()),
        })
    }
}

/// ±10% per-bus fluctuations of the first-stage injections, screened from the
/// first-stage EP.
pub fn fluctuation_batch(case: &NineBusCase, base: &InjectionVector, seed: u64, n: usize) -> Vec<ScreenScenario> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|i| {
            let values = base.values().iter().map(|v| v * (1.0 + rng.random_range(-0.1..0.1))).collect();
            ScreenScenario {
                name: format!("fluctuation_{}", i + 1),
                injections: InjectionVector::rebalanced(values),
            }
        })
        .filter(|s| s.injections.len() == case.grid.n_buses())
        .collect()
}

pub fn run_case_study(opts: &CaseStudyOptions) -> Result<CaseStudyReport> {
    let case = NineBusCase::load()?;
    let g = &case.grid;
    let reference = &case.reference;
    let mut checks = Vec::new();

    let desired = case.desired_ep()?;
    checks.push(Check::within(
        "desired_ep_max_deviation",
        max_relative_deviation(&desired.angles, &reference.desired_ep),
        0.0,
        1e-3,
    ));
    checks.push(Check::flag(
        "fault_cleared_state_outside_box",
        !in_box(g, &case.fault_cleared.angles, FRAC_PI_2).inside,
    ));

    let sim = SimOptions::default()
        .with_step(opts.step)
        .with_horizon(opts.uncontrolled_horizon);
    let uncontrolled = simulate(g, &case.injections, &case.fault_cleared, sim)?;
    let separated = uncontrolled.separation_lines();
    for pair in &reference.separating_lines {
        let hit = separated.iter().any(|l| (l[0] == pair[0] && l[1] == pair[1]) || (l[0] == pair[1] && l[1] == pair[0]));
        checks.push(Check::flag(&format!("separation_{}_{}", pair[0], pair[1]), hit));
    }

    let mut report = CaseStudyReport {
        lambda: case.lambda,
        lambda_note: case.lambda_note.clone(),
        desired: desired.clone(),
        uncontrolled,
        controlled: None,
        checks,
    };
    if opts.skip_control {
        return Ok(report);
    }

    let dispatch = min_sync_dispatch(g, &case.dispatch)?;
    report
        .checks
        .push(Check::within("min_sync_norm", dispatch.norm, reference.min_sync_norm, 2e-3));
    report.checks.push(Check::below("min_sync_norm_below_sin_pi_89", dispatch.norm, (PI / 89.0).sin()));
    let reference_dc_approx = dc_approx_ep(g, &case.reference_optimized_injections())?;
    report.checks.push(Check::within(
        "dc_approx_max_deviation",
        max_mean_zero_deviation(&reference_dc_approx, &reference.dc_approx_ep),
        0.0,
        1e-3,
    ));

    let plan = plan_emergency_control(g, &case.fault_cleared, &desired, case.lambda, &case.dispatch, MAX_STAGES)?;
    let t2 = plan.stages.get(1).and_then(|s| s.t).unwrap_or(f64::NAN);
    report
        .checks
        .push(Check::within("segment_coefficient", t2, reference.segment_coefficient, 0.02));
    report.checks.push(Check::within("stage_count", plan.stages.len() as f64, 3.0, 0.0));

    let trajectory = execute_plan(g, &case.fault_cleared, &plan, opts.step, opts.horizon_per_stage)?;
    let final_state = trajectory.final_state().expect("trajectory has samples");
    let final_distance = angle_distance(&final_state.angles, &desired.angles);
    report.checks.push(Check::below("final_distance_to_desired", final_distance, 1e-2));

    let fluctuation = if opts.fluctuation_scenarios > 0 {
        let batch = fluctuation_batch(&case, &dispatch.injections, opts.seed, opts.fluctuation_scenarios);
        let start = SystemState::from_ep(g, &plan.stages[0].ep);
        screen(g, &start, case.lambda, &batch, None)?
    } else {
        Vec::new()
    };

    report.controlled = Some(ControlledRun {
        dispatch,
        reference_dc_approx,
        plan,
        trajectory,
        final_distance,
        fluctuation,
    });
    Ok(report)
}

use serde::Serialize;

use crate::certificates::{inverse_certificate, inverse_region, InverseStabilityRegion};
use crate::dynamics::{angle_distance, simulate, simulate_staged, Event, EventKind, SimOptions, SystemState, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{GridNetwork, InjectionVector};
use crate::powerflow::{dc_approx_ep, in_box, solve_equilibrium, EquilibriumPoint};

use super::{dispatch_for_angles, dispatch_for_ep, min_sync_dispatch, DispatchProblem};

pub const DEFAULT_SWITCH_TOLERANCE: f64 = 1e-2;

/// Simulated time allowed for the fallback check of the first stage.
const FALLBACK_HORIZON: f64 = 60.0;
const FALLBACK_STEP: f64 = 1e-3;

/// Relative pull-back of the segment coefficient so each new EP sits strictly
/// inside the previous region rather than on its boundary.
const BACKOFF: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlStage {
    pub ep: EquilibriumPoint,
    pub injections: InjectionVector,
    /// Segment coefficient that produced this stage; `None` for the first.
    pub t: Option<f64>,
}

/// How the move from the initial state to the first stage was justified.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FirstStageCheck {
    Certificate { margin: f64 },
    /// The initial state lies outside the `±π/2` box or the certificate
    /// failed; convergence was observed by simulation instead.
    Simulation { horizon: f64, final_distance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlPlan {
    pub stages: Vec<ControlStage>,
    pub desired: EquilibriumPoint,
    pub lambda: f64,
    pub switch_tolerance: f64,
    pub first_stage: FirstStageCheck,
    /// `L†p` of the first-stage injections (mean-zero gauge); empty when the
    /// plan goes straight to the desired EP.
    pub dc_approx: Vec<f64>,
    /// Optimal `‖L†p‖_{E,∞}` of the first-stage dispatch.
    pub min_sync_norm: Option<f64>,
}

impl ControlPlan {
    pub fn distances(&self) -> Vec<f64> {
        self.stages
            .iter()
            .map(|s| angle_distance(&s.ep.angles, &self.desired.angles))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentStep {
    pub next: Vec<f64>,
    pub t: f64,
    /// Largest coefficient allowed by the `F`-ball.
    pub t_ball: f64,
    /// Largest coefficient keeping every line within `±λ`.
    pub t_lambda: f64,
}

/// Furthest point on the segment from the region center toward `target` that
/// the region still admits.
pub fn next_ep_on_segment(grid: &GridNetwork, region: &InverseStabilityRegion, target: &[f64]) -> Result<SegmentStep> {
    if region.empty {
        return Err(Error::EmptyRegion);
    }
    grid.check_len(target)?;
    let from = &region.center.angles;
    let mut quad = 0.0;
    let mut t_lambda = f64::INFINITY;
    for (line, w) in grid.lines().iter().zip(&region.upper_weights) {
        let x = line.diff(from);
        let delta = line.diff(target) - x;
        quad += 0.5 * w * delta * delta;
        if delta > 0.0 {
            t_lambda = t_lambda.min((region.lambda - x) / delta);
        } else if delta < 0.0 {
            t_lambda = t_lambda.min((region.lambda + x) / -delta);
        }
    }
    if quad == 0.0 {
        return Ok(SegmentStep {
            next: target.to_vec(),
            t: 1.0,
            t_ball: f64::INFINITY,
            t_lambda,
        });
    }
    let budget = (region.threshold - region.kinetic_offset).max(0.0);
    let t_ball = (budget / quad).sqrt();
    let t = t_ball.min(t_lambda).clamp(0.0, 1.0);
    let next = from.iter().zip(target).map(|(a, b)| a + t * (b - a)).collect();
    Ok(SegmentStep { next, t, t_ball, t_lambda })
}

/// Builds the stage sequence: a min-sync first stage, then repeated moves to
/// the edge of each stage's region along the segment to `desired`.
pub fn plan_emergency_control(
    grid: &GridNetwork,
    s0: &SystemState,
    desired: &EquilibriumPoint,
    lambda: f64,
    problem: &DispatchProblem,
    max_stages: usize,
) -> Result<ControlPlan> {
    grid.check_len(&desired.angles)?;
    if max_stages == 0 {
        return Err(Error::StageLimitExceeded(0));
    }
    if !desired.in_lambda(grid, lambda) {
        return Err(Error::Domain("desired EP lies outside the lambda box".into()));
    }
    let desired_injections = dispatch_for_ep(grid, desired);
    let s0_in_box = in_box(grid, &s0.angles, std::f64::consts::FRAC_PI_2).margin > 0.0;

    if s0_in_box {
        let direct = inverse_certificate(grid, s0, desired, lambda)?;
        if direct.passes {
            return Ok(ControlPlan {
                stages: vec![ControlStage {
                    ep: desired.clone(),
                    injections: desired_injections,
                    t: None,
                }],
                desired: desired.clone(),
                lambda,
                switch_tolerance: DEFAULT_SWITCH_TOLERANCE,
                first_stage: FirstStageCheck::Certificate { margin: direct.margin },
                dc_approx: Vec::new(),
                min_sync_norm: None,
            });
        }
    }

    let dispatch = min_sync_dispatch(grid, problem)?;
    let dc_approx = dc_approx_ep(grid, &dispatch.injections)?;
    let ep1 = solve_equilibrium(grid, &dispatch.injections, Some(&dc_approx))?;
    let first_stage = verify_first_stage(grid, s0, &ep1, &dispatch.injections, lambda, s0_in_box)?;

    let mut stages = vec![ControlStage {
        ep: ep1,
        injections: dispatch.injections.clone(),
        t: None,
    }];
    loop {
        let current = &stages.last().expect("nonempty").ep;
        let region = inverse_region(grid, &SystemState::from_ep(grid, current), lambda)?;
        if region.empty {
            return Err(Error::EmptyRegion);
        }
        if stages.len() == max_stages {
            return Err(Error::StageLimitExceeded(max_stages));
        }
        if region.contains(&desired.angles).inside {
            stages.push(ControlStage {
                ep: desired.clone(),
                injections: desired_injections,
                t: Some(1.0),
            });
            break;
        }
        let step = next_ep_on_segment(grid, &region, &desired.angles)?;
        if step.t <= 0.0 {
            return Err(Error::EmptyRegion);
        }
        let t = step.t * (1.0 - BACKOFF);
        let next: Vec<f64> = current
            .angles
            .iter()
            .zip(&desired.angles)
            .map(|(a, b)| a + t * (b - a))
            .collect();
        let injections = dispatch_for_angles(grid, &next);
        let ep = EquilibriumPoint::from_angles(grid, &next, &injections)?;
        stages.push(ControlStage {
            ep,
            injections,
            t: Some(step.t),
        });
    }

    Ok(ControlPlan {
        stages,
        desired: desired.clone(),
        lambda,
        switch_tolerance: DEFAULT_SWITCH_TOLERANCE,
        first_stage,
        dc_approx,
        min_sync_norm: Some(dispatch.norm),
    })
}

fn verify_first_stage(
    grid: &GridNetwork,
    s0: &SystemState,
    ep1: &EquilibriumPoint,
    p1: &InjectionVector,
    lambda: f64,
    s0_in_box: bool,
) -> Result<FirstStageCheck> {
    if s0_in_box {
        let cert = inverse_certificate(grid, s0, ep1, lambda)?;
        if cert.passes {
            return Ok(FirstStageCheck::Certificate { margin: cert.margin });
        }
    }
    let opts = SimOptions::default()
        .with_step(FALLBACK_STEP)
        .with_horizon(FALLBACK_HORIZON)
        .with_output_every(1000);
    let traj = simulate(grid, p1, s0, opts)?;
    let last = traj.final_state().expect("trajectory has samples");
    let final_distance = angle_distance(&last.angles, &ep1.angles);
    let separated = traj.events.iter().any(|e| e.kind == EventKind::Separation);
    if separated || final_distance >= DEFAULT_SWITCH_TOLERANCE || last.max_gen_frequency() >= DEFAULT_SWITCH_TOLERANCE {
        return Err(Error::FirstStageUncertified(format!(
            "after {FALLBACK_HORIZON} s the state is {final_distance:.3e} rad from the first-stage EP"
        )));
    }
    Ok(FirstStageCheck::Simulation {
        horizon: FALLBACK_HORIZON,
        final_distance,
    })
}

/// Simulates the plan from `s0`, redispatching once the state has settled
/// near the current stage's EP. The final stage runs for the full horizon.
pub fn execute_plan(
    grid: &GridNetwork,
    s0: &SystemState,
    plan: &ControlPlan,
    step: f64,
    horizon_per_stage: f64,
) -> Result<Trajectory> {
    if plan.stages.is_empty() {
        return Err(Error::Domain("plan has no stages".into()));
    }
    if !(step > 0.0 && step.is_finite() && horizon_per_stage > 0.0 && horizon_per_stage.is_finite()) {
        return Err(Error::Domain(format!("step = {step}, horizon = {horizon_per_stage}")));
    }
    let injections: Vec<InjectionVector> = plan.stages.iter().map(|s| s.injections.clone()).collect();
    let last = plan.stages.len() - 1;
    let tol = plan.switch_tolerance;
    let mut traj = simulate_staged(
        grid,
        &injections,
        s0,
        step,
        10,
        |stage, state| {
            angle_distance(&state.angles, &plan.stages[stage].ep.angles) < tol && state.max_gen_frequency() < tol
        },
        |stage, elapsed| {
            if elapsed < horizon_per_stage - 0.5 * step {
                Ok(false)
            } else if stage == last {
                Ok(true)
            } else {
                Err(Error::StageTimeout {
                    stage: stage + 1,
                    horizon: horizon_per_stage,
                })
            }
        },
    )?;
    traj.events.insert(
        0,
        Event {
            time: 0.0,
            kind: EventKind::Switch,
            detail: "switch to stage 1".into(),
            line: None,
            stage: Some(1),
        },
    );
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, BusKind, Line};

    fn two_bus() -> GridNetwork {
        GridNetwork::new(
            vec![
                Bus { id: 1, kind: BusKind::Generator, voltage: 1.0, inertia: 1.0, damping: 1.0 },
                Bus { id: 2, kind: BusKind::Load, voltage: 1.0, inertia: 0.0, damping: 1.0 },
            ],
            vec![Line { from: 0, to: 1, susceptance: 1.0, coupling: 1.0, coupling_lo: 1.0, coupling_hi: 1.0 }],
        )
        .unwrap()
    }

    fn ep_at(grid: &GridNetwork, angles: &[f64]) -> EquilibriumPoint {
        let p = dispatch_for_angles(grid, angles);
        EquilibriumPoint::from_angles(grid, angles, &p).unwrap()
    }

    #[test]
    fn lambda_limited_segment() {
        let g = two_bus();
        let ep = ep_at(&g, &[0.0, 0.0]);
        let region = inverse_region(&g, &SystemState::from_ep(&g, &ep), 0.5).unwrap();
        // R/4 = g(0.5)(π/2)²/8 ≈ 0.135 admits a ball step of ~0.52 rad,
        // so the λ bound (0.5 rad) binds.
        let step = next_ep_on_segment(&g, &region, &[1.0, 0.0]).unwrap();
        assert!((step.t - 0.5).abs() < 1e-12);
        assert!(step.t_ball > step.t_lambda);
        assert!((step.next[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ball_limited_segment() {
        let g = two_bus();
        let ep = ep_at(&g, &[0.0, 0.0]);
        let region = inverse_region(&g, &SystemState::from_ep(&g, &ep), 1.2).unwrap();
        let step = next_ep_on_segment(&g, &region, &[1.0, 0.0]).unwrap();
        let want = (region.threshold / 0.5).sqrt();
        assert!((step.t - want).abs() < 1e-12 && step.t < 1.0);
    }

    #[test]
    fn target_inside_and_zero_segment() {
        let g = two_bus();
        let ep = ep_at(&g, &[0.0, 0.0]);
        let region = inverse_region(&g, &SystemState::from_ep(&g, &ep), 0.5).unwrap();
        let step = next_ep_on_segment(&g, &region, &[0.1, 0.0]).unwrap();
        assert_eq!(step.t, 1.0);
        assert_eq!(step.next, vec![0.1, 0.0]);
        let same = next_ep_on_segment(&g, &region, &[0.3, 0.3]).unwrap();
        assert_eq!(same.t, 1.0);
    }

    #[test]
    fn empty_region_rejected() {
        let g = two_bus();
        let s = SystemState::new(&g, vec![0.0, 0.0], vec![50.0]).unwrap();
        let region = inverse_region(&g, &s, 0.5).unwrap();
        assert!(matches!(next_ep_on_segment(&g, &region, &[0.1, 0.0]), Err(Error::EmptyRegion)));
    }

    #[test]
    fn single_stage_plan_from_ep() {
        let g = two_bus();
        let desired = ep_at(&g, &[0.2, 0.0]);
        let s0 = SystemState::from_ep(&g, &desired);
        let problem = DispatchProblem::unconstrained(&g, 0.5);
        let plan = plan_emergency_control(&g, &s0, &desired, 0.5, &problem, 5).unwrap();
        assert_eq!(plan.stages.len(), 1);
        assert_eq!(plan.stages[0].ep, desired);
        let traj = execute_plan(&g, &s0, &plan, 1e-3, 1.0).unwrap();
        assert_eq!(traj.events.len(), 1);
        for s in &traj.states {
            assert!(angle_distance(&s.angles, &desired.angles) < 1e-12);
        }
    }

    #[test]
    fn multi_stage_plan_is_monotone() {
        let g = two_bus();
        let desired = ep_at(&g, &[1.0, 0.0]);
        let problem = DispatchProblem::unconstrained(&g, 1.1);
        let s0 = SystemState::at_rest(&g, &[0.0, 0.0]);
        let plan = plan_emergency_control(&g, &s0, &desired, 1.1, &problem, 20).unwrap();
        assert!(plan.stages.len() > 2);
        let d = plan.distances();
        assert!(d.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(*d.last().unwrap(), 0.0);
        for pair in plan.stages.windows(2) {
            let s = SystemState::from_ep(&g, &pair[0].ep);
            assert!(inverse_certificate(&g, &s, &pair[1].ep, 1.1).unwrap().passes);
        }
        let err = plan_emergency_control(&g, &s0, &desired, 1.1, &problem, 2).unwrap_err();
        assert!(matches!(err, Error::StageLimitExceeded(2)));
    }

    #[test]
    fn staged_execution_reaches_desired() {
        let g = two_bus();
        let desired = ep_at(&g, &[0.6, 0.0]);
        let problem = DispatchProblem::unconstrained(&g, 1.1);
        let s0 = SystemState::at_rest(&g, &[0.0, 0.0]);
        let plan = plan_emergency_control(&g, &s0, &desired, 1.1, &problem, 20).unwrap();
        let traj = execute_plan(&g, &s0, &plan, 1e-2, 40.0).unwrap();
        let switches = traj.events.iter().filter(|e| e.kind == EventKind::Switch).count();
        assert_eq!(switches, plan.stages.len());
        let last = traj.final_state().unwrap();
        assert!(angle_distance(&last.angles, &desired.angles) < 1e-2);
    }

    #[test]
    fn stage_timeout() {
        let g = two_bus();
        let desired = ep_at(&g, &[0.6, 0.0]);
        let problem = DispatchProblem::unconstrained(&g, 1.1);
        let s0 = SystemState::at_rest(&g, &[0.0, 0.0]);
        let plan = plan_emergency_control(&g, &s0, &desired, 1.1, &problem, 20).unwrap();
        assert!(plan.stages.len() > 2);
        let err = execute_plan(&g, &s0, &plan, 1e-2, 0.05).unwrap_err();
        assert!(matches!(err, Error::StageTimeout { stage: 2, .. }));
    }
}

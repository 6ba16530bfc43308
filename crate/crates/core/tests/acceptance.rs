//! End-to-end acceptance run: every criterion at its stated tolerance, one
//! PASS/FAIL line each.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, PI};
use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use invstab::casestudy::{max_mean_zero_deviation, max_relative_deviation, NineBusCase};
use invstab::certificates::{e_min_oracle, g_constant, inverse_region, quad_lower, quad_upper, DEFAULT_RESTARTS};
use invstab::control::{
    execute_plan, min_sync_dispatch, next_ep_on_segment, plan_emergency_control, sopf_dispatch,
    QuadraticCost, SopfProblem,
};
use invstab::dynamics::{angle_distance, energy, energy_decay_check, simulate, SimOptions, SystemState};
use invstab::grid::{self, GridNetwork, InjectionVector};
use invstab::powerflow::{dc_approx_ep, solve_equilibrium, EquilibriumPoint};
use invstab::sampling::{
    random_angles_in_box, random_connected_grid, random_injections, random_state_in_box, rng_from_seed,
    sample_ep_in_region, RandomGridSpec,
};

struct Outcome {
    passes: bool,
    detail: String,
}

fn outcome(passes: bool, detail: String) -> Outcome {
    Outcome { passes, detail }
}

fn first_stage(case: &NineBusCase) -> EquilibriumPoint {
    let dispatch = min_sync_dispatch(&case.grid, &case.dispatch).unwrap();
    let guess = dc_approx_ep(&case.grid, &dispatch.injections).unwrap();
    solve_equilibrium(&case.grid, &dispatch.injections, Some(&guess)).unwrap()
}

fn random_grid(rng: &mut impl Rng, buses: std::ops::RangeInclusive<usize>) -> GridNetwork {
    let n = rng.random_range(buses);
    let n_gen = rng.random_range(1..=n);
    random_connected_grid(rng, &RandomGridSpec::new(n, n_gen))
}

/// Injections scaled so `‖L†p‖_{E,∞} = fraction · sin λ`.
fn scaled_to_sync(grid: &GridNetwork, p: &InjectionVector, lambda: f64, fraction: f64) -> InjectionVector {
    let norm = grid::edge_infinity_norm(grid, &dc_approx_ep(grid, p).unwrap()).unwrap();
    if norm == 0.0 {
        return p.clone();
    }
    p.scaled(fraction * lambda.sin() / norm)
}

fn min_sync_value() -> Outcome {
    let case = NineBusCase::load().unwrap();
    let start = Instant::now();
    let r = min_sync_dispatch(&case.grid, &case.dispatch).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let bound = (PI / 89.0).sin();
    outcome(
        (r.norm - 0.0350).abs() <= 0.002 && r.norm < bound && elapsed < 1.0,
        format!("norm {:.6} (0.0350 ± 0.002, < sin(π/89) = {bound:.6}), {elapsed:.3} s", r.norm),
    )
}

fn dc_approximation() -> Outcome {
    let case = NineBusCase::load().unwrap();
    let dc = dc_approx_ep(&case.grid, &case.reference_optimized_injections()).unwrap();
    let dev = max_mean_zero_deviation(&dc, &case.reference.dc_approx_ep);
    outcome(dev <= 1e-3, format!("max componentwise deviation {dev:.2e} (≤ 1e-3)"))
}

fn desired_ep() -> Outcome {
    let case = NineBusCase::load().unwrap();
    let ep = case.desired_ep().unwrap();
    let dev = max_relative_deviation(&ep.angles, &case.reference.desired_ep);
    outcome(dev <= 1e-3, format!("max angle-difference deviation {dev:.2e} (≤ 1e-3)"))
}

fn uncontrolled_instability() -> Outcome {
    let case = NineBusCase::load().unwrap();
    let start = Instant::now();
    let opts = SimOptions::default().with_horizon(10.0).with_output_every(1);
    let traj = simulate(&case.grid, &case.injections, &case.fault_cleared, opts).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let mut hits = Vec::new();
    for &[a, b] in &[[4usize, 5usize], [5, 7]] {
        let ev = traj.events.iter().find(|e| {
            e.line
                .is_some_and(|l| (l[0] == a && l[1] == b) || (l[0] == b && l[1] == a))
        });
        let reached = traj
            .states
            .iter()
            .any(|s| (s.angles[a - 1] - s.angles[b - 1]).abs() >= 2.0 * PI);
        hits.push((a, b, ev.map(|e| e.time), reached));
    }
    let ok = hits.iter().all(|&(_, _, t, reached)| t.is_some_and(|t| t <= 10.0) && reached) && elapsed < 10.0;
    let times: Vec<String> = hits
        .iter()
        .map(|(a, b, t, _)| format!("|δ{a}{b}| = 2π at {}", t.map_or("never".into(), |t| format!("{t:.3} s"))))
        .collect();
    outcome(ok, format!("{}, {elapsed:.2} s", times.join(", ")))
}

fn controlled_recovery() -> Outcome {
    let case = NineBusCase::load().unwrap();
    let desired = case.desired_ep().unwrap();
    let start = Instant::now();
    let plan = plan_emergency_control(&case.grid, &case.fault_cleared, &desired, case.lambda, &case.dispatch, 10).unwrap();
    let traj = execute_plan(&case.grid, &case.fault_cleared, &plan, 1e-3, 40.0).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let d = angle_distance(&traj.final_state().unwrap().angles, &desired.angles);
    outcome(
        plan.stages.len() == 3 && d < 1e-2 && elapsed < 30.0,
        format!("{} stages, final distance {d:.2e} rad (< 1e-2), {elapsed:.2} s", plan.stages.len()),
    )
}

fn segment_coefficient() -> Outcome {
    let case = NineBusCase::load().unwrap();
    let desired = case.desired_ep().unwrap();
    let ep1 = first_stage(&case);
    let region = inverse_region(&case.grid, &SystemState::from_ep(&case.grid, &ep1), case.lambda).unwrap();
    let step = next_ep_on_segment(&case.grid, &region, &desired.angles).unwrap();
    outcome(
        (step.t - 0.9259).abs() <= 0.02,
        format!(
            "t = {:.4} (0.9259 ± 0.02) at calibrated λ = {} (t_ball {:.4}, t_λ {:.4})",
            step.t, case.lambda, step.t_ball, step.t_lambda
        ),
    )
}

fn energy_decay() -> Outcome {
    let worst = (0..20u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(7_000 + i);
            let g = random_grid(&mut rng, 2..=9);
            let p = scaled_to_sync(&g, &random_injections(&mut rng, &g), FRAC_PI_3, rng.random_range(0.1..0.9));
            let ep = solve_equilibrium(&g, &p, None).unwrap();
            let s0 = random_state_in_box(&mut rng, &g, 1.4, 0.5);
            let traj = simulate(&g, &p, &s0, SimOptions::default().with_horizon(10.0)).unwrap();
            let e0 = energy(&g, &s0, &ep);
            energy_decay_check(&g, &p, &traj, &ep).max_increment / e0.max(1.0)
        })
        .reduce(|| 0.0, f64::max);
    outcome(worst <= 1e-6, format!("20 trajectories, worst relative increment {worst:.2e} (≤ 1e-6)"))
}

fn sandwich_bounds() -> Outcome {
    let violations: usize = (0..50u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(8_000 + i);
            let g = random_grid(&mut rng, 2..=9);
            let mut bad = 0;
            for _ in 0..200 {
                let lambda = rng.random_range(0.01..FRAC_PI_2 - 0.01);
                let s = random_state_in_box(&mut rng, &g, FRAC_PI_2, 1.0);
                let y = random_angles_in_box(&mut rng, &g, lambda);
                let ep = EquilibriumPoint { angles: y.clone(), residual: 0.0 };
                let d = quad_lower(&g, lambda, &s.angles, &y).unwrap();
                let e = energy(&g, &s, &ep);
                let f = quad_upper(&g, &s, &y);
                if d > e + 1e-12 || e > f + 1e-12 {
                    bad += 1;
                }
            }
            bad
        })
        .sum();
    let mut rng = rng_from_seed(8_999);
    let mut gap_bad = 0;
    for _ in 0..100_000 {
        let lambda = rng.random_range(0.0..FRAC_PI_2 - 1e-3);
        let g = g_constant(lambda).unwrap();
        let star = rng.random_range(-lambda..=lambda);
        let xi = rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
        let u = xi - star;
        let mid = u * (xi.sin() - star.sin());
        if g * u * u > mid + 1e-12 || mid > u * u + 1e-12 {
            gap_bad += 1;
        }
    }
    outcome(
        violations == 0 && gap_bad == 0,
        format!("{violations}/10000 sandwich and {gap_bad}/100000 sine-gap violations"),
    )
}

/// Simulates from `s0` to each EP and returns the worst final distance.
fn worst_convergence(g: &GridNetwork, s0: &SystemState, eps: &[(EquilibriumPoint, InjectionVector)], horizon: f64) -> f64 {
    eps.par_iter()
        .map(|(ep, p)| {
            let opts = SimOptions::default().with_horizon(horizon).with_output_every(usize::MAX);
            let traj = simulate(g, p, s0, opts).unwrap();
            angle_distance(&traj.final_state().unwrap().angles, &ep.angles)
        })
        .reduce(|| 0.0, f64::max)
}

fn certificate_soundness() -> Outcome {
    const HORIZON: f64 = 200.0;
    let start = Instant::now();
    let case = NineBusCase::load().unwrap();
    let s0 = SystemState::from_ep(&case.grid, &first_stage(&case));
    let region = inverse_region(&case.grid, &s0, case.lambda).unwrap();
    let mut rng = rng_from_seed(9_000);
    let nine: Vec<_> = (0..100)
        .filter_map(|_| sample_ep_in_region(&mut rng, &case.grid, &region, 1000))
        .collect();
    let mut worst = worst_convergence(&case.grid, &s0, &nine, HORIZON);
    let mut count = nine.len();
    let mut grids = 0;
    let mut seed = 9_100;
    while grids < 10 {
        seed += 1;
        let mut rng = rng_from_seed(seed);
        let g = random_grid(&mut rng, 3..=9);
        let s0 = random_state_in_box(&mut rng, &g, 0.8, 0.02);
        let region = inverse_region(&g, &s0, FRAC_PI_3).unwrap();
        if region.empty {
            continue;
        }
        grids += 1;
        let eps: Vec<_> = (0..10).filter_map(|_| sample_ep_in_region(&mut rng, &g, &region, 1000)).collect();
        count += eps.len();
        worst = worst.max(worst_convergence(&g, &s0, &eps, HORIZON));
    }
    let elapsed = start.elapsed().as_secs_f64();
    outcome(
        count == 200 && worst < 1e-3 && elapsed < 300.0,
        format!("{count} EPs (100 on 9-bus, 100 on 10 random grids), worst final distance {worst:.2e} (< 1e-3), {elapsed:.1} s"),
    )
}

fn boundary_energy_chain() -> Outcome {
    let results: Vec<(bool, bool)> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let mut seed = 10_000 + 1_000 * i;
            loop {
                seed += 1;
                let mut rng = rng_from_seed(seed);
                let g = random_grid(&mut rng, 2..=6);
                let lambda = rng.random_range(0.3..1.3);
                let s0 = random_state_in_box(&mut rng, &g, 1.2, 0.05);
                let region = inverse_region(&g, &s0, lambda).unwrap();
                let Some((ep, _)) = sample_ep_in_region(&mut rng, &g, &region, 1000) else {
                    continue;
                };
                let m = e_min_oracle(&g, &ep, DEFAULT_RESTARTS).unwrap();
                let e0 = energy(&g, &s0, &ep);
                let d = quad_lower(&g, lambda, &s0.angles, &m.point).unwrap();
                return (
                    m.value > region.threshold && region.threshold > e0,
                    m.value + e0 >= d / 2.0 - 1e-12,
                );
            }
        })
        .collect();
    let chain = results.iter().filter(|r| r.0).count();
    let half = results.iter().filter(|r| r.1).count();
    outcome(
        chain == 100 && half == 100,
        format!("E(M) > R/4 > E(δ₀) in {chain}/100, E(M) + E(δ₀) ≥ D(δ₀, M)/2 in {half}/100"),
    )
}

fn sync_criterion() -> Outcome {
    let results: Vec<bool> = (0..200u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(11_000 + i);
            let g = random_grid(&mut rng, 2..=20);
            let lambda = rng.random_range(0.05..FRAC_PI_2 - 0.05);
            let p = scaled_to_sync(&g, &random_injections(&mut rng, &g), lambda, rng.random_range(0.0..=1.0));
            solve_equilibrium(&g, &p, None).is_ok_and(|ep| ep.in_lambda(&g, lambda))
        })
        .collect();
    let ok = results.iter().filter(|&&b| b).count();
    outcome(ok == 200, format!("EP found inside the λ-box on {ok}/200 grids"))
}

fn sopf_contract() -> Outcome {
    let case = NineBusCase::load().unwrap();
    let g = &case.grid;
    let desired = case.desired_ep().unwrap();
    let start = SystemState::from_ep(g, &desired);
    let ones = QuadraticCost { c2: 1.0, c1: 1.0, c0: 1.0 };
    // line 5-7 limited below its flow at the start so the limit binds
    let line = g.find_line(4, 6).unwrap();
    let l = &g.lines()[line];
    let flow = (l.coupling * l.diff(&desired.angles).sin()).abs();
    let mut thermal_limits = vec![None; g.n_lines()];
    thermal_limits[line] = Some(0.8 * flow);
    let problem = SopfProblem {
        cost: vec![ones; g.n_generators()],
        start: start.clone(),
        lambda: FRAC_PI_3,
        thermal_limits: thermal_limits.clone(),
    };
    let r = sopf_dispatch(g, &problem).unwrap();
    let thermal_violation = |angles: &[f64]| {
        g.lines()
            .iter()
            .zip(&thermal_limits)
            .filter_map(|(l, s)| s.map(|s| (l.coupling * l.diff(angles).sin()).abs() - s))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let cost_of = |p: &InjectionVector| -> f64 {
        g.generators()
            .iter()
            .zip(&problem.cost)
            .map(|(&k, c)| c.eval(p.values()[k]))
            .sum()
    };
    let region = inverse_region(g, &start, FRAC_PI_3).unwrap();
    let m = region.contains(&r.ep.angles);
    let feasible = m.lambda_margin >= -1e-9 && m.ball_margin >= -1e-9 && thermal_violation(&r.ep.angles) <= 1e-9;
    let mut rng = rng_from_seed(12_000);
    let mut samples = 0;
    let mut best_sample = f64::INFINITY;
    while samples < 1000 {
        let (ep, p) = sample_ep_in_region(&mut rng, g, &region, 100_000).unwrap();
        if thermal_violation(&ep.angles) <= 0.0 {
            samples += 1;
            best_sample = best_sample.min(cost_of(&p));
        }
    }
    outcome(
        feasible && r.cost <= best_sample + 1e-6,
        format!(
            "cost {:.9} vs best of 1000 samples {best_sample:.9}; λ margin {:.2e}, ball margin {:.2e}, thermal slack {:.2e}",
            r.cost,
            m.lambda_margin,
            m.ball_margin,
            -thermal_violation(&r.ep.angles)
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 12] = [
        ("min-sync dispatch value", min_sync_value),
        ("DC approximation of the first-stage EP", dc_approximation),
        ("desired EP", desired_ep),
        ("uncontrolled instability", uncontrolled_instability),
        ("controlled recovery", controlled_recovery),
        ("segment coefficient", segment_coefficient),
        ("energy decay", energy_decay),
        ("sandwich and sine-gap bounds", sandwich_bounds),
        ("inverse certificate soundness", certificate_soundness),
        ("boundary energy chain", boundary_energy_chain),
        ("synchronization criterion", sync_criterion),
        ("sOPF contract", sopf_contract),
    ];
    // written to the raw handle so the lines show without --nocapture
    let mut err = std::io::stderr();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        let tag = if o.passes { "PASS" } else { "FAIL" };
        writeln!(err, "{tag} {:>2} {name}: {}", i + 1, o.detail).unwrap();
        if !o.passes {
            failed.push(format!("{} {name}", i + 1));
        }
    }
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}

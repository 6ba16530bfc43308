//! Property tests over random grids: linear algebra, bounds, gauge freedom
//! and file round trips.

use std::f64::consts::FRAC_PI_2;

use proptest::prelude::*;
use rand::Rng;

use invstab::certificates::{g_constant, inverse_region, quad_lower, quad_upper};
use invstab::control::{dispatch_for_angles, min_sync_dispatch, DispatchProblem};
use invstab::dynamics::{energy, SystemState};
use invstab::grid::{self, laplacian_pseudoinverse, weighted_laplacian, CouplingChoice, GridFile, GridNetwork, InjectionVector};
use invstab::io::{fmt_num, injection_records, injections_from_records, parse_state, to_json, StateRecord};
use invstab::powerflow::{dc_approx_ep, solve_equilibrium, EquilibriumPoint};
use invstab::sampling::{random_angles_in_box, random_connected_grid, random_injections, random_state_in_box, rng_from_seed, RandomGridSpec};

fn grid_from_seed(seed: u64, max_buses: usize) -> (GridNetwork, rand_chacha::ChaCha8Rng) {
    let mut rng = rng_from_seed(seed);
    let n = rng.random_range(2..=max_buses);
    let n_gen = rng.random_range(1..=n);
    (random_connected_grid(&mut rng, &RandomGridSpec::new(n, n_gen)), rng)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn line_diffs(g: &GridNetwork, x: &[f64]) -> Vec<f64> {
    g.lines().iter().map(|l| l.diff(x)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pseudoinverse_satisfies_moore_penrose(seed in any::<u64>()) {
        let (g, _) = grid_from_seed(seed, 12);
        let l = weighted_laplacian(&g, CouplingChoice::Nominal);
        let lp = laplacian_pseudoinverse(&g).unwrap();
        let scale = l.amax().max(1.0) * lp.amax().max(1.0);
        prop_assert!((&l * &lp * &l - &l).amax() <= 1e-10 * scale * l.amax());
        prop_assert!((&lp * &l * &lp - &lp).amax() <= 1e-10 * scale * lp.amax());
        prop_assert!((&l * &lp - (&l * &lp).transpose()).amax() <= 1e-10 * scale);
        prop_assert!((&lp - lp.transpose()).amax() <= 1e-12 * lp.amax());
        // the null space is the all-ones vector
        for r in 0..g.n_buses() {
            prop_assert!(lp.row(r).sum().abs() <= 1e-10 * lp.amax());
        }
    }

    #[test]
    fn equilibrium_is_gauge_invariant(seed in any::<u64>(), shift in -10.0..10.0f64) {
        let (g, mut rng) = grid_from_seed(seed, 10);
        let p = random_injections(&mut rng, &g);
        let norm = grid::edge_infinity_norm(&g, &dc_approx_ep(&g, &p).unwrap()).unwrap();
        let p = p.scaled(0.5 * 0.8f64.sin() / norm.max(1e-12));
        let guess = dc_approx_ep(&g, &p).unwrap();
        let shifted: Vec<f64> = guess.iter().map(|v| v + shift).collect();
        let a = solve_equilibrium(&g, &p, Some(&guess)).unwrap();
        let b = solve_equilibrium(&g, &p, Some(&shifted)).unwrap();
        prop_assert!(max_abs_diff(&line_diffs(&g, &a.angles), &line_diffs(&g, &b.angles)) <= 1e-10);
        // re-injecting the flows reproduces p
        let back = dispatch_for_angles(&g, &a.angles);
        prop_assert!(max_abs_diff(back.values(), p.values()) <= 1e-9);
    }

    #[test]
    fn dispatch_round_trip_recovers_the_ep(seed in any::<u64>(), bound in 0.05..1.4f64) {
        let (g, mut rng) = grid_from_seed(seed, 10);
        let angles = random_angles_in_box(&mut rng, &g, bound);
        let p = dispatch_for_angles(&g, &angles);
        prop_assert!(p.values().iter().sum::<f64>().abs() <= 1e-12 * g.n_buses() as f64 * 100.0);
        let ep = solve_equilibrium(&g, &p, Some(&angles)).unwrap();
        prop_assert!(max_abs_diff(&line_diffs(&g, &ep.angles), &line_diffs(&g, &angles)) <= 1e-10);
    }

    #[test]
    fn energy_is_sandwiched(seed in any::<u64>(), lambda in 0.01..(FRAC_PI_2 - 0.01)) {
        let (g, mut rng) = grid_from_seed(seed, 9);
        for _ in 0..20 {
            let s = random_state_in_box(&mut rng, &g, FRAC_PI_2, 1.0);
            let y = random_angles_in_box(&mut rng, &g, lambda);
            let ep = EquilibriumPoint { angles: y.clone(), residual: 0.0 };
            let d = quad_lower(&g, lambda, &s.angles, &y).unwrap();
            let e = energy(&g, &s, &ep);
            let f = quad_upper(&g, &s, &y);
            prop_assert!(d <= e + 1e-12, "D = {d} > E = {e}");
            prop_assert!(e <= f + 1e-12, "E = {e} > F = {f}");
        }
    }

    #[test]
    fn sine_gap_bounds(lambda in 0.0..(FRAC_PI_2 - 1e-3), a in -1.0..=1.0f64, xi in -FRAC_PI_2..=FRAC_PI_2) {
        let g = g_constant(lambda).unwrap();
        let star = a * lambda;
        let u = xi - star;
        let mid = u * (xi.sin() - star.sin());
        prop_assert!(g * u * u <= mid + 1e-12);
        prop_assert!(mid <= u * u + 1e-12);
    }

    #[test]
    fn g_decreases_and_boxes_nest(l1 in 0.01..1.5f64, l2 in 0.01..1.5f64, seed in any::<u64>()) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        prop_assert!(g_constant(lo).unwrap() >= g_constant(hi).unwrap());
        let (g, mut rng) = grid_from_seed(seed, 8);
        let s = SystemState::at_rest(&g, &random_angles_in_box(&mut rng, &g, 0.5));
        let r_lo = inverse_region(&g, &s, lo).unwrap();
        let r_hi = inverse_region(&g, &s, hi).unwrap();
        prop_assert!(r_lo.lambda <= r_hi.lambda);
        // any angle vector inside the smaller box is inside the larger one
        let x = random_angles_in_box(&mut rng, &g, lo);
        prop_assert!(r_lo.contains(&x).lambda_margin >= 0.0 && r_hi.contains(&x).lambda_margin >= 0.0);
    }

    #[test]
    fn pseudoinverse_ignores_uniform_injection_shifts(seed in any::<u64>(), c in -5.0..5.0f64) {
        let (g, mut rng) = grid_from_seed(seed, 8);
        let p = random_injections(&mut rng, &g);
        let shifted: Vec<f64> = p.values().iter().map(|v| v + c).collect();
        let a = dc_approx_ep(&g, &p).unwrap();
        let b = grid::pseudoinverse_with(&g, CouplingChoice::Nominal).unwrap()
            * nalgebra::DVector::from_vec(shifted.clone());
        prop_assert!(max_abs_diff(&a, b.as_slice()) <= 1e-10);
    }

    #[test]
    fn twelve_digit_output_round_trips(x in prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), -1e3..1e3f64]) {
        let s = fmt_num(x);
        let back: f64 = s.parse().unwrap();
        if x == 0.0 {
            prop_assert_eq!(back, 0.0);
        } else {
            prop_assert!(((back - x) / x).abs() <= 5e-12, "{x} -> {s}");
        }
        let digits = s.trim_start_matches('-').split(['e', 'E']).next().unwrap().replace('.', "");
        prop_assert!(digits.trim_start_matches('0').len() <= 12);
    }

    #[test]
    fn files_round_trip(seed in any::<u64>()) {
        let (g, mut rng) = grid_from_seed(seed, 10);
        let text = serde_json::to_string(&GridFile::from(&g)).unwrap();
        let back = grid::parse_grid(&text).unwrap();
        prop_assert_eq!(back.lines(), g.lines());
        prop_assert_eq!(back.buses(), g.buses());

        let p = random_injections(&mut rng, &g);
        let q = injections_from_records(&g, &injection_records(&p)).unwrap();
        prop_assert_eq!(&q, &p);

        let s = random_state_in_box(&mut rng, &g, 1.0, 0.3);
        let text = to_json(&StateRecord { angles: s.angles.clone(), gen_frequencies: s.gen_frequencies.clone() }).unwrap();
        let back = parse_state(&g, &text).unwrap();
        prop_assert!(max_abs_diff(&back.angles, &s.angles) <= 1e-11 * 4.0);
        prop_assert!(max_abs_diff(&back.gen_frequencies, &s.gen_frequencies) <= 1e-11);
    }
}

#[test]
fn min_sync_gauge_shift_of_fixed_injections() {
    // Shifting all fixed injections by c and rebalancing through the same
    // controllable set leaves the optimal value unchanged when every bus is free.
    for seed in 0..20 {
        let (g, mut rng) = grid_from_seed(seed, 8);
        let n = g.n_buses();
        let p = random_injections(&mut rng, &g);
        let c = rng.random_range(-3.0..3.0);
        let all: Vec<usize> = (0..n).collect();
        let free = vec![(f64::NEG_INFINITY, f64::INFINITY); n];
        let a = DispatchProblem::new(&g, all.clone(), p.values().to_vec(), free.clone(), 1.0).unwrap();
        let shifted: Vec<f64> = p.values().iter().map(|v| v + c).collect();
        let b = DispatchProblem::new(&g, all, shifted, free, 1.0).unwrap();
        let va = min_sync_dispatch(&g, &a).unwrap().norm;
        let vb = min_sync_dispatch(&g, &b).unwrap().norm;
        assert!((va - vb).abs() <= 1e-12, "{va} vs {vb}");
        assert!(va.abs() <= 1e-12);
    }
}

#[test]
fn min_sync_never_beaten_by_feasible_points() {
    let mut rng = rng_from_seed(99);
    for seed in 0..5 {
        let (g, _) = grid_from_seed(1_000 + seed, 8);
        let n = g.n_buses();
        if n < 3 {
            continue;
        }
        let p = random_injections(&mut rng, &g);
        let controllable: Vec<usize> = (0..n - 1).collect();
        let bounds: Vec<(f64, f64)> = controllable.iter().map(|_| (-1.0, 1.0)).collect();
        let problem = DispatchProblem::new(&g, controllable.clone(), p.values().to_vec(), bounds, 1.0).unwrap();
        let best = min_sync_dispatch(&g, &problem).unwrap().norm;
        let fixed_sum = p.values()[n - 1];
        let mut tried = 0;
        while tried < 1000 {
            let mut x: Vec<f64> = controllable.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            // project onto the balance plane, keep only in-bounds draws
            let excess = (x.iter().sum::<f64>() + fixed_sum) / x.len() as f64;
            x.iter_mut().for_each(|v| *v -= excess);
            if x.iter().any(|v| v.abs() > 1.0) {
                continue;
            }
            tried += 1;
            x.push(fixed_sum);
            let q = InjectionVector::new(x).unwrap();
            let norm = grid::edge_infinity_norm(&g, &dc_approx_ep(&g, &q).unwrap()).unwrap();
            assert!(best <= norm + 1e-9, "LP optimum {best} beaten by {norm}");
        }
    }
}

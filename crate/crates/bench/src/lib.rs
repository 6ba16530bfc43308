//! Shared inputs for the kernel benchmarks.

use invstab::casestudy::NineBusCase;
use invstab::dynamics::SystemState;
use invstab::grid::{self, GridNetwork, InjectionVector};
use invstab::powerflow::dc_approx_ep;
use invstab::sampling::{random_connected_grid, random_injections, random_state_in_box, rng_from_seed, RandomGridSpec};

/// A random connected grid with half its buses as generators, injections
/// scaled to a sync norm of 0.5 and a nearby moving state.
pub fn random_case(n: usize, seed: u64) -> (GridNetwork, InjectionVector, SystemState) {
    let mut rng = rng_from_seed(seed);
    let g = random_connected_grid(&mut rng, &RandomGridSpec::new(n, n.div_ceil(2)));
    let p = random_injections(&mut rng, &g);
    let norm = grid::edge_infinity_norm(&g, &dc_approx_ep(&g, &p).expect("connected grid")).expect("connected grid");
    let p = p.scaled(0.5 / norm.max(1e-12));
    let s = random_state_in_box(&mut rng, &g, 1.0, 0.2);
    (g, p, s)
}

pub fn nine_bus() -> NineBusCase {
    NineBusCase::load().expect("bundled fixture")
}

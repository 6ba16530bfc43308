//! Seeded random grids, states and equilibria for Monte-Carlo checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::certificates::InverseStabilityRegion;
use crate::control::dispatch_for_angles;
use crate::dynamics::SystemState;
use crate::grid::{Bus, BusKind, GridNetwork, InjectionVector, Line};
use crate::powerflow::EquilibriumPoint;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameter ranges for [`random_connected_grid`]. Buses `1..=n_generators`
/// are generators.
#[derive(Debug, Clone)]
pub struct RandomGridSpec {
    pub n_buses: usize,
    pub n_generators: usize,
    /// Probability of each non-tree line.
    pub extra_line_prob: f64,
    pub voltage: (f64, f64),
    pub susceptance: (f64, f64),
    pub inertia: (f64, f64),
    pub gen_damping: (f64, f64),
    pub load_damping: (f64, f64),
}

impl RandomGridSpec {
    pub fn new(n_buses: usize, n_generators: usize) -> Self {
        Self {
            n_buses,
            n_generators: n_generators.clamp(1, n_buses.max(1)),
            extra_line_prob: 0.25,
            voltage: (0.95, 1.08),
            susceptance: (2.0, 10.0),
            inertia: (0.02, 0.15),
            gen_damping: (0.05, 0.2),
            load_damping: (0.05, 0.2),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Random spanning tree plus independent extra lines.
pub fn random_connected_grid(rng: &mut impl Rng, spec: &RandomGridSpec) -> GridNetwork {
    let n = spec.n_buses.max(2);
    let buses: Vec<Bus> = (0..n)
        .map(|k| {
            let generator = k < spec.n_generators;
            Bus {
                id: k + 1,
                kind: if generator { BusKind::Generator } else { BusKind::Load },
                voltage: uniform(rng, spec.voltage),
                inertia: if generator { uniform(rng, spec.inertia) } else { 0.0 },
                damping: uniform(rng, if generator { spec.gen_damping } else { spec.load_damping }),
            }
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = (1..n).map(|k| (rng.random_range(0..k), k)).collect();
    for a in 0..n {
        for b in a + 1..n {
            if !pairs.iter().any(|&(x, y)| (x, y) == (a, b)) && rng.random_bool(spec.extra_line_prob.clamp(0.0, 1.0)) {
                pairs.push((a, b));
            }
        }
    }
    let lines = pairs
        .into_iter()
        .map(|(from, to)| {
            let susceptance = uniform(rng, spec.susceptance);
            let coupling = buses[from].voltage * buses[to].voltage * susceptance;
            Line {
                from,
                to,
                susceptance,
                coupling,
                coupling_lo: coupling,
                coupling_hi: coupling,
            }
        })
        .collect();
    GridNetwork::new(buses, lines).expect("random grid is valid by construction")
}

/// Angles with every line difference within `±bound`; the largest difference
/// is uniform on `[0, bound)`.
pub fn random_angles_in_box(rng: &mut impl Rng, grid: &GridNetwork, bound: f64) -> Vec<f64> {
    let x: Vec<f64> = (0..grid.n_buses()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let worst = grid.lines().iter().map(|l| l.diff(&x).abs()).fold(0.0_f64, f64::max);
    if worst == 0.0 {
        return x;
    }
    let scale = bound * rng.random_range(0.0..1.0) / worst;
    x.into_iter().map(|v| v * scale).collect()
}

/// Random state inside the `±bound` box with generator frequencies uniform in
/// `±max_frequency`.
pub fn random_state_in_box(rng: &mut impl Rng, grid: &GridNetwork, bound: f64, max_frequency: f64) -> SystemState {
    let angles = random_angles_in_box(rng, grid, bound);
    let gen_frequencies = (0..grid.n_generators())
        .map(|_| if max_frequency > 0.0 { rng.random_range(-max_frequency..max_frequency) } else { 0.0 })
        .collect();
    SystemState { angles, gen_frequencies }
}

/// Balanced injections with entries roughly uniform in `±1`.
pub fn random_injections(rng: &mut impl Rng, grid: &GridNetwork) -> InjectionVector {
    InjectionVector::rebalanced((0..grid.n_buses()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Rejection-samples an EP inside the region: a random direction from the
/// center, scaled to a random fraction of the ball, kept if it stays in the
/// λ-box.
pub fn sample_ep_in_region(
    rng: &mut impl Rng,
    grid: &GridNetwork,
    region: &InverseStabilityRegion,
    max_tries: usize,
) -> Option<(EquilibriumPoint, InjectionVector)> {
    if region.empty {
        return None;
    }
    let center = &region.center.angles;
    let budget = region.threshold - region.kinetic_offset;
    for _ in 0..max_tries {
        let u: Vec<f64> = (0..grid.n_buses()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: f64 = grid
            .lines()
            .iter()
            .zip(&region.upper_weights)
            .map(|(l, w)| 0.5 * w * l.diff(&u).powi(2))
            .sum();
        if q == 0.0 {
            continue;
        }
        let s = (budget * rng.random_range(0.0..1.0) / q).sqrt();
        let angles: Vec<f64> = center.iter().zip(&u).map(|(c, d)| c + s * d).collect();
        if region.contains(&angles).inside {
            let p = dispatch_for_angles(grid, &angles);
            let ep = EquilibriumPoint::from_angles(grid, &angles, &p).ok()?;
            return Some((ep, p));
        }
    }
    None
}

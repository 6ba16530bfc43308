//! Structure-preserving swing dynamics, the energy function and its decay.
//!
//! Generators are second order (`m δ̈ + d δ̇ + flow = P`), loads first order
//! (`d δ̇ + flow = P`). Load frequencies are therefore not state variables; where
//! a formula needs them they are recovered from the load equation.

use std::f64::consts::TAU;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{GridNetwork, InjectionVector};
use crate::powerflow::EquilibriumPoint;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemState {
    pub angles: Vec<f64>,
    /// One entry per generator, in ascending bus order.
    pub gen_frequencies: Vec<f64>,
}

impl SystemState {
    pub fn new(grid: &GridNetwork, angles: Vec<f64>, gen_frequencies: Vec<f64>) -> Result<Self> {
        grid.check_len(&angles)?;
        if gen_frequencies.len() != grid.n_generators() {
            return Err(Error::LengthMismatch {
                expected: grid.n_generators(),
                got: gen_frequencies.len(),
            });
        }
        Ok(Self { angles, gen_frequencies })
    }

    /// Zero-frequency state at the given angles.
    pub fn at_rest(grid: &GridNetwork, angles: &[f64]) -> Self {
        Self {
            angles: angles.to_vec(),
            gen_frequencies: vec![0.0; grid.n_generators()],
        }
    }

    pub fn from_ep(grid: &GridNetwork, ep: &EquilibriumPoint) -> Self {
        Self::at_rest(grid, &ep.angles)
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self {
            angles: self.angles.iter().map(|a| a + c).collect(),
            gen_frequencies: self.gen_frequencies.clone(),
        }
    }

    pub fn kinetic_energy(&self, grid: &GridNetwork) -> f64 {
        grid.generators()
            .iter()
            .zip(&self.gen_frequencies)
            .map(|(&k, w)| 0.5 * grid.buses()[k].inertia * w * w)
            .sum()
    }

    pub fn max_gen_frequency(&self) -> f64 {
        self.gen_frequencies.iter().fold(0.0_f64, |m, w| m.max(w.abs()))
    }

    fn pack(&self) -> Vec<f64> {
        let mut x = self.angles.clone();
        x.extend_from_slice(&self.gen_frequencies);
        x
    }

    fn unpack(x: &[f64], n: usize) -> Self {
        Self {
            angles: x[..n].to_vec(),
            gen_frequencies: x[n..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    /// `δ̇_k` for every bus (generator frequency, or the load equation).
    pub angle_rates: Vec<f64>,
    /// `δ̈_k` per generator.
    pub freq_rates: Vec<f64>,
}

/// Right-hand side of the swing equations with nominal couplings.
pub fn rhs(grid: &GridNetwork, p: &InjectionVector, s: &SystemState) -> StateDerivative {
    let n = grid.n_buses();
    let mut dx = vec![0.0; n + grid.n_generators()];
    let mut flow = vec![0.0; n];
    eval_rhs(grid, p.values(), &s.pack(), &mut dx, &mut flow);
    StateDerivative {
        angle_rates: dx[..n].to_vec(),
        freq_rates: dx[n..].to_vec(),
    }
}

fn eval_rhs(grid: &GridNetwork, p: &[f64], x: &[f64], dx: &mut [f64], flow: &mut [f64]) {
    let n = grid.n_buses();
    grid.flows_into(&x[..n], flow);
    for (k, bus) in grid.buses().iter().enumerate() {
        match grid.generator_slot(k) {
            Some(slot) => {
                let w = x[n + slot];
                dx[k] = w;
                dx[n + slot] = (p[k] - bus.damping * w - flow[k]) / bus.inertia;
            }
            None => dx[k] = (p[k] - flow[k]) / bus.damping,
        }
    }
}

/// Classical fixed-step RK4 over the packed state.
struct Rk4<'a> {
    grid: &'a GridNetwork,
    p: Vec<f64>,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    flow: Vec<f64>,
}

impl<'a> Rk4<'a> {
    fn new(grid: &'a GridNetwork, p: &InjectionVector) -> Self {
        let dim = grid.n_buses() + grid.n_generators();
        Self {
            grid,
            p: p.values().to_vec(),
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
            flow: vec![0.0; grid.n_buses()],
        }
    }

    fn set_injections(&mut self, p: &InjectionVector) {
        self.p.copy_from_slice(p.values());
    }

    fn step(&mut self, x: &mut [f64], h: f64) {
        let Self { grid, p, k, tmp, flow } = self;
        let [k1, k2, k3, k4] = k;
        eval_rhs(grid, p, x, k1, flow);
        for i in 0..x.len() {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        eval_rhs(grid, p, tmp, k2, flow);
        for i in 0..x.len() {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        eval_rhs(grid, p, tmp, k3, flow);
        for i in 0..x.len() {
            tmp[i] = x[i] + h * k3[i];
        }
        eval_rhs(grid, p, tmp, k4, flow);
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Separation,
    Switch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub detail: String,
    /// Bus ids of the separating line, for separation events.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<[usize; 2]>,
    /// Stage entered, for switch events.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SystemState>,
    pub events: Vec<Event>,
    /// Control stage active at each sample (always 0 for plain simulations).
    pub segment: Vec<usize>,
}

impl Trajectory {
    fn push(&mut self, t: f64, s: SystemState, segment: usize) {
        self.times.push(t);
        self.states.push(s);
        self.segment.push(segment);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> Option<&SystemState> {
        self.states.last()
    }

    /// Samples belonging to one control stage.
    pub fn stage_samples(&self, stage: usize) -> Trajectory {
        let mut out = Trajectory::default();
        for i in 0..self.len() {
            if self.segment[i] == stage {
                out.push(self.times[i], self.states[i].clone(), stage);
            }
        }
        out
    }

    pub fn separation_lines(&self) -> Vec<[usize; 2]> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Separation)
            .filter_map(|e| e.line)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub step: f64,
    pub horizon: f64,
    /// Record every this many integration steps (the first and last steps
    /// are always recorded).
    pub output_every: usize,
    pub detect_separation: bool,
    pub halt_on_separation: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            horizon: 20.0,
            output_every: 10,
            detect_separation: true,
            halt_on_separation: false,
        }
    }
}

impl SimOptions {
    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn with_output_every(mut self, every: usize) -> Self {
        self.output_every = every.max(1);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Domain(format!("step = {}", self.step)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Domain(format!("horizon = {}", self.horizon)));
        }
        Ok(())
    }

    fn n_steps(&self) -> usize {
        (self.horizon / self.step).round().max(1.0) as usize
    }
}

struct SeparationWatch {
    seen: Vec<bool>,
}

impl SeparationWatch {
    fn new(grid: &GridNetwork) -> Self {
        Self {
            seen: vec![false; grid.n_lines()],
        }
    }

    /// Appends an event for every line whose unwrapped difference first reaches 2π.
    fn check(&mut self, grid: &GridNetwork, angles: &[f64], t: f64, events: &mut Vec<Event>) -> bool {
        let mut fired = false;
        for (i, line) in grid.lines().iter().enumerate() {
            if !self.seen[i] && line.diff(angles).abs() >= TAU {
                self.seen[i] = true;
                fired = true;
                let ids = [line.from + 1, line.to + 1];
                events.push(Event {
                    time: t,
                    kind: EventKind::Separation,
                    detail: format!("|delta_{}{}| reached 2*pi", ids[0], ids[1]),
                    line: Some(ids),
                    stage: None,
                });
            }
        }
        fired
    }
}

/// Fixed-step RK4 integration of the swing equations from `s0`.
pub fn simulate(grid: &GridNetwork, p: &InjectionVector, s0: &SystemState, opts: SimOptions) -> Result<Trajectory> {
    opts.validate()?;
    grid.check_len(p.values())?;
    let n = grid.n_buses();
    let mut rk = Rk4::new(grid, p);
    let mut x = s0.pack();
    let mut traj = Trajectory::default();
    traj.push(0.0, s0.clone(), 0);
    let mut watch = SeparationWatch::new(grid);
    let steps = opts.n_steps();
    let every = opts.output_every.max(1);
    for i in 1..=steps {
        rk.step(&mut x, opts.step);
        let t = i as f64 * opts.step;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { time: t });
        }
        let separated = opts.detect_separation && watch.check(grid, &x[..n], t, &mut traj.events);
        let halt = separated && opts.halt_on_separation;
        if i % every == 0 || i == steps || halt {
            traj.push(t, SystemState::unpack(&x, n), 0);
        }
        if halt {
            break;
        }
    }
    Ok(traj)
}

/// Integrates under piecewise-constant injections, one vector per stage.
/// `should_switch(stage, state)` advances to the next stage; `stop(stage,
/// time_in_stage)` ends the run (or fails it) and is checked before every step.
pub(crate) fn simulate_staged<F>(
    grid: &GridNetwork,
    injections: &[InjectionVector],
    s0: &SystemState,
    step: f64,
    output_every: usize,
    mut should_switch: F,
    mut stop: impl FnMut(usize, f64) -> Result<bool>,
) -> Result<Trajectory>
where
    F: FnMut(usize, &SystemState) -> bool,
{
    let n = grid.n_buses();
    let mut rk = Rk4::new(grid, &injections[0]);
    let mut x = s0.pack();
    let mut traj = Trajectory::default();
    let mut stage = 0;
    let mut stage_start = 0.0;
    traj.push(0.0, s0.clone(), stage);
    let every = output_every.max(1);
    let mut i: usize = 0;
    loop {
        let t = i as f64 * step;
        if stage + 1 < injections.len() {
            let state = SystemState::unpack(&x, n);
            if should_switch(stage, &state) {
                stage += 1;
                stage_start = t;
                rk.set_injections(&injections[stage]);
                traj.events.push(Event {
                    time: t,
                    kind: EventKind::Switch,
                    detail: format!("switch to stage {}", stage + 1),
                    line: None,
                    stage: Some(stage + 1),
                });
                if traj.times.last() != Some(&t) {
                    traj.push(t, state, stage);
                } else {
                    *traj.segment.last_mut().unwrap() = stage;
                }
                continue;
            }
        }
        if stop(stage, t - stage_start)? {
            if traj.times.last() != Some(&t) {
                traj.push(t, SystemState::unpack(&x, n), stage);
            }
            return Ok(traj);
        }
        rk.step(&mut x, step);
        i += 1;
        let t = i as f64 * step;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { time: t });
        }
        if i.is_multiple_of(every) {
            traj.push(t, SystemState::unpack(&x, n), stage);
        }
    }
}

/// Removes a line (0-based endpoints) for fault-on simulation.
pub fn apply_fault(grid: &GridNetwork, a: usize, b: usize) -> Result<GridNetwork> {
    grid.without_line(a, b)
}

#[derive(Debug, Clone)]
pub struct FaultScenario {
    /// 0-based endpoints.
    pub tripped_line: (usize, usize),
    pub clear_time: f64,
    pub pre_fault_ep: EquilibriumPoint,
}

/// Runs the fault-on dynamics on the tripped grid from the pre-fault EP and
/// returns the state at clearing time.
pub fn fault_cleared_state(
    grid: &GridNetwork,
    fault_on_injections: &InjectionVector,
    scenario: &FaultScenario,
    step: f64,
) -> Result<SystemState> {
    if scenario.clear_time.is_nan() || scenario.clear_time <= 0.0 {
        return Err(Error::Domain(format!("clear_time = {}", scenario.clear_time)));
    }
    let (a, b) = scenario.tripped_line;
    let faulted = apply_fault(grid, a, b)?;
    let s0 = SystemState::from_ep(grid, &scenario.pre_fault_ep);
    let opts = SimOptions {
        step,
        horizon: scenario.clear_time,
        output_every: usize::MAX,
        detect_separation: false,
        halt_on_separation: false,
    };
    let traj = simulate(&faulted, fault_on_injections, &s0, opts)?;
    Ok(traj.states.last().cloned().unwrap_or(s0))
}

/// Closed-form energy: kinetic part plus
/// `Σ a_kj [cos δ*_kj − cos δ_kj − sin δ*_kj (δ_kj − δ*_kj)]`.
pub fn energy(grid: &GridNetwork, s: &SystemState, ep: &EquilibriumPoint) -> f64 {
    s.kinetic_energy(grid) + potential_energy(grid, &s.angles, &ep.angles)
}

pub fn potential_energy(grid: &GridNetwork, angles: &[f64], ep_angles: &[f64]) -> f64 {
    grid.lines()
        .iter()
        .map(|l| {
            let x = l.diff(angles);
            let xs = l.diff(ep_angles);
            l.coupling * (xs.cos() - x.cos() - xs.sin() * (x - xs))
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    /// Largest `E(s_{i+1}) − E(s_i)` over consecutive samples (0 for fewer than two samples).
    pub max_increment: f64,
    pub energies: Vec<f64>,
    /// `−Σ_k d_k δ̇_k²` at each sample, load rates taken from the load equation.
    pub dissipation: Vec<f64>,
}

pub fn energy_decay_check(
    grid: &GridNetwork,
    p: &InjectionVector,
    traj: &Trajectory,
    ep: &EquilibriumPoint,
) -> DecayReport {
    let energies: Vec<f64> = traj.states.iter().map(|s| energy(grid, s, ep)).collect();
    let max_increment = energies
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let dissipation = traj.states.iter().map(|s| dissipation_rate(grid, p, s)).collect();
    DecayReport {
        max_increment,
        energies,
        dissipation,
    }
}

pub fn dissipation_rate(grid: &GridNetwork, p: &InjectionVector, s: &SystemState) -> f64 {
    let d = rhs(grid, p, s);
    grid.buses()
        .iter()
        .zip(&d.angle_rates)
        .map(|(b, w)| -b.damping * w * w)
        .sum()
}

/// `sqrt(Σ_{i≥2} ((δ_i − δ_1) − (δ*_i − δ*_1))²)`.
pub fn angle_distance(angles: &[f64], target: &[f64]) -> f64 {
    let (a0, t0) = (angles[0], target[0]);
    angles[1..]
        .iter()
        .zip(&target[1..])
        .map(|(a, t)| {
            let r = (a - a0) - (t - t0);
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use invstab::casestudy::{run_case_study, CaseStudyOptions, NineBusCase};
use invstab::certificates::{classical_certificate_with, inverse_certificate, inverse_region, DEFAULT_LAMBDA, DEFAULT_RESTARTS};
use invstab::control::{execute_plan, plan_emergency_control, sopf_dispatch, DispatchProblem};
use invstab::dynamics::{simulate, SimOptions, SystemState};
use invstab::grid::{load_grid, GridNetwork, InjectionVector};
use invstab::io::{self, TrajectoryReference};
use invstab::powerflow::{dc_approx_ep, solve_equilibrium, EquilibriumPoint};
use invstab::screening::screen;
use invstab::{Error, Result};

#[derive(Parser)]
#[command(name = "invstab", version, about = "Inverse-stability certificates and emergency control for lossless power grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the power-flow equations for an equilibrium point.
    SolveEp(SolveEpArgs),
    /// Integrate the swing dynamics from an initial state.
    Simulate(SimulateArgs),
    /// Certify convergence from a state to the EP of the given injections.
    Certify(CertifyArgs),
    /// Report the inverse stability region of a state.
    Region(RegionArgs),
    /// Screen a batch of injection scenarios.
    Screen(ScreenArgs),
    /// Plan (and optionally execute) a sequence of redispatch stages.
    Plan(PlanArgs),
    /// Cheapest dispatch whose EP stays in the inverse stability region.
    Sopf(SopfArgs),
    /// Run the bundled 9-bus emergency-control study.
    Casestudy(CasestudyArgs),
}

#[derive(Args)]
struct GridArgs {
    /// Grid file (JSON).
    #[arg(long)]
    grid: PathBuf,
}

#[derive(Args)]
struct SolveEpArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Injection file: array of {bus, power}.
    #[arg(long)]
    injections: PathBuf,
    /// Also report membership in the λ-box.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    injections: PathBuf,
    /// State file: {angles, gen_frequencies}.
    #[arg(long)]
    state: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 20.0)]
    horizon: f64,
    /// Record every this many steps.
    #[arg(long, default_value_t = 10)]
    output_every: usize,
    #[arg(long)]
    no_detect_separation: bool,
    /// Stop at the first separation event.
    #[arg(long)]
    halt_on_separation: bool,
    /// Output directory for trajectory.csv and events.json; without it the CSV
    /// goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Classical,
    Inverse,
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Injections whose EP is the target.
    #[arg(long)]
    injections: PathBuf,
    #[arg(long)]
    state: PathBuf,
    #[arg(long, value_enum, default_value = "inverse")]
    method: Method,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Restarts per face for the classical method.
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    restarts: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RegionArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    state: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScreenArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Batch file: array of {name, injections: [{bus, power}]}.
    #[arg(long)]
    injections: PathBuf,
    /// Initial state; defaults to all angles and frequencies zero.
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Injections of the desired EP; non-controllable buses keep these values
    /// in every stage.
    #[arg(long)]
    injections: PathBuf,
    #[arg(long)]
    state: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Comma-separated controllable bus ids; defaults to all buses.
    #[arg(long, value_delimiter = ',')]
    controllable: Option<Vec<usize>>,
    /// Dispatch bounds `lo,hi` applied to every controllable bus.
    #[arg(long, value_parser = parse_bounds, allow_hyphen_values = true)]
    bounds: Option<(f64, f64)>,
    #[arg(long, default_value_t = 10)]
    max_stages: usize,
    /// Simulate the plan and write the staged trajectory.
    #[arg(long)]
    execute: bool,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    /// Horizon per stage for `--execute`.
    #[arg(long, default_value_t = 40.0)]
    horizon: f64,
    /// Output directory for plan.json (and trajectory.csv, events.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SopfArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    state: PathBuf,
    /// Cost file: {costs: [{bus, c2, c1, c0}], thermal_limits: [{from, to, limit}]}.
    #[arg(long)]
    costs: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CasestudyArgs {
    /// Only run the uncontrolled simulation.
    #[arg(long)]
    skip_control: bool,
    /// Seed of the fluctuation screening batch.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    /// Horizon of the uncontrolled run.
    #[arg(long, default_value_t = 10.0)]
    horizon: f64,
    /// Output directory for trajectories, plan and summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_bounds(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v}: {e}"));
    Ok((num(lo)?, num(hi)?))
}

/// Writes `text` to `dir/name` when a directory is given, else to stdout.
fn emit_in(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|source| Error::Io {
                path: d.display().to_string(),
                source,
            })?;
            io::write_text(d.join(name), text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Writes `text` to the file `out` when given, else to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => io::write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_ep(grid: &GridNetwork, p: &InjectionVector) -> Result<EquilibriumPoint> {
    solve_equilibrium(grid, p, None)
}

#[derive(Serialize)]
struct EpReport {
    angles: Vec<f64>,
    residual: f64,
    in_p: bool,
    worst_line: Option<[usize; 2]>,
    worst_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_lambda: Option<bool>,
    dc_approx: Vec<f64>,
}

fn line_ids(grid: &GridNetwork, idx: Option<usize>) -> Option<[usize; 2]> {
    idx.map(|i| {
        let l = &grid.lines()[i];
        [l.from + 1, l.to + 1]
    })
}

fn cmd_solve_ep(a: SolveEpArgs) -> Result<()> {
    let grid = load_grid(&a.grid.grid)?;
    let p = io::load_injections(&grid, &a.injections)?;
    let ep = load_ep(&grid, &p)?;
    let check = ep.in_box(&grid, std::f64::consts::FRAC_PI_2);
    let report = EpReport {
        in_p: check.inside,
        worst_line: line_ids(&grid, check.worst_line),
        worst_value: check.worst_value,
        in_lambda: a.lambda.map(|l| ep.in_lambda(&grid, l)),
        dc_approx: dc_approx_ep(&grid, &p)?,
        angles: ep.angles,
        residual: ep.residual,
    };
    emit(a.out.as_deref(), &io::to_json(&report)?)
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let grid = load_grid(&a.grid.grid)?;
    let p = io::load_injections(&grid, &a.injections)?;
    let s0 = io::load_state(&grid, &a.state)?;
    let opts = SimOptions {
        step: a.step,
        horizon: a.horizon,
        output_every: a.output_every.max(1),
        detect_separation: !a.no_detect_separation,
        halt_on_separation: a.halt_on_separation,
    };
    let traj = simulate(&grid, &p, &s0, opts)?;
    // energy and distance columns refer to the EP of the injections when one exists
    let ep = load_ep(&grid, &p).ok();
    let eps: Vec<EquilibriumPoint> = ep.iter().cloned().collect();
    let reference = TrajectoryReference {
        energy_eps: &eps,
        target: ep.as_ref().map(|e| e.angles.as_slice()),
    };
    let csv = io::trajectory_csv(&grid, &traj, &reference);
    match a.out.as_deref() {
        Some(dir) => {
            emit_in(Some(dir), "trajectory.csv", &csv)?;
            emit_in(Some(dir), "events.json", &io::events_json(&traj)?)
        }
        None => {
            for e in &traj.events {
                eprintln!("event t={} {}", io::fmt_num(e.time), e.detail);
            }
            emit(None, &csv)
        }
    }
}

fn cmd_certify(a: CertifyArgs) -> Result<()> {
    let grid = load_grid(&a.grid.grid)?;
    let p = io::load_injections(&grid, &a.injections)?;
    let s0 = io::load_state(&grid, &a.state)?;
    let ep = load_ep(&grid, &p)?;
    let report = match a.method {
        Method::Classical => classical_certificate_with(&grid, &s0, &ep, a.restarts)?,
        Method::Inverse => inverse_certificate(&grid, &s0, &ep, a.lambda)?,
    };
    emit(a.out.as_deref(), &io::to_json(&report)?)
}

fn cmd_region(a: RegionArgs) -> Result<()> {
    let grid = load_grid(&a.grid.grid)?;
    let s0 = io::load_state(&grid, &a.state)?;
    let region = inverse_region(&grid, &s0, a.lambda)?;
    emit(a.out.as_deref(), &io::to_json(&region.report())?)
}

fn cmd_screen(a: ScreenArgs) -> Result<()> {
    let grid = load_grid(&a.grid.grid)?;
    let batch = io::load_batch(&grid, &a.injections)?;
    let s0 = match &a.state {
        Some(path) => io::load_state(&grid, path)?,
        None => SystemState::at_rest(&grid, &vec![0.0; grid.n_buses()]),
    };
    let results = screen(&grid, &s0, a.lambda, &batch, a.workers)?;
    emit(a.out.as_deref(), &io::screen_csv(&results))
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let grid = load_grid(&a.grid.grid)?;
    let p = io::load_injections(&grid, &a.injections)?;
    let s0 = io::load_state(&grid, &a.state)?;
    let desired = load_ep(&grid, &p)?;
    let controllable: Vec<usize> = match &a.controllable {
        Some(ids) => ids
            .iter()
            .map(|&id| {
                id.checked_sub(1)
                    .filter(|&k| k < grid.n_buses())
                    .ok_or_else(|| Error::Validation {
                        element: format!("controllable bus {id}"),
                        reason: "does not exist".into(),
                    })
            })
            .collect::<Result<_>>()?,
        None => (0..grid.n_buses()).collect(),
    };
    let bounds = a.bounds.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let problem = DispatchProblem::new(
        &grid,
        controllable.clone(),
        p.values().to_vec(),
        vec![bounds; controllable.len()],
        a.lambda,
    )?;
    let plan = plan_emergency_control(&grid, &s0, &desired, a.lambda, &problem, a.max_stages)?;
    let out = a.out.as_deref();
    emit_in(out, "plan.json", &io::to_json(&plan)?)?;
    if a.execute {
        let traj = execute_plan(&grid, &s0, &plan, a.step, a.horizon)?;
        let eps: Vec<EquilibriumPoint> = plan.stages.iter().map(|s| s.ep.clone()).collect();
        let reference = TrajectoryReference {
            energy_eps: &eps,
            target: Some(&desired.angles),
        };
        match out {
            Some(dir) => {
                emit_in(Some(dir), "trajectory.csv", &io::trajectory_csv(&grid, &traj, &reference))?;
                emit_in(Some(dir), "events.json", &io::events_json(&traj)?)?;
            }
            None => {
                let last = traj.final_state().expect("trajectory has samples");
                eprintln!(
                    "executed {} stages, final distance {}",
                    plan.stages.len(),
                    io::fmt_num(invstab::dynamics::angle_distance(&last.angles, &desired.angles))
                );
            }
        }
    }
    Ok(())
}

fn cmd_sopf(a: SopfArgs) -> Result<()> {
    let grid = load_grid(&a.grid.grid)?;
    let s0 = io::load_state(&grid, &a.state)?;
    let problem = io::load_sopf(&grid, &a.costs, s0, a.lambda)?;
    let result = sopf_dispatch(&grid, &problem)?;
    emit(a.out.as_deref(), &io::to_json(&result)?)
}

/// Returns whether every check passed.
fn cmd_casestudy(a: CasestudyArgs) -> Result<bool> {
    let opts = CaseStudyOptions {
        skip_control: a.skip_control,
        seed: a.seed,
        step: a.step,
        uncontrolled_horizon: a.horizon,
        ..CaseStudyOptions::default()
    };
    let report = run_case_study(&opts)?;
    let summary = report.summary_json()?;
    if let Some(dir) = a.out.as_deref() {
        let case = NineBusCase::load()?;
        let grid = &case.grid;
        let desired = std::slice::from_ref(&report.desired);
        let reference = TrajectoryReference {
            energy_eps: desired,
            target: Some(&report.desired.angles),
        };
        emit_in(Some(dir), "uncontrolled.csv", &io::trajectory_csv(grid, &report.uncontrolled, &reference))?;
        emit_in(Some(dir), "uncontrolled_events.json", &io::events_json(&report.uncontrolled)?)?;
        if let Some(run) = &report.controlled {
            let eps: Vec<EquilibriumPoint> = run.plan.stages.iter().map(|s| s.ep.clone()).collect();
            let staged = TrajectoryReference {
                energy_eps: &eps,
                target: Some(&report.desired.angles),
            };
            emit_in(Some(dir), "controlled.csv", &io::trajectory_csv(grid, &run.trajectory, &staged))?;
            emit_in(Some(dir), "controlled_events.json", &io::events_json(&run.trajectory)?)?;
            emit_in(Some(dir), "plan.json", &io::to_json(&run.plan)?)?;
            emit_in(Some(dir), "fluctuation_screen.csv", &io::screen_csv(&run.fluctuation))?;
        }
        emit_in(Some(dir), "summary.json", &summary)?;
    }
    print!("{summary}");
    for c in &report.checks {
        eprintln!("{} {}", if c.passes { "PASS" } else { "FAIL" }, c.name);
    }
    Ok(report.all_pass())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::SolveEp(a) => cmd_solve_ep(a)?,
        Command::Simulate(a) => cmd_simulate(a)?,
        Command::Certify(a) => cmd_certify(a)?,
        Command::Region(a) => cmd_region(a)?,
        Command::Screen(a) => cmd_screen(a)?,
        Command::Plan(a) => cmd_plan(a)?,
        Command::Sopf(a) => cmd_sopf(a)?,
        Command::Casestudy(a) => return cmd_casestudy(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

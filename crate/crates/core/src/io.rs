//! File formats: injection, state and batch files in; trajectory, screening
//! and report files out. Numbers are written with 12 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{QuadraticCost, SopfProblem};
use crate::dynamics::{angle_distance, energy, SystemState, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{GridNetwork, InjectionVector};
use crate::powerflow::EquilibriumPoint;
use crate::screening::{ScreenResult, ScreenScenario};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionRecord {
    pub bus: usize,
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateRecord {
    pub angles: Vec<f64>,
    pub gen_frequencies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRecord {
    pub name: String,
    pub injections: Vec<InjectionRecord>,
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(format!("{what}: {e}")))
}

/// Buses not listed get 0. Unknown or repeated buses are rejected, and the
/// result must balance.
pub fn injections_from_records(grid: &GridNetwork, records: &[InjectionRecord]) -> Result<InjectionVector> {
    let n = grid.n_buses();
    let mut values = vec![0.0; n];
    let mut seen = vec![false; n];
    for r in records {
        if r.bus == 0 || r.bus > n {
            return Err(Error::validation(format!("injection for bus {}", r.bus), "no such bus"));
        }
        if std::mem::replace(&mut seen[r.bus - 1], true) {
            return Err(Error::validation(format!("injection for bus {}", r.bus), "listed twice"));
        }
        if !r.power.is_finite() {
            return Err(Error::validation(format!("injection for bus {}", r.bus), "not finite"));
        }
        values[r.bus - 1] = r.power;
    }
    InjectionVector::new(values)
}

pub fn injection_records(p: &InjectionVector) -> Vec<InjectionRecord> {
    p.values()
        .iter()
        .enumerate()
        .map(|(i, &power)| InjectionRecord { bus: i + 1, power })
        .collect()
}

pub fn parse_injections(grid: &GridNetwork, text: &str) -> Result<InjectionVector> {
    let records: Vec<InjectionRecord> = parse_json(text, "injection file")?;
    injections_from_records(grid, &records)
}

pub fn load_injections(grid: &GridNetwork, path: impl AsRef<Path>) -> Result<InjectionVector> {
    parse_injections(grid, &read_text(path)?)
}

pub fn parse_state(grid: &GridNetwork, text: &str) -> Result<SystemState> {
    let r: StateRecord = parse_json(text, "state file")?;
    if r.angles.iter().chain(&r.gen_frequencies).any(|v| !v.is_finite()) {
        return Err(Error::validation("state", "contains a non-finite value"));
    }
    SystemState::new(grid, r.angles, r.gen_frequencies)
}

pub fn load_state(grid: &GridNetwork, path: impl AsRef<Path>) -> Result<SystemState> {
    parse_state(grid, &read_text(path)?)
}

pub fn parse_batch(grid: &GridNetwork, text: &str) -> Result<Vec<ScreenScenario>> {
    let records: Vec<ScenarioRecord> = parse_json(text, "scenario batch")?;
    records
        .into_iter()
        .map(|r| {
            let injections = injections_from_records(grid, &r.injections).map_err(|e| match e {
                Error::Unbalanced { imbalance } => {
                    Error::validation(format!("scenario {}", r.name), format!("injections sum to {imbalance:e}"))
                }
                other => other,
            })?;
            Ok(ScreenScenario { name: r.name, injections })
        })
        .collect()
}

pub fn load_batch(grid: &GridNetwork, path: impl AsRef<Path>) -> Result<Vec<ScreenScenario>> {
    parse_batch(grid, &read_text(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRecord {
    pub bus: usize,
    pub c2: f64,
    pub c1: f64,
    #[serde(default)]
    pub c0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalRecord {
    pub from: usize,
    pub to: usize,
    pub limit: f64,
}

/// Generator costs and optional line limits for the stability-constrained OPF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SopfFile {
    pub costs: Vec<CostRecord>,
    #[serde(default)]
    pub thermal_limits: Vec<ThermalRecord>,
}

/// Generators without a cost entry cost nothing; lines without a limit are
/// unconstrained.
pub fn sopf_problem_from_file(grid: &GridNetwork, file: &SopfFile, start: SystemState, lambda: f64) -> Result<SopfProblem> {
    let zero = QuadraticCost { c2: 0.0, c1: 0.0, c0: 0.0 };
    let mut cost = vec![zero; grid.n_generators()];
    let mut seen = vec![false; grid.n_generators()];
    for r in &file.costs {
        let slot = r
            .bus
            .checked_sub(1)
            .filter(|&k| k < grid.n_buses())
            .and_then(|k| grid.generator_slot(k))
            .ok_or_else(|| Error::validation(format!("cost for bus {}", r.bus), "not a generator bus"))?;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::validation(format!("cost for bus {}", r.bus), "listed twice"));
        }
        if !(r.c2 >= 0.0 && r.c1.is_finite() && r.c0.is_finite() && r.c2.is_finite()) {
            return Err(Error::validation(format!("cost for bus {}", r.bus), "needs finite coefficients with c2 >= 0"));
        }
        cost[slot] = QuadraticCost { c2: r.c2, c1: r.c1, c0: r.c0 };
    }
    let mut thermal_limits = vec![None; grid.n_lines()];
    for r in &file.thermal_limits {
        let line = match (r.from.checked_sub(1), r.to.checked_sub(1)) {
            (Some(a), Some(b)) => grid.find_line(a, b),
            _ => None,
        }
        .ok_or(Error::UnknownLine(r.from, r.to))?;
        if r.limit.is_nan() || r.limit < 0.0 {
            return Err(Error::validation(format!("limit of line {}-{}", r.from, r.to), "must be nonnegative"));
        }
        thermal_limits[line] = Some(r.limit);
    }
    Ok(SopfProblem {
        cost,
        start,
        lambda,
        thermal_limits,
    })
}

pub fn load_sopf(grid: &GridNetwork, path: impl AsRef<Path>, start: SystemState, lambda: f64) -> Result<SopfProblem> {
    let file: SopfFile = parse_json(&read_text(path)?, "sopf file")?;
    sopf_problem_from_file(grid, &file, start, lambda)
}

/// `%.12g`: 12 significant digits, trailing zeros removed, exponent form
/// outside `[1e-5, 1e12)`.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Rounds every number to 12 significant digits before serializing.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::Parse(e.to_string()))?;
    round_json(&mut v);
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn round_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) => {
            if n.is_f64() {
                let x = n.as_f64().expect("f64 number");
                let r: f64 = format!("{x:.11e}").parse().expect("round trip");
                if let Some(num) = serde_json::Number::from_f64(r) {
                    *n = num;
                }
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(round_json),
        serde_json::Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Reference points for the `energy` and `dist_target` trajectory columns.
pub struct TrajectoryReference<'a> {
    /// EP for the energy column, indexed by the sample's stage (the last one
    /// is reused for later stages). Empty leaves the column as `nan`.
    pub energy_eps: &'a [EquilibriumPoint],
    pub target: Option<&'a [f64]>,
}

pub fn trajectory_csv(grid: &GridNetwork, traj: &Trajectory, reference: &TrajectoryReference) -> String {
    let n = grid.n_buses();
    let mut out = String::from("t");
    for k in 1..=n {
        write!(out, ",delta_{k}").unwrap();
    }
    for &k in grid.generators() {
        write!(out, ",omega_g{}", k + 1).unwrap();
    }
    out.push_str(",energy,dist_target\n");
    for ((t, s), &stage) in traj.times.iter().zip(&traj.states).zip(&traj.segment) {
        out.push_str(&fmt_num(*t));
        for v in s.angles.iter().chain(&s.gen_frequencies) {
            out.push(',');
            out.push_str(&fmt_num(*v));
        }
        let e = match reference.energy_eps.len() {
            0 => f64::NAN,
            len => energy(grid, s, &reference.energy_eps[stage.min(len - 1)]),
        };
        let d = reference.target.map_or(f64::NAN, |target| angle_distance(&s.angles, target));
        writeln!(out, ",{},{}", fmt_num(e), fmt_num(d)).unwrap();
    }
    out
}

pub fn events_json(traj: &Trajectory) -> Result<String> {
    to_json(&traj.events)
}

pub fn screen_csv(results: &[ScreenResult]) -> String {
    let mut out = String::from("name,norm,threshold,sync_pass,ep_found,ep_in_lambda,lambda_margin,ball_margin,in_region,pass,error\n");
    for r in results {
        let opt = |x: Option<f64>| x.map_or(String::new(), fmt_num);
        let flag = |x: Option<bool>| x.map_or(String::new(), |b| b.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.name),
            fmt_num(r.norm),
            fmt_num(r.threshold),
            r.sync_pass,
            r.ep_found,
            flag(r.ep_in_lambda),
            opt(r.lambda_margin),
            opt(r.ball_margin),
            flag(r.in_region),
            r.passes,
            csv_field(r.error.as_deref().unwrap_or("")),
        )
        .unwrap();
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, BusKind, Line};

    fn three_bus() -> GridNetwork {
        let bus = |id, kind, inertia| Bus { id, kind, voltage: 1.0, inertia, damping: 1.0 };
        let line = |from, to| Line { from, to, susceptance: 1.0, coupling: 1.0, coupling_lo: 1.0, coupling_hi: 1.0 };
        GridNetwork::new(
            vec![bus(1, BusKind::Generator, 1.0), bus(2, BusKind::Load, 0.0), bus(3, BusKind::Load, 0.0)],
            vec![line(0, 1), line(1, 2)],
        )
        .unwrap()
    }

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(-2.5), "-2.5");
        assert_eq!(fmt_num(std::f64::consts::PI), "3.14159265359");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_num(123456.789), "123456.789");
        assert_eq!(fmt_num(1e-7), "1e-07");
        assert_eq!(fmt_num(-1.25e-9), "-1.25e-09");
        assert_eq!(fmt_num(1e15), "1e+15");
        assert_eq!(fmt_num(0.0001), "0.0001");
        assert_eq!(fmt_num(999999999999.5), "1e+12");
        assert_eq!(fmt_num(f64::NAN), "nan");
    }

    #[test]
    fn json_rounding() {
        let s = to_json(&vec![1.0 / 3.0, 2.0]).unwrap();
        let v: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(v[0], 0.333333333333);
        assert_eq!(v[1], 2.0);
    }

    #[test]
    fn injection_file_rules() {
        let g = three_bus();
        let p = parse_injections(&g, r#"[{"bus": 1, "power": 0.5}, {"bus": 3, "power": -0.5}]"#).unwrap();
        assert_eq!(p.values(), &[0.5, 0.0, -0.5]);
        let err = parse_injections(&g, r#"[{"bus": 1, "power": 0.5}]"#).unwrap_err();
        assert!(matches!(err, Error::Unbalanced { .. }));
        assert!(parse_injections(&g, r#"[{"bus": 4, "power": 0.0}]"#).is_err());
        assert!(parse_injections(&g, r#"[{"bus": 1, "power": 0.0}, {"bus": 1, "power": 0.0}]"#).is_err());
        assert!(matches!(parse_injections(&g, r#"[{"bus": 1, "pow": 0.0}]"#), Err(Error::Parse(_))));
    }

    #[test]
    fn state_file_lengths() {
        let g = three_bus();
        let s = parse_state(&g, r#"{"angles": [0, 0.1, 0.2], "gen_frequencies": [0.5]}"#).unwrap();
        assert_eq!(s.gen_frequencies, vec![0.5]);
        assert!(matches!(
            parse_state(&g, r#"{"angles": [0, 0.1], "gen_frequencies": [0.5]}"#),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn csv_header_and_rows() {
        let g = three_bus();
        let s = SystemState::at_rest(&g, &[0.0; 3]);
        let traj = Trajectory {
            times: vec![0.0],
            states: vec![s],
            events: vec![],
            segment: vec![0],
        };
        let csv = trajectory_csv(&g, &traj, &TrajectoryReference { energy_eps: &[], target: Some(&[0.0; 3]) });
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,delta_1,delta_2,delta_3,omega_g1,energy,dist_target");
        assert_eq!(lines.next().unwrap(), "0,0,0,0,0,nan,0");
    }
}

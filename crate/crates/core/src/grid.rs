//! Grid topology, parameters and the graph linear algebra built on them.
//!
//! Bus ids are 1-based in files and in [`Bus::id`]; everything else in the
//! crate addresses buses by their 0-based index, which is `id - 1`.

use std::collections::{HashSet, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σ P_k|` for an injection vector to count as balanced.
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub voltage: f64,
    /// Only meaningful for generators.
    pub inertia: f64,
    pub damping: f64,
}

impl Bus {
    pub fn is_generator(&self) -> bool {
        self.kind == BusKind::Generator
    }
}

/// A transmission line between two buses (0-based indices).
///
/// `coupling` is the nominal `V_k V_j B_kj`; `coupling_lo`/`coupling_hi`
/// bracket the values it may take when line parameters are adjusted.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
    pub coupling: f64,
    pub coupling_lo: f64,
    pub coupling_hi: f64,
}

impl Line {
    pub fn weight(&self, choice: CouplingChoice) -> f64 {
        match choice {
            CouplingChoice::Nominal => self.coupling,
            CouplingChoice::Lower => self.coupling_lo,
            CouplingChoice::Upper => self.coupling_hi,
        }
    }

    pub fn connects(&self, a: usize, b: usize) -> bool {
        (self.from == a && self.to == b) || (self.from == b && self.to == a)
    }

    /// `x_from - x_to`.
    #[inline]
    pub fn diff(&self, x: &[f64]) -> f64 {
        x[self.from] - x[self.to]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingChoice {
    #[default]
    Nominal,
    #[serde(alias = "lo")]
    Lower,
    #[serde(alias = "hi")]
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridNetwork {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    generators: Vec<usize>,
    gen_slot: Vec<Option<usize>>,
}

impl GridNetwork {
    /// Builds a validated network. Buses must carry ids `1..=N` in order.
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self> {
        let grid = Self::build(buses, lines)?;
        if !grid.is_connected() {
            return Err(Error::validation("grid", "graph is not connected"));
        }
        Ok(grid)
    }

    /// Same checks as [`GridNetwork::new`] except connectivity. Used for
    /// fault-on topologies.
    pub(crate) fn new_unchecked_connectivity(buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self> {
        Self::build(buses, lines)
    }

    fn build(buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self> {
        let n = buses.len();
        if n < 2 {
            return Err(Error::validation("grid", "needs at least two buses"));
        }
        for (idx, bus) in buses.iter().enumerate() {
            let name = format!("bus {}", bus.id);
            if bus.id != idx + 1 {
                return Err(Error::validation(name, format!("expected id {}", idx + 1)));
            }
            if !(bus.voltage.is_finite() && bus.voltage > 0.0) {
                return Err(Error::validation(name, format!("voltage must be positive, got {}", bus.voltage)));
            }
            if !(bus.damping.is_finite() && bus.damping > 0.0) {
                return Err(Error::validation(name, format!("damping must be positive, got {}", bus.damping)));
            }
            if bus.is_generator() && !(bus.inertia.is_finite() && bus.inertia > 0.0) {
                return Err(Error::validation(name, format!("generator inertia must be positive, got {}", bus.inertia)));
            }
        }
        let mut seen = HashSet::new();
        for line in &lines {
            let name = format!("line {{{}, {}}}", line.from + 1, line.to + 1);
            if line.from >= n || line.to >= n {
                return Err(Error::validation(name, "references a missing bus"));
            }
            if line.from == line.to {
                return Err(Error::validation(name, "is a self loop"));
            }
            let key = (line.from.min(line.to), line.from.max(line.to));
            if !seen.insert(key) {
                return Err(Error::validation(name, "is duplicated"));
            }
            if !(line.susceptance.is_finite() && line.susceptance > 0.0) {
                return Err(Error::validation(name, "susceptance must be positive"));
            }
            if !(line.coupling_lo > 0.0 && line.coupling_lo <= line.coupling && line.coupling <= line.coupling_hi) {
                return Err(Error::validation(
                    name,
                    format!(
                        "coupling interval [{}, {}] must be positive and contain {}",
                        line.coupling_lo, line.coupling_hi, line.coupling
                    ),
                ));
            }
        }
        let generators: Vec<usize> = (0..n).filter(|&k| buses[k].is_generator()).collect();
        if generators.is_empty() {
            return Err(Error::validation("grid", "needs at least one generator"));
        }
        let mut gen_slot = vec![None; n];
        for (slot, &k) in generators.iter().enumerate() {
            gen_slot[k] = Some(slot);
        }
        Ok(Self {
            buses,
            lines,
            generators,
            gen_slot,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    /// Bus indices of the generators, ascending.
    pub fn generators(&self) -> &[usize] {
        &self.generators
    }

    pub fn n_generators(&self) -> usize {
        self.generators.len()
    }

    /// Position of bus `k` among the generators, if it is one.
    pub fn generator_slot(&self, k: usize) -> Option<usize> {
        self.gen_slot[k]
    }

    pub fn loads(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_buses()).filter(|&k| self.gen_slot[k].is_none())
    }

    pub fn find_line(&self, a: usize, b: usize) -> Option<usize> {
        self.lines.iter().position(|l| l.connects(a, b))
    }

    pub fn weights(&self, choice: CouplingChoice) -> Vec<f64> {
        self.lines.iter().map(|l| l.weight(choice)).collect()
    }

    /// Edge differences `x_from - x_to`, one per line.
    pub fn edge_diffs(&self, x: &[f64]) -> Vec<f64> {
        self.lines.iter().map(|l| l.diff(x)).collect()
    }

    /// Nodal injections `Σ_j a_kj sin(x_k - x_j)` with nominal couplings.
    pub fn flows(&self, angles: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_buses()];
        self.flows_into(angles, &mut out);
        out
    }

    pub(crate) fn flows_into(&self, angles: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for line in &self.lines {
            let f = line.coupling * line.diff(angles).sin();
            out[line.from] += f;
            out[line.to] -= f;
        }
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_buses();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            adj[l.from].push(l.to);
            adj[l.to].push(l.from);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(k) = queue.pop_front() {
            for &j in &adj[k] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == n
    }

    /// Copy of the grid without the line `{a, b}` (0-based). The result may be
    /// disconnected.
    pub fn without_line(&self, a: usize, b: usize) -> Result<Self> {
        let idx = self.find_line(a, b).ok_or(Error::UnknownLine(a + 1, b + 1))?;
        let mut lines = self.lines.clone();
        lines.remove(idx);
        Self::new_unchecked_connectivity(self.buses.clone(), lines)
    }

    /// Copy of the grid with an extra line appended.
    pub fn with_line(&self, line: Line) -> Result<Self> {
        let mut lines = self.lines.clone();
        lines.push(line);
        Self::new_unchecked_connectivity(self.buses.clone(), lines)
    }

    pub fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_buses() {
            return Err(Error::LengthMismatch {
                expected: self.n_buses(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Per-bus active power injections, balanced to [`BALANCE_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct InjectionVector(Vec<f64>);

impl InjectionVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let imbalance: f64 = values.iter().sum();
        if !imbalance.is_finite() || imbalance.abs() > BALANCE_TOL {
            return Err(Error::Unbalanced { imbalance });
        }
        Ok(Self(values))
    }

    /// Removes the mean so the entries sum to zero. `L†p` is unchanged by this.
    pub fn rebalanced(mut values: Vec<f64>) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.iter_mut().for_each(|v| *v -= mean);
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Weighted graph Laplacian: off-diagonal `(k, j) = -w_kj` on lines, rows sum to zero.
pub fn weighted_laplacian(grid: &GridNetwork, choice: CouplingChoice) -> DMatrix<f64> {
    laplacian_from_weights(grid, &grid.weights(choice))
}

pub(crate) fn laplacian_from_weights(grid: &GridNetwork, weights: &[f64]) -> DMatrix<f64> {
    let n = grid.n_buses();
    let mut lap = DMatrix::zeros(n, n);
    for (line, &w) in grid.lines().iter().zip(weights) {
        let (k, j) = (line.from, line.to);
        lap[(k, k)] += w;
        lap[(j, j)] += w;
        lap[(k, j)] -= w;
        lap[(j, k)] -= w;
    }
    lap
}

/// Moore–Penrose pseudoinverse of the nominal Laplacian.
pub fn laplacian_pseudoinverse(grid: &GridNetwork) -> Result<DMatrix<f64>> {
    pseudoinverse_with(grid, CouplingChoice::Nominal)
}

pub fn pseudoinverse_with(grid: &GridNetwork, choice: CouplingChoice) -> Result<DMatrix<f64>> {
    pseudoinverse_from_weights(grid, &grid.weights(choice))
}

/// For a connected graph `L + J/n` is invertible and its inverse minus `J/n`
/// is `L†` (the inverse of `L` restricted to mean-zero vectors).
pub(crate) fn pseudoinverse_from_weights(grid: &GridNetwork, weights: &[f64]) -> Result<DMatrix<f64>> {
    if !grid.is_connected() {
        return Err(Error::Singular("graph is disconnected; zero eigenvalue is repeated".into()));
    }
    let n = grid.n_buses();
    let shift = 1.0 / n as f64;
    let mut m = laplacian_from_weights(grid, weights);
    m.add_scalar_mut(shift);
    let inv = m
        .try_inverse()
        .ok_or_else(|| Error::Singular("shifted laplacian could not be inverted".into()))?;
    Ok(inv.add_scalar(-shift))
}

/// `max_{ {i,j} ∈ E } |x_i - x_j|`.
pub fn edge_infinity_norm(grid: &GridNetwork, x: &[f64]) -> Result<f64> {
    grid.check_len(x)?;
    Ok(grid.lines().iter().map(|l| l.diff(x).abs()).fold(0.0, f64::max))
}

pub(crate) fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(x)).as_slice().to_vec()
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: usize,
    pub kind: BusKind,
    pub voltage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<f64>,
    pub damping: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_hi: Option<f64>,
}

impl GridFile {
    pub fn into_grid(self) -> Result<GridNetwork> {
        let mut records = self.buses;
        records.sort_by_key(|b| b.id);
        let n = records.len();
        let mut buses = Vec::with_capacity(n);
        for (idx, r) in records.into_iter().enumerate() {
            if r.id != idx + 1 {
                return Err(Error::validation(
                    format!("bus {}", r.id),
                    format!("bus ids must be exactly 1..={n} without gaps or repeats"),
                ));
            }
            let inertia = match (r.kind, r.inertia) {
                (BusKind::Generator, Some(m)) => m,
                (BusKind::Generator, None) => {
                    return Err(Error::validation(format!("bus {}", r.id), "generator is missing inertia"))
                }
                (BusKind::Load, _) => 0.0,
            };
            buses.push(Bus {
                id: r.id,
                kind: r.kind,
                voltage: r.voltage,
                inertia,
                damping: r.damping,
            });
        }
        let mut lines = Vec::with_capacity(self.lines.len());
        for r in self.lines {
            let name = format!("line {{{}, {}}}", r.from, r.to);
            if r.from == 0 || r.to == 0 || r.from > n || r.to > n {
                return Err(Error::validation(name, "references a missing bus"));
            }
            let (from, to) = (r.from - 1, r.to - 1);
            let coupling = buses[from].voltage * buses[to].voltage * r.susceptance;
            lines.push(Line {
                from,
                to,
                susceptance: r.susceptance,
                coupling,
                coupling_lo: r.coupling_lo.unwrap_or(coupling),
                coupling_hi: r.coupling_hi.unwrap_or(coupling),
            });
        }
        GridNetwork::new(buses, lines)
    }
}

impl From<&GridNetwork> for GridFile {
    fn from(grid: &GridNetwork) -> Self {
        let buses = grid
            .buses()
            .iter()
            .map(|b| BusRecord {
                id: b.id,
                kind: b.kind,
                voltage: b.voltage,
                inertia: b.is_generator().then_some(b.inertia),
                damping: b.damping,
            })
            .collect();
        let lines = grid
            .lines()
            .iter()
            .map(|l| LineRecord {
                from: l.from + 1,
                to: l.to + 1,
                susceptance: l.susceptance,
                coupling_lo: (l.coupling_lo != l.coupling).then_some(l.coupling_lo),
                coupling_hi: (l.coupling_hi != l.coupling).then_some(l.coupling_hi),
            })
            .collect();
        GridFile { buses, lines }
    }
}

pub fn parse_grid(text: &str) -> Result<GridNetwork> {
    let file: GridFile = serde_json::from_str(text).map_err(|e| Error::Parse(format!("grid: {e}")))?;
    file.into_grid()
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<GridNetwork> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_grid(&text)
}

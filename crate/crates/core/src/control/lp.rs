//! Dense two-phase simplex with Bland's rule.
//!
//! Problems here have a few dozen variables, so the tableau is kept dense and
//! anti-cycling is preferred over speed.

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-12;
const OPT_TOL: f64 = 1e-10;

/// minimize `cᵀx` subject to `A_ub x ≤ b_ub`, `A_eq x = b_eq`, `lo ≤ x ≤ hi`.
/// Infinite bounds are allowed.
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    pub a_ub: Vec<Vec<f64>>,
    pub b_ub: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

/// How an original variable is written in terms of nonnegative columns.
enum VarMap {
    /// `x = lo + y`
    Shift { col: usize, lo: f64 },
    /// `x = hi − y`
    Mirror { col: usize, hi: f64 },
    /// `x = y⁺ − y⁻`
    Free { pos: usize, neg: usize },
}

impl LinearProgram {
    pub fn new(n: usize) -> Self {
        Self {
            cost: vec![0.0; n],
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            ..Self::default()
        }
    }

    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn solve(&self) -> Result<LpSolution> {
        let n = self.n_vars();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: self.lower.len().min(self.upper.len()) });
        }
        for i in 0..n {
            if self.lower[i] > self.upper[i] {
                return Err(Error::Infeasible(format!("variable {i} has empty bounds")));
            }
        }

        // Column substitution.
        let mut maps = Vec::with_capacity(n);
        let mut n_cols = 0;
        let mut extra_rows: Vec<(usize, f64)> = Vec::new();
        for i in 0..n {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            let map = if lo.is_finite() {
                if hi.is_finite() {
                    extra_rows.push((n_cols, hi - lo));
                }
                VarMap::Shift { col: n_cols, lo }
            } else if hi.is_finite() {
                VarMap::Mirror { col: n_cols, hi }
            } else {
                n_cols += 1;
                VarMap::Free { pos: n_cols - 1, neg: n_cols }
            };
            n_cols += 1;
            maps.push(map);
        }

        // Rewrites `a·x` as `a'·y + offset`.
        let convert = |a: &[f64]| -> (Vec<f64>, f64) {
            let mut row = vec![0.0; n_cols];
            let mut offset = 0.0;
            for (i, map) in maps.iter().enumerate() {
                match *map {
                    VarMap::Shift { col, lo } => {
                        row[col] += a[i];
                        offset += a[i] * lo;
                    }
                    VarMap::Mirror { col, hi } => {
                        row[col] -= a[i];
                        offset += a[i] * hi;
                    }
                    VarMap::Free { pos, neg } => {
                        row[pos] += a[i];
                        row[neg] -= a[i];
                    }
                }
            }
            (row, offset)
        };

        // Standard form rows: each ≤ row gets a slack column.
        let n_slack = self.a_ub.len() + extra_rows.len();
        let width = n_cols + n_slack;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        let mut slack = n_cols;
        for (a, &b) in self.a_ub.iter().zip(&self.b_ub) {
            check_row(a, n)?;
            let (mut row, off) = convert(a);
            row.resize(width, 0.0);
            row[slack] = 1.0;
            slack += 1;
            rows.push(row);
            rhs.push(b - off);
        }
        for &(col, span) in &extra_rows {
            let mut row = vec![0.0; width];
            row[col] = 1.0;
            row[slack] = 1.0;
            slack += 1;
            rows.push(row);
            rhs.push(span);
        }
        for (a, &b) in self.a_eq.iter().zip(&self.b_eq) {
            check_row(a, n)?;
            let (mut row, off) = convert(a);
            row.resize(width, 0.0);
            rows.push(row);
            rhs.push(b - off);
        }
        let (mut cost, cost_offset) = convert(&self.cost);
        cost.resize(width, 0.0);

        let y = simplex(rows, rhs, &cost)?;
        let x: Vec<f64> = maps
            .iter()
            .map(|m| match *m {
                VarMap::Shift { col, lo } => lo + y[col],
                VarMap::Mirror { col, hi } => hi - y[col],
                VarMap::Free { pos, neg } => y[pos] - y[neg],
            })
            .collect();
        let objective = self.cost.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>();
        debug_assert!((objective - (cost_offset + cost.iter().zip(&y).map(|(c, v)| c * v).sum::<f64>())).abs() < 1e-6 * (1.0 + objective.abs()));
        Ok(LpSolution { x, objective })
    }
}

fn check_row(a: &[f64], n: usize) -> Result<()> {
    if a.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: a.len() });
    }
    Ok(())
}

/// minimize `cᵀy` s.t. `Ay = b`, `y ≥ 0`.
fn simplex(mut rows: Vec<Vec<f64>>, mut rhs: Vec<f64>, cost: &[f64]) -> Result<Vec<f64>> {
    let m = rows.len();
    let n = cost.len();
    if m == 0 {
        if cost.iter().any(|&c| c < -OPT_TOL) {
            return Err(Error::Unbounded);
        }
        return Ok(vec![0.0; n]);
    }
    for (row, b) in rows.iter_mut().zip(rhs.iter_mut()) {
        if *b < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
            *b = -*b;
        }
    }

    // Tableau columns: n structural, m artificial, then rhs.
    let total = n + m;
    let mut tab: Vec<Vec<f64>> = rows
        .into_iter()
        .zip(&rhs)
        .enumerate()
        .map(|(i, (mut row, &b))| {
            row.resize(total + 1, 0.0);
            row[n + i] = 1.0;
            row[total] = b;
            row
        })
        .collect();
    let mut basis: Vec<usize> = (n..total).collect();
    let scale = 1.0 + rhs.iter().fold(0.0_f64, |a, b| a.max(b.abs()));

    // Phase 1: minimize the sum of artificials.
    let mut phase1 = vec![0.0; total];
    phase1[n..].iter_mut().for_each(|v| *v = 1.0);
    run(&mut tab, &mut basis, &phase1, total)?;
    let infeas: f64 = basis.iter().zip(&tab).filter(|(&b, _)| b >= n).map(|(_, r)| r[total]).sum();
    if infeas > 1e-9 * scale {
        return Err(Error::Infeasible(format!("linear program has no feasible point (residual {infeas:.3e})")));
    }

    // Pivot remaining artificials out, dropping redundant rows.
    let mut r = 0;
    while r < tab.len() {
        if basis[r] >= n {
            if let Some(col) = (0..n).find(|&j| tab[r][j].abs() > 1e-9) {
                pivot(&mut tab, &mut basis, r, col);
            } else {
                tab.remove(r);
                basis.remove(r);
                continue;
            }
        }
        r += 1;
    }

    // Phase 2 over structural columns only.
    let mut phase2 = cost.to_vec();
    phase2.resize(total, 0.0);
    run(&mut tab, &mut basis, &phase2, n)?;

    let mut y = vec![0.0; n];
    for (row, &b) in tab.iter().zip(&basis) {
        if b < n {
            y[b] = row[total].max(0.0);
        }
    }
    Ok(y)
}

/// Bland-rule iterations; only columns `< allowed` may enter.
fn run(tab: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], allowed: usize) -> Result<()> {
    let rhs_col = tab.first().map_or(0, |r| r.len() - 1);
    let cap = 50_000;
    for _ in 0..cap {
        let entering = (0..allowed).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let reduced = cost[j] - basis.iter().zip(tab.iter()).map(|(&b, row)| cost[b] * row[j]).sum::<f64>();
            reduced < -OPT_TOL
        });
        let Some(col) = entering else { return Ok(()) };
        let mut leave: Option<(usize, f64)> = None;
        for (i, row) in tab.iter().enumerate() {
            if row[col] > PIVOT_TOL {
                let ratio = row[rhs_col] / row[col];
                let better = match leave {
                    None => true,
                    Some((l, best)) => ratio < best - 1e-14 || (ratio <= best + 1e-14 && basis[i] < basis[l]),
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let Some((r, _)) = leave else { return Err(Error::Unbounded) };
        pivot(tab, basis, r, col);
    }
    Err(Error::NotConverged(cap))
}

fn pivot(tab: &mut [Vec<f64>], basis: &mut [usize], r: usize, col: usize) {
    let p = tab[r][col];
    tab[r].iter_mut().for_each(|v| *v /= p);
    let pivot_row = tab[r].clone();
    for (i, row) in tab.iter_mut().enumerate() {
        if i != r {
            let f = row[col];
            if f != 0.0 {
                row.iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    basis[r] = col;
}

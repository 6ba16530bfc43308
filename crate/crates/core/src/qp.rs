//! Dense strictly convex quadratic programs via the Goldfarb–Idnani dual
//! active-set method.
//!
//! minimize ½ xᵀHx + fᵀx subject to equality and `≤` constraints, with `H`
//! positive definite. Sizes here are tens of variables, so every iteration
//! simply refactors the active-set system.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Eq,
    Le,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub a: Vec<f64>,
    pub b: f64,
    pub relation: Relation,
}

impl Constraint {
    pub fn eq(a: Vec<f64>, b: f64) -> Self {
        Self { a, b, relation: Relation::Eq }
    }

    pub fn le(a: Vec<f64>, b: f64) -> Self {
        Self { a, b, relation: Relation::Le }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Indices (into the constraint list) of the active set at the solution.
    pub active: Vec<usize>,
}

struct Active {
    index: usize,
    normal: DVector<f64>,
    equality: bool,
    multiplier: f64,
}

const FEAS_TOL: f64 = 1e-11;

pub fn solve(h: &DMatrix<f64>, f: &[f64], constraints: &[Constraint]) -> Result<QpSolution> {
    let n = f.len();
    let hinv = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("QP hessian is not positive definite".into()))?
        .inverse();
    let fv = DVector::from_column_slice(f);
    let mut x = -(&hinv * &fv);
    let mut active: Vec<Active> = Vec::new();

    // ≥-form normal and rhs, flipped for ≤ rows.
    let normal_of = |c: &Constraint| -> (DVector<f64>, f64) {
        let a = DVector::from_column_slice(&c.a);
        match c.relation {
            Relation::Le => (-a, -c.b),
            Relation::Eq => (a, c.b),
        }
    };

    for (index, c) in constraints.iter().enumerate() {
        if c.relation != Relation::Eq {
            continue;
        }
        let (mut np, mut bp) = normal_of(c);
        if np.dot(&x) - bp > 0.0 {
            np = -np;
            bp = -bp;
        }
        add_constraint(&hinv, &mut x, &mut active, index, np, bp, true)?;
    }

    let max_iter = 50 * (n + constraints.len()).max(1);
    for _ in 0..max_iter {
        let mut worst: Option<(usize, f64)> = None;
        for (index, c) in constraints.iter().enumerate() {
            if c.relation == Relation::Eq || active.iter().any(|a| a.index == index) {
                continue;
            }
            let (np, bp) = normal_of(c);
            let s = np.dot(&x) - bp;
            let tol = FEAS_TOL * (1.0 + bp.abs());
            if s < -tol && worst.is_none_or(|(_, ws)| s < ws) {
                worst = Some((index, s));
            }
        }
        let Some((index, _)) = worst else {
            polish_active(&mut x, &active, constraints);
            let objective = 0.5 * x.dot(&(h * &x)) + fv.dot(&x);
            return Ok(QpSolution {
                x: x.as_slice().to_vec(),
                objective,
                active: active.iter().map(|a| a.index).collect(),
            });
        };
        let (np, bp) = normal_of(&constraints[index]);
        add_constraint(&hinv, &mut x, &mut active, index, np, bp, false)?;
    }
    Err(Error::NotConverged(max_iter))
}

/// Minimum-norm correction so the active rows hold exactly; an ill-conditioned
/// `H` otherwise leaves residuals far above machine precision.
fn polish_active(x: &mut DVector<f64>, active: &[Active], constraints: &[Constraint]) {
    if active.is_empty() {
        return;
    }
    let n = x.len();
    let nmat = DMatrix::from_fn(n, active.len(), |i, j| constraints[active[j].index].a[i]);
    let resid = DVector::from_fn(active.len(), |j, _| {
        let c = &constraints[active[j].index];
        c.b - c.a.iter().zip(x.iter()).map(|(a, v)| a * v).sum::<f64>()
    });
    if let Some(y) = (nmat.transpose() * &nmat).lu().solve(&resid) {
        *x += &nmat * y;
    }
}

/// One outer step: moves primal and dual variables until constraint `index`
/// becomes active, dropping blocking constraints on the way.
fn add_constraint(
    hinv: &DMatrix<f64>,
    x: &mut DVector<f64>,
    active: &mut Vec<Active>,
    index: usize,
    np: DVector<f64>,
    bp: f64,
    equality: bool,
) -> Result<()> {
    let mut up = 0.0;
    let hn = hinv * &np;
    let scale = np.dot(&hn).abs().max(1e-300);
    loop {
        let s = np.dot(x) - bp;
        let (z, r) = if active.is_empty() {
            (hn.clone(), DVector::zeros(0))
        } else {
            let q = active.len();
            let nmat = DMatrix::from_fn(np.len(), q, |i, j| active[j].normal[i]);
            let hinv_n = hinv * &nmat;
            let m = nmat.transpose() * &hinv_n;
            let w = hinv_n.transpose() * &np;
            let r = m
                .lu()
                .solve(&w)
                .ok_or_else(|| Error::Singular("dependent active constraints".into()))?;
            (&hn - &hinv_n * &r, r)
        };

        let mut t1 = f64::INFINITY;
        let mut drop = None;
        for (j, a) in active.iter().enumerate() {
            if !a.equality && r[j] > 1e-14 {
                let ratio = a.multiplier / r[j];
                if ratio < t1 {
                    t1 = ratio;
                    drop = Some(j);
                }
            }
        }

        let zn = z.dot(&np);
        if zn <= 1e-12 * scale {
            // np is a combination of active normals
            if equality && s.abs() <= FEAS_TOL * (1.0 + bp.abs()) {
                return Ok(());
            }
            let Some(k) = drop else {
                return Err(Error::Infeasible("quadratic program constraints are inconsistent".into()));
            };
            for (j, a) in active.iter_mut().enumerate() {
                a.multiplier -= t1 * r[j];
            }
            up += t1;
            active.remove(k);
            continue;
        }

        let t2 = (-s / zn).max(0.0);
        let t = t2.min(t1);
        *x += &z * t;
        for (j, a) in active.iter_mut().enumerate() {
            a.multiplier -= t * r[j];
        }
        up += t;
        if t2 <= t1 {
            active.push(Active {
                index,
                normal: np,
                equality,
                multiplier: up,
            });
            return Ok(());
        }
        let k = drop.expect("t1 finite implies a blocking constraint");
        active.remove(k);
    }
}

//! Dense linear programming for the timing and flow-bound analyses.
//!
//! [`solve_lp`] runs a bounded-variable primal simplex (Bland's rule, so it
//! terminates; rebuilt LU factors, so it stays accurate on the tiny programs
//! we feed it).  [`solve_by_enumeration`] is an exponential reference solver
//! for cross-checking.  On top of the LP sit the two route-diversion
//! optimizations: fixed timing ([`max_simple_diversion`]) and re-split green
//! durations ([`max_retimed_diversion`]).

mod diversion;
mod simplex;

pub use diversion::{max_retimed_diversion, max_simple_diversion, DiversionError, DiversionResult};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Maximize,
    Minimize,
}

/// `opt c·x  s.t.  eq rows hold, le rows hold, bounds hold`.
///
/// Bounds are inclusive; use `±INFINITY` for open sides, but every variable
/// needs at least one finite bound.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub sense: Sense,
    pub objective: Vec<f64>,
    /// Rows `a·x = rhs`.
    pub eq: Vec<(Vec<f64>, f64)>,
    /// Rows `a·x ≤ rhs`.
    pub le: Vec<(Vec<f64>, f64)>,
    pub bounds: Vec<(f64, f64)>,
}

impl LinearProgram {
    /// A program over `objective.len()` nonnegative variables.
    pub fn new(sense: Sense, objective: Vec<f64>) -> Self {
        let n = objective.len();
        LinearProgram {
            sense,
            objective,
            eq: Vec::new(),
            le: Vec::new(),
            bounds: vec![(0.0, f64::INFINITY); n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }
}

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal { value: f64, x: Vec<f64> },
    /// Feasible direction along which the objective improves forever.
    Unbounded { ray: Vec<f64> },
    /// No feasible point; `violation` is the smallest attainable total
    /// constraint violation (L1).
    Infeasible { violation: f64 },
}

#[derive(Debug, Error)]
pub enum LpError {
    #[error("malformed program: {0}")]
    Shape(String),
    #[error("variable {0} has lower bound above its upper bound")]
    BadBounds(usize),
    #[error("variable {0} has no finite bound")]
    FreeVariable(usize),
    #[error("numeric breakdown: {0}")]
    NumericBreakdown(String),
}

fn check_shape(lp: &LinearProgram) -> Result<(), LpError> {
    let n = lp.num_vars();
    if lp.bounds.len() != n {
        return Err(LpError::Shape(format!(
            "{} bounds for {n} variables",
            lp.bounds.len()
        )));
    }
    for (rows, label) in [(&lp.eq, "equality"), (&lp.le, "inequality")] {
        for (i, (row, _)) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(LpError::Shape(format!(
                    "{label} row {i} has {} coefficients for {n} variables",
                    row.len()
                )));
            }
        }
    }
    for (j, &(lo, hi)) in lp.bounds.iter().enumerate() {
        if lo > hi {
            return Err(LpError::BadBounds(j));
        }
        if !lo.is_finite() && !hi.is_finite() {
            return Err(LpError::FreeVariable(j));
        }
    }
    Ok(())
}

pub fn solve_lp(lp: &LinearProgram) -> Result<LpOutcome, LpError> {
    check_shape(lp)?;
    let n = lp.num_vars();
    let m = lp.eq.len() + lp.le.len();
    let ncols = n + lp.le.len(); // one slack per inequality

    let mut a = DMatrix::zeros(m, ncols);
    let mut b = DVector::zeros(m);
    for (i, (row, rhs)) in lp.eq.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            a[(i, j)] = v;
        }
        b[i] = *rhs;
    }
    for (k, (row, rhs)) in lp.le.iter().enumerate() {
        let i = lp.eq.len() + k;
        for (j, &v) in row.iter().enumerate() {
            a[(i, j)] = v;
        }
        a[(i, n + k)] = 1.0;
        b[i] = *rhs;
    }

    let flip = match lp.sense {
        Sense::Maximize => -1.0,
        Sense::Minimize => 1.0,
    };
    let mut cost: Vec<f64> = lp.objective.iter().map(|c| c * flip).collect();
    cost.resize(ncols, 0.0);
    let mut lo: Vec<f64> = lp.bounds.iter().map(|b| b.0).collect();
    let mut hi: Vec<f64> = lp.bounds.iter().map(|b| b.1).collect();
    lo.resize(ncols, 0.0);
    hi.resize(ncols, f64::INFINITY);

    let raw = simplex::solve(simplex::Program { a, b, cost, lo, hi })
        .map_err(LpError::NumericBreakdown)?;
    Ok(match raw {
        simplex::RawOutcome::Optimal(x) => {
            let x: Vec<f64> = x[..n].to_vec();
            let value = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
            LpOutcome::Optimal { value, x }
        }
        simplex::RawOutcome::Unbounded(ray) => LpOutcome::Unbounded {
            ray: ray[..n].to_vec(),
        },
        simplex::RawOutcome::Infeasible { gap } => LpOutcome::Infeasible { violation: gap },
    })
}

/// Reference solver: tries every choice of `n` active constraints (equality
/// rows, tight inequalities, tight bounds), keeps the best feasible vertex.
/// Exponential — use only to cross-check programs of ≤ 12 variables whose
/// feasible set is bounded.  Returns `None` when no feasible vertex exists.
pub fn solve_by_enumeration(lp: &LinearProgram) -> Result<Option<(f64, Vec<f64>)>, LpError> {
    check_shape(lp)?;
    let n = lp.num_vars();
    if n > 12 {
        return Err(LpError::Shape("enumeration limited to 12 variables".into()));
    }
    let mut rows: Vec<(Vec<f64>, f64)> = lp.eq.clone();
    rows.extend(lp.le.iter().cloned());
    for (j, &(lo, hi)) in lp.bounds.iter().enumerate() {
        for bound in [lo, hi] {
            if bound.is_finite() {
                let mut row = vec![0.0; n];
                row[j] = 1.0;
                rows.push((row, bound));
            }
        }
    }
    if rows.len() < n {
        return Err(LpError::Shape(
            "feasible set cannot be bounded: fewer constraints than variables".into(),
        ));
    }

    let feasible = |x: &DVector<f64>| -> bool {
        let within = |v: f64, rhs: f64| v <= rhs + simplex::FEAS_TOL;
        lp.eq
            .iter()
            .all(|(row, rhs)| (dot(row, x) - rhs).abs() <= simplex::FEAS_TOL)
            && lp.le.iter().all(|(row, rhs)| within(dot(row, x), *rhs))
            && lp
                .bounds
                .iter()
                .enumerate()
                .all(|(j, &(lo, hi))| x[j] >= lo - simplex::FEAS_TOL && x[j] <= hi + simplex::FEAS_TOL)
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut chosen = Vec::with_capacity(n);
    let mut stack = vec![(0usize, 0usize)]; // (next row candidate, chosen len marker)
    // Depth-first enumeration of all n-subsets of rows.
    while let Some((start, depth)) = stack.pop() {
        chosen.truncate(depth);
        if depth == n {
            if let Some(x) = solve_active_set(&rows, &chosen, n) {
                if feasible(&x) {
                    let value = dot(&lp.objective, &x);
                    let better = match (&best, lp.sense) {
                        (None, _) => true,
                        (Some((v, _)), Sense::Maximize) => value > *v,
                        (Some((v, _)), Sense::Minimize) => value < *v,
                    };
                    if better {
                        best = Some((value, x.iter().copied().collect()));
                    }
                }
            }
            continue;
        }
        if start >= rows.len() || rows.len() - start < n - depth {
            continue;
        }
        // Either skip row `start` or take it.
        stack.push((start + 1, depth));
        chosen.push(start);
        stack.push((start + 1, depth + 1));
    }
    Ok(best)
}

fn dot(row: &[f64], x: &DVector<f64>) -> f64 {
    row.iter().zip(x.iter()).map(|(a, b)| a * b).sum()
}

fn solve_active_set(
    rows: &[(Vec<f64>, f64)],
    chosen: &[usize],
    n: usize,
) -> Option<DVector<f64>> {
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for (i, &r) in chosen.iter().enumerate() {
        for (j, &v) in rows[r].0.iter().enumerate() {
            a[(i, j)] = v;
        }
        b[i] = rows[r].1;
    }
    a.lu().solve(&b)
}

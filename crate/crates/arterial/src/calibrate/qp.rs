//! Convex QP: `min ½xᵀHx + cᵀx + k  s.t.  Ax = b, lo ≤ x ≤ hi`.
//!
//! Primal active-set method.  Each working-set subproblem is the KKT system
//! over the free variables, solved by SVD so that redundant equality rows
//! (conservation at every node is one short of independent) cause no harm.
//! A tiny ridge `REG·‖x‖²` keeps the Hessian positive definite, which makes
//! the returned point the minimum-norm minimizer when the data leave the
//! problem flat in some directions.

use nalgebra::{DMatrix, DVector};

/// Ridge weight added to the Hessian diagonal.
pub const REG: f64 = 1e-10;
const ITER_CAP: usize = 10_000;
const STEP_TOL: f64 = 1e-11;

#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub constant: f64,
    /// Equality rows `a·x = b`; linear dependence among rows is fine.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Objective of the original (un-ridged) problem, constant included.
    pub objective: f64,
    /// Max of equality residual, bound violation and stationarity defect of
    /// the ridged problem.
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Indices not pinned at a bound in the final working set.
    pub free_vars: Vec<usize>,
    /// Reduced costs `g + Aᵀν` at the solution; ≈0 on free variables, the
    /// bound multiplier on pinned ones.
    pub priced: DVector<f64>,
}

#[derive(Debug)]
pub enum QpFailure {
    Shape(String),
    InfeasibleStart,
    /// Best iterate when the active-set loop hit its cap.
    IterationLimit(QpSolution),
    Numeric(String),
}

impl std::fmt::Display for QpFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QpFailure::Shape(s) => write!(f, "malformed program: {s}"),
            QpFailure::InfeasibleStart => write!(f, "starting point violates the constraints"),
            QpFailure::IterationLimit(sol) => write!(
                f,
                "iteration limit after {} steps, KKT residual {:.3e}",
                sol.iterations, sol.kkt_residual
            ),
            QpFailure::Numeric(s) => write!(f, "numeric breakdown: {s}"),
        }
    }
}

impl std::error::Error for QpFailure {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pin {
    Free,
    Lo,
    Hi,
}

pub fn solve(qp: &QuadraticProgram, x0: DVector<f64>, tol: f64) -> Result<QpSolution, QpFailure> {
    let n = qp.c.len();
    if qp.h.nrows() != n
        || qp.h.ncols() != n
        || qp.a.ncols() != n && qp.a.nrows() > 0
        || qp.a.nrows() != qp.b.len()
        || qp.lo.len() != n
        || qp.hi.len() != n
        || x0.len() != n
    {
        return Err(QpFailure::Shape("dimension mismatch".into()));
    }
    let feas = |x: &DVector<f64>| -> bool {
        let eq_ok = qp.a.nrows() == 0 || (&qp.a * x - &qp.b).amax() <= 1e-7;
        eq_ok
            && (0..n).all(|j| x[j] >= qp.lo[j] - 1e-9 && x[j] <= qp.hi[j] + 1e-9)
    };
    if !feas(&x0) {
        return Err(QpFailure::InfeasibleStart);
    }

    let h_reg = {
        let mut h = qp.h.clone();
        for j in 0..n {
            h[(j, j)] += 2.0 * REG;
        }
        h
    };
    let m = qp.a.nrows();
    let mut x = x0;
    let mut pins: Vec<Pin> = (0..n)
        .map(|j| {
            if qp.lo[j].is_finite() && (x[j] - qp.lo[j]).abs() <= 1e-12 {
                Pin::Lo
            } else if qp.hi[j].is_finite() && (x[j] - qp.hi[j]).abs() <= 1e-12 {
                Pin::Hi
            } else {
                Pin::Free
            }
        })
        .collect();

    let mut nu = DVector::zeros(m);
    for iter in 1..=ITER_CAP {
        let grad = &h_reg * &x + &qp.c;
        let free: Vec<usize> = (0..n).filter(|&j| pins[j] == Pin::Free).collect();
        let nf = free.len();

        // Step restricted to the working set: KKT over the free block.
        let mut delta_f = DVector::zeros(nf);
        if nf > 0 {
            let mut kkt = DMatrix::zeros(nf + m, nf + m);
            for (p, &j) in free.iter().enumerate() {
                for (q, &k) in free.iter().enumerate() {
                    kkt[(p, q)] = h_reg[(j, k)];
                }
                for r in 0..m {
                    kkt[(p, nf + r)] = qp.a[(r, j)];
                    kkt[(nf + r, p)] = qp.a[(r, j)];
                }
            }
            let mut rhs = DVector::zeros(nf + m);
            for (p, &j) in free.iter().enumerate() {
                rhs[p] = -grad[j];
            }
            let svd = kkt.svd(true, true);
            let smax = svd.singular_values.max();
            let sol = svd
                .solve(&rhs, smax * 1e-13)
                .map_err(|e| QpFailure::Numeric(e.to_owned()))?;
            delta_f = sol.rows(0, nf).into_owned();
            nu = sol.rows(nf, m).into_owned();
        } else if m > 0 {
            // Everything pinned: fit multipliers to the gradient.
            let at = qp.a.transpose();
            let svd = at.svd(true, true);
            let smax = svd.singular_values.max();
            nu = svd
                .solve(&(-&grad), smax * 1e-13)
                .map_err(|e| QpFailure::Numeric(e.to_owned()))?;
        }

        if delta_f.is_empty() || delta_f.amax() <= STEP_TOL {
            // No move left in this working set; release the worst-priced pin.
            let priced = &grad + qp.a.transpose() * &nu;
            let mut worst: Option<(usize, f64)> = None;
            for j in 0..n {
                let violation = match pins[j] {
                    Pin::Lo if qp.lo[j] < qp.hi[j] => -priced[j],
                    Pin::Hi if qp.lo[j] < qp.hi[j] => priced[j],
                    _ => continue,
                };
                if violation > tol && worst.map(|(_, v)| violation > v).unwrap_or(true) {
                    worst = Some((j, violation));
                }
            }
            match worst {
                Some((j, _)) => pins[j] = Pin::Free,
                None => {
                    return Ok(finish(qp, &h_reg, x, &nu, &pins, iter));
                }
            }
            continue;
        }

        // Longest step inside the box, blocking bound joins the working set.
        let mut t = 1.0;
        let mut blocker: Option<(usize, Pin)> = None;
        for (p, &j) in free.iter().enumerate() {
            let d = delta_f[p];
            let (limit, pin) = if d > 0.0 && qp.hi[j].is_finite() {
                ((qp.hi[j] - x[j]) / d, Pin::Hi)
            } else if d < 0.0 && qp.lo[j].is_finite() {
                ((qp.lo[j] - x[j]) / d, Pin::Lo)
            } else {
                continue;
            };
            let limit = limit.max(0.0);
            if limit < t - 1e-15 {
                t = limit;
                blocker = Some((j, pin));
            }
        }
        for (p, &j) in free.iter().enumerate() {
            x[j] += t * delta_f[p];
        }
        if let Some((j, pin)) = blocker {
            x[j] = match pin {
                Pin::Lo => qp.lo[j],
                Pin::Hi => qp.hi[j],
                Pin::Free => unreachable!(),
            };
            pins[j] = pin;
        }
    }
    Err(QpFailure::IterationLimit(finish(
        qp, &h_reg, x, &nu, &pins, ITER_CAP,
    )))
}

fn finish(
    qp: &QuadraticProgram,
    h_reg: &DMatrix<f64>,
    x: DVector<f64>,
    nu: &DVector<f64>,
    pins: &[Pin],
    iterations: usize,
) -> QpSolution {
    let n = x.len();
    let grad = h_reg * &x + &qp.c;
    let priced = &grad + qp.a.transpose() * nu;
    let mut residual: f64 = 0.0;
    if qp.a.nrows() > 0 {
        residual = (&qp.a * &x - &qp.b).amax();
    }
    for j in 0..n {
        residual = residual
            .max(qp.lo[j] - x[j])
            .max(x[j] - qp.hi[j])
            .max(match pins[j] {
                Pin::Free => priced[j].abs(),
                Pin::Lo => (-priced[j]).max(0.0),
                Pin::Hi => priced[j].max(0.0),
            });
    }
    let objective = 0.5 * (&qp.h * &x).dot(&x) + qp.c.dot(&x) + qp.constant;
    QpSolution {
        free_vars: (0..n).filter(|&j| pins[j] == Pin::Free).collect(),
        x,
        objective,
        kkt_residual: residual,
        iterations,
        priced,
    }
}

//! Bounded-variable primal simplex, two-phase, Bland's rule throughout.
//!
//! Problems here are tiny (tens of variables), so every iteration refactors
//! the basis from scratch via LU instead of maintaining an inverse; that
//! trades speed we do not need for numerics we do.

use nalgebra::{DMatrix, DVector};

pub(super) const FEAS_TOL: f64 = 1e-7;
const COST_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-10;
const ITER_CAP: usize = 100_000;

/// `min cost·x  s.t.  a x = b,  lo ≤ x ≤ hi`.
pub(super) struct Program {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub cost: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub(super) enum RawOutcome {
    /// Full solution vector (all columns).
    Optimal(Vec<f64>),
    /// Improving ray (all columns).
    Unbounded(Vec<f64>),
    /// Minimal total constraint violation found in phase 1.
    Infeasible { gap: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Basic,
    Lower,
    Upper,
}

/// nalgebra's LU cannot take empty systems; an empty basis solves trivially.
fn lu_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if m.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    m.clone().lu().solve(rhs)
}

struct State {
    a: DMatrix<f64>,
    b: DVector<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    basis: Vec<usize>,
    status: Vec<Status>,
}

pub(super) fn solve(p: Program) -> Result<RawOutcome, String> {
    let m = p.a.nrows();
    let n = p.a.ncols();

    // Park every real column at a finite bound (callers guarantee one exists)
    // and let signed artificials absorb the residual.
    let mut status: Vec<Status> = (0..n)
        .map(|j| if p.lo[j].is_finite() { Status::Lower } else { Status::Upper })
        .collect();
    let parked = DVector::from_iterator(
        n,
        (0..n).map(|j| match status[j] {
            Status::Lower => p.lo[j],
            _ => p.hi[j],
        }),
    );
    let residual = &p.b - &p.a * &parked;

    let mut a = p.a.clone().insert_columns(n, m, 0.0);
    let mut lo = p.lo.clone();
    let mut hi = p.hi.clone();
    for i in 0..m {
        a[(i, n + i)] = if residual[i] >= 0.0 { 1.0 } else { -1.0 };
        lo.push(0.0);
        hi.push(f64::INFINITY);
        status.push(Status::Basic);
    }
    let mut state = State {
        a,
        b: p.b,
        lo,
        hi,
        basis: (n..n + m).collect(),
        status,
    };

    let mut phase1 = vec![0.0; n];
    phase1.extend(std::iter::repeat_n(1.0, m));
    if state.run(&phase1)?.is_some() {
        return Err("phase-1 objective cannot be unbounded".into());
    }
    let gap = phase1
        .iter()
        .zip(state.current_x()?)
        .map(|(c, x)| c * x)
        .sum::<f64>();
    if gap > FEAS_TOL {
        return Ok(RawOutcome::Infeasible { gap });
    }
    state.drive_out_artificials(n)?;
    state.truncate_columns(n);

    match state.run(&p.cost)? {
        Some(ray) => Ok(RawOutcome::Unbounded(ray)),
        None => Ok(RawOutcome::Optimal(state.current_x()?)),
    }
}

impl State {
    fn ncols(&self) -> usize {
        self.a.ncols()
    }

    fn nonbasic_value(&self, j: usize) -> f64 {
        match self.status[j] {
            Status::Lower => self.lo[j],
            Status::Upper => self.hi[j],
            Status::Basic => unreachable!("basic column has no parked value"),
        }
    }

    fn basis_matrix(&self) -> DMatrix<f64> {
        self.a.select_columns(self.basis.iter())
    }

    /// b minus the contribution of all parked columns.
    fn net_rhs(&self) -> DVector<f64> {
        let mut rhs = self.b.clone();
        for j in 0..self.ncols() {
            if self.status[j] != Status::Basic {
                let v = self.nonbasic_value(j);
                if v != 0.0 {
                    rhs -= self.a.column(j) * v;
                }
            }
        }
        rhs
    }

    fn basic_values(&self) -> Result<DVector<f64>, String> {
        lu_solve(&self.basis_matrix(), &self.net_rhs())
            .ok_or_else(|| "singular basis".to_owned())
    }

    fn current_x(&self) -> Result<Vec<f64>, String> {
        let xb = self.basic_values()?;
        let mut x = vec![0.0; self.ncols()];
        for (j, xj) in x.iter_mut().enumerate() {
            if self.status[j] != Status::Basic {
                *xj = self.nonbasic_value(j);
            }
        }
        for (pos, &j) in self.basis.iter().enumerate() {
            x[j] = xb[pos];
        }
        Ok(x)
    }

    /// Iterates to optimality (`None`) or an improving ray (`Some`).
    fn run(&mut self, cost: &[f64]) -> Result<Option<Vec<f64>>, String> {
        for _ in 0..ITER_CAP {
            let bmat = self.basis_matrix();
            let xb = lu_solve(&bmat, &self.net_rhs())
                .ok_or_else(|| "singular basis".to_owned())?;
            let cb = DVector::from_iterator(
                self.basis.len(),
                self.basis.iter().map(|&j| cost[j]),
            );
            let y = lu_solve(&bmat.transpose(), &cb)
                .ok_or_else(|| "singular basis".to_owned())?;

            // Entering: lowest improving index (Bland).
            let mut entering = None;
            for (j, &cj) in cost.iter().enumerate() {
                if self.status[j] == Status::Basic {
                    continue;
                }
                let d = cj - y.dot(&self.a.column(j));
                let sigma = match self.status[j] {
                    Status::Lower if d < -COST_TOL => 1.0,
                    Status::Upper if d > COST_TOL => -1.0,
                    _ => continue,
                };
                entering = Some((j, sigma));
                break;
            }
            let Some((j, sigma)) = entering else {
                return Ok(None);
            };

            let w = lu_solve(&bmat, &self.a.column(j).into_owned())
                .ok_or_else(|| "singular basis".to_owned())?;

            // Ratio test; ties break on the lowest blocking variable index.
            let mut best_t = self.hi[j] - self.lo[j]; // own bound flip
            let mut best_var = j;
            let mut blocking: Option<(usize, Status)> = None;
            for (pos, &bi) in self.basis.iter().enumerate() {
                let delta = -sigma * w[pos];
                let (t, side) = if delta > PIVOT_TOL && self.hi[bi].is_finite() {
                    ((self.hi[bi] - xb[pos]) / delta, Status::Upper)
                } else if delta < -PIVOT_TOL && self.lo[bi].is_finite() {
                    ((xb[pos] - self.lo[bi]) / -delta, Status::Lower)
                } else {
                    continue;
                };
                let t = t.max(0.0);
                if t < best_t - 1e-12 || (t < best_t + 1e-12 && bi < best_var) {
                    best_t = t;
                    best_var = bi;
                    blocking = Some((pos, side));
                }
            }

            if best_t.is_infinite() {
                let mut ray = vec![0.0; self.ncols()];
                ray[j] = sigma;
                for (pos, &bi) in self.basis.iter().enumerate() {
                    ray[bi] = -sigma * w[pos];
                }
                return Ok(Some(ray));
            }
            match blocking {
                None => {
                    // Entering variable travels to its other bound.
                    self.status[j] = match self.status[j] {
                        Status::Lower => Status::Upper,
                        _ => Status::Lower,
                    };
                }
                Some((pos, side)) => {
                    let out = self.basis[pos];
                    self.status[out] = side;
                    self.status[j] = Status::Basic;
                    self.basis[pos] = j;
                }
            }
        }
        Err("iteration limit hit".into())
    }

    /// Pivots zero-valued artificials out of the basis; rows that offer no
    /// pivot are redundant and get dropped.
    fn drive_out_artificials(&mut self, art_start: usize) -> Result<(), String> {
        let mut pos = 0;
        while pos < self.basis.len() {
            if self.basis[pos] < art_start {
                pos += 1;
                continue;
            }
            let m = self.basis.len();
            let mut e = DVector::zeros(m);
            e[pos] = 1.0;
            let z = lu_solve(&self.basis_matrix().transpose(), &e)
                .ok_or_else(|| "singular basis".to_owned())?;
            let replacement = (0..art_start)
                .find(|&j| self.status[j] != Status::Basic && z.dot(&self.a.column(j)).abs() > 1e-8);
            match replacement {
                Some(j) => {
                    let out = self.basis[pos];
                    self.status[out] = Status::Lower;
                    self.status[j] = Status::Basic;
                    self.basis[pos] = j;
                    pos += 1;
                }
                None => {
                    let out = self.basis[pos];
                    self.status[out] = Status::Lower;
                    self.a = self.a.clone().remove_row(pos);
                    self.b = self.b.clone().remove_row(pos);
                    self.basis.remove(pos);
                }
            }
        }
        Ok(())
    }

    fn truncate_columns(&mut self, n: usize) {
        self.a = self.a.columns(0, n).into_owned();
        self.lo.truncate(n);
        self.hi.truncate(n);
        self.status.truncate(n);
    }
}

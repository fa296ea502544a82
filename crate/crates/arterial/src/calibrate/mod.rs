//! Flow estimation from partial sensor data.
//!
//! Decision vector: one flow per link, one demand per entry link, one flow
//! per allowed movement.  Balance rows tie link flows to the movement flows
//! on both sides of every node and pin entry flows to their demands;
//! measured flows, demands and turn ratios pull the solution toward the data
//! through weighted least squares; movement flows are capped by signal
//! capacity wherever a timing plan exists.  All of it lands in one convex QP
//! that is always feasible (the zero vector satisfies every constraint).

mod qp;

pub use qp::{QpFailure, QpSolution, QuadraticProgram, REG};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{LinkId, NetworkError, NetworkGraph};

/// Default KKT-residual tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Link flow below which split ratios fall back to the uniform convention.
const RATIO_FLOW_TOL: f64 = 1e-9;

/// One sensor reading with its least-squares weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub weight: f64,
}

impl Measured {
    pub fn new(value: f64, weight: f64) -> Self {
        Measured { value, weight }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    LinkFlow,
    Demand,
    TurnRatio,
}

impl std::fmt::Display for MeasurementKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MeasurementKind::LinkFlow => "link_flow",
            MeasurementKind::Demand => "demand",
            MeasurementKind::TurnRatio => "turn_ratio",
        })
    }
}

/// Everything the sensors said: flows on links, demands on entry links,
/// turn ratios on movements.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub link_flows: BTreeMap<LinkId, Measured>,
    pub demands: BTreeMap<LinkId, Measured>,
    pub turn_ratios: BTreeMap<(LinkId, LinkId), Measured>,
}

impl MeasurementSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.link_flows.is_empty() && self.demands.is_empty() && self.turn_ratios.is_empty()
    }

    pub fn len(&self) -> usize {
        self.link_flows.len() + self.demands.len() + self.turn_ratios.len()
    }

    pub fn with_link_flow(mut self, link: &str, value: f64, weight: f64) -> Self {
        self.link_flows
            .insert(LinkId::from(link), Measured::new(value, weight));
        self
    }

    pub fn with_demand(mut self, link: &str, value: f64, weight: f64) -> Self {
        self.demands
            .insert(LinkId::from(link), Measured::new(value, weight));
        self
    }

    pub fn with_turn_ratio(mut self, from: &str, to: &str, value: f64, weight: f64) -> Self {
        self.turn_ratios.insert(
            (LinkId::from(from), LinkId::from(to)),
            Measured::new(value, weight),
        );
        self
    }

    /// Reads `kind,id_from,id_to,value,weight` rows; `weight` may be empty
    /// (defaults to 1) and `id_to` is only meaningful for turn ratios.
    pub fn from_csv_str(text: &str) -> Result<Self, CalibrateError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| CalibrateError::Csv {
                row: 1,
                message: e.to_string(),
            })?
            .clone();
        let expected = ["kind", "id_from", "id_to", "value", "weight"];
        for (i, h) in headers.iter().enumerate() {
            if expected.get(i).map(|e| *e != h).unwrap_or(true) {
                return Err(CalibrateError::Csv {
                    row: 1,
                    message: format!("unexpected column `{h}`"),
                });
            }
        }
        let mut set = MeasurementSet::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let bad = |message: String| CalibrateError::Csv { row, message };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let get = |j: usize| rec.get(j).unwrap_or("");
            let value: f64 = get(3)
                .parse()
                .map_err(|_| bad(format!("bad value `{}`", get(3))))?;
            let weight: f64 = match get(4) {
                "" => 1.0,
                w => w
                    .parse()
                    .map_err(|_| bad(format!("bad weight `{w}`")))?,
            };
            if get(1).is_empty() {
                return Err(bad("missing id_from".into()));
            }
            let from = LinkId::from(get(1));
            let m = Measured::new(value, weight);
            let duplicate = match get(0) {
                "link_flow" => set.link_flows.insert(from, m).is_some(),
                "demand" => set.demands.insert(from, m).is_some(),
                "turn_ratio" => {
                    if get(2).is_empty() {
                        return Err(bad("turn_ratio needs id_to".into()));
                    }
                    set.turn_ratios
                        .insert((from, LinkId::from(get(2))), m)
                        .is_some()
                }
                other => return Err(bad(format!("unknown kind `{other}`"))),
            };
            if duplicate {
                return Err(bad("duplicate measurement".into()));
            }
        }
        Ok(set)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, CalibrateError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CalibrateError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv_str(&text)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("kind,id_from,id_to,value,weight\n");
        for (l, m) in &self.link_flows {
            let _ = writeln!(s, "link_flow,{l},,{},{}", m.value, m.weight);
        }
        for (l, m) in &self.demands {
            let _ = writeln!(s, "demand,{l},,{},{}", m.value, m.weight);
        }
        for ((l, t), m) in &self.turn_ratios {
            let _ = writeln!(s, "turn_ratio,{l},{t},{},{}", m.value, m.weight);
        }
        s
    }

    /// Every measured id exists in `g`, weights are positive, ratios lie in
    /// [0, 1], flows and demands are finite and non-negative.
    pub fn check(&self, g: &NetworkGraph) -> Result<(), CalibrateError> {
        let finite_flow = |kind: MeasurementKind, id: String, m: &Measured| {
            if !m.weight.is_finite() || m.weight <= 0.0 {
                Err(CalibrateError::BadMeasurement(
                    format!("{kind} {id}"),
                    format!("weight {} must be positive", m.weight),
                ))
            } else if !m.value.is_finite() || m.value < 0.0 {
                Err(CalibrateError::BadMeasurement(
                    format!("{kind} {id}"),
                    format!("value {} must be a non-negative number", m.value),
                ))
            } else {
                Ok(())
            }
        };
        for (l, m) in &self.link_flows {
            if g.link(l).is_none() {
                return Err(CalibrateError::UnknownMeasuredLink(l.clone()));
            }
            finite_flow(MeasurementKind::LinkFlow, l.to_string(), m)?;
        }
        let entries = g.entry_links();
        for (l, m) in &self.demands {
            if g.link(l).is_none() {
                return Err(CalibrateError::UnknownMeasuredLink(l.clone()));
            }
            if entries.binary_search(l).is_err() {
                return Err(CalibrateError::NotAnEntryLink(l.clone()));
            }
            finite_flow(MeasurementKind::Demand, l.to_string(), m)?;
        }
        for ((l, t), m) in &self.turn_ratios {
            let allowed = g.movement(l, t).map(|mv| mv.allowed).unwrap_or(false);
            if !allowed {
                return Err(CalibrateError::UnknownMeasuredMovement(l.clone(), t.clone()));
            }
            let id = format!("{} {l}->{t}", MeasurementKind::TurnRatio);
            if !m.weight.is_finite() || m.weight <= 0.0 {
                return Err(CalibrateError::BadMeasurement(
                    id,
                    format!("weight {} must be positive", m.weight),
                ));
            }
            if !(0.0..=1.0).contains(&m.value) {
                return Err(CalibrateError::BadMeasurement(
                    id,
                    format!("ratio {} outside [0, 1]", m.value),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("cannot read measurements: {0}")]
    Io(String),
    #[error("measurements row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("measured link `{0}` is not in the network")]
    UnknownMeasuredLink(LinkId),
    #[error("demand measured on `{0}`, which is not an entry link")]
    NotAnEntryLink(LinkId),
    #[error("measured turn ({0}, {1}) is not an allowed movement")]
    UnknownMeasuredMovement(LinkId, LinkId),
    #[error("measurement on {0}: {1}")]
    BadMeasurement(String, String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("estimation failed: {0}")]
    Solver(String),
    #[error("iteration limit; best iterate kept, KKT residual {kkt_residual:.3e}")]
    IterationLimit {
        kkt_residual: f64,
        best: Box<FlowSolution>,
    },
}

/// The assembled QP together with the variable layout that maps ids to
/// columns: links first, then entry demands, then movement flows.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub qp: QuadraticProgram,
    measurements: MeasurementSet,
    links: Vec<LinkId>,
    entries: Vec<LinkId>,
    movements: Vec<(LinkId, LinkId)>,
}

impl CalibrationProblem {
    pub fn num_vars(&self) -> usize {
        self.links.len() + self.entries.len() + self.movements.len()
    }

    pub fn link_index(&self, l: &LinkId) -> Option<usize> {
        self.links.binary_search(l).ok()
    }

    pub fn demand_index(&self, l: &LinkId) -> Option<usize> {
        self.entries
            .binary_search(l)
            .ok()
            .map(|i| self.links.len() + i)
    }

    pub fn movement_index(&self, from: &LinkId, to: &LinkId) -> Option<usize> {
        self.movements
            .binary_search_by(|(a, b)| (a, b).cmp(&(from, to)))
            .ok()
            .map(|i| self.links.len() + self.entries.len() + i)
    }

    pub fn measurements(&self) -> &MeasurementSet {
        &self.measurements
    }
}

/// Builds the weighted least-squares QP over flows, demands and movement
/// flows with balance equalities and capacity caps.
pub fn assemble_qp(
    g: &NetworkGraph,
    meas: &MeasurementSet,
) -> Result<CalibrationProblem, CalibrateError> {
    meas.check(g)?;
    let links: Vec<LinkId> = g.links().map(|l| l.id.clone()).collect();
    let entries: Vec<LinkId> = g.entry_links();
    let movements: Vec<(LinkId, LinkId)> = g
        .movements()
        .filter(|mv| mv.allowed)
        .map(|mv| (mv.from.clone(), mv.to.clone()))
        .collect();
    let (nl, ne) = (links.len(), entries.len());
    let n = nl + ne + movements.len();

    let problem = CalibrationProblem {
        qp: QuadraticProgram {
            h: DMatrix::zeros(n, n),
            c: DVector::zeros(n),
            constant: 0.0,
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            lo: DVector::zeros(n),
            hi: DVector::from_element(n, f64::INFINITY),
        },
        measurements: meas.clone(),
        links,
        entries,
        movements,
    };
    let mut p = problem;

    // Objective: Σ α(f_l − f̂)² + Σ β(d_l − d̂)² + Σ γ(f(l,m) − r̂·f_l)².
    for (l, m) in &meas.link_flows {
        let j = p.link_index(l).expect("checked above");
        p.qp.h[(j, j)] += 2.0 * m.weight;
        p.qp.c[j] -= 2.0 * m.weight * m.value;
        p.qp.constant += m.weight * m.value * m.value;
    }
    for (l, m) in &meas.demands {
        let j = p.demand_index(l).expect("checked above");
        p.qp.h[(j, j)] += 2.0 * m.weight;
        p.qp.c[j] -= 2.0 * m.weight * m.value;
        p.qp.constant += m.weight * m.value * m.value;
    }
    for ((l, t), m) in &meas.turn_ratios {
        let jm = p.movement_index(l, t).expect("checked above");
        let jl = p.link_index(l).expect("movement tail exists");
        p.qp.h[(jm, jm)] += 2.0 * m.weight;
        p.qp.h[(jl, jl)] += 2.0 * m.weight * m.value * m.value;
        p.qp.h[(jm, jl)] -= 2.0 * m.weight * m.value;
        p.qp.h[(jl, jm)] -= 2.0 * m.weight * m.value;
    }

    // Balance rows: f_l equals the movement flows out of l and into l, and
    // entry flow equals demand.
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    for l in &p.links {
        let outs = g.out_movements(l);
        if !outs.is_empty() {
            let mut row = vec![(p.link_index(l).unwrap(), 1.0)];
            for m in outs {
                row.push((p.movement_index(l, m).unwrap(), -1.0));
            }
            rows.push(row);
        }
        let ins = g.in_movements(l);
        if !ins.is_empty() {
            let mut row = vec![(p.link_index(l).unwrap(), 1.0)];
            for k in ins {
                row.push((p.movement_index(k, l).unwrap(), -1.0));
            }
            rows.push(row);
        }
    }
    for l in &p.entries {
        rows.push(vec![
            (p.link_index(l).unwrap(), 1.0),
            (p.demand_index(l).unwrap(), -1.0),
        ]);
    }
    let mut a = DMatrix::zeros(rows.len(), n);
    for (r, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            a[(r, j)] = v;
        }
    }
    p.qp.a = a;
    p.qp.b = DVector::zeros(rows.len());

    // Capacity caps where a signal serves the movement; unsignalized nodes
    // leave the movement uncapped.
    for i in 0..p.movements.len() {
        let (from, to) = p.movements[i].clone();
        match g.saturation_capacity(&from, &to) {
            Ok(s) => p.qp.hi[nl + ne + i] = s,
            Err(NetworkError::MissingTimingPlan(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(p)
}

/// One measurement compared against the calibrated model.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub kind: MeasurementKind,
    pub from: LinkId,
    pub to: Option<LinkId>,
    pub measured: f64,
    /// Model value on the measurement's own scale (vph, or a fraction for
    /// ratio rows).
    pub calibrated: f64,
    /// The objective-term error: calibrated − measured for flows and
    /// demands, `f(l,m) − r̂·f_l` (flow units) for ratio rows.
    pub error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FlowSolution {
    pub link_flows: BTreeMap<LinkId, f64>,
    pub demands: BTreeMap<LinkId, f64>,
    pub movement_flows: BTreeMap<(LinkId, LinkId), f64>,
    pub split_ratios: BTreeMap<(LinkId, LinkId), f64>,
    /// Links whose ratios fell back to the uniform convention (no flow).
    pub undetermined_ratio_links: Vec<LinkId>,
    pub residuals: Vec<Residual>,
    pub objective_value: f64,
    pub kkt_residual: f64,
    /// True when the data leave the minimizer non-unique; the returned point
    /// is then the minimum-norm minimizer.
    pub non_unique: bool,
}

impl FlowSolution {
    /// Table of every link flow, demand and split ratio next to its measured
    /// value; `-1` marks quantities nothing measured.
    pub fn to_csv_string(&self, meas: &MeasurementSet) -> String {
        let mut s = String::from("kind,id_from,id_to,measured,calculated\n");
        for (l, f) in &self.link_flows {
            let m = meas.link_flows.get(l).map(|m| m.value).unwrap_or(-1.0);
            let _ = writeln!(s, "link_flow,{l},,{m},{f}");
        }
        for (l, d) in &self.demands {
            let m = meas.demands.get(l).map(|m| m.value).unwrap_or(-1.0);
            let _ = writeln!(s, "demand,{l},,{m},{d}");
        }
        for ((l, t), r) in &self.split_ratios {
            let m = meas
                .turn_ratios
                .get(&(l.clone(), t.clone()))
                .map(|m| m.value)
                .unwrap_or(-1.0);
            let _ = writeln!(s, "turn_ratio,{l},{t},{m},{r}");
        }
        s
    }
}

/// `r*(l,m) = f*(l,m)/f*_l` where the link carries flow; links at zero get
/// the uniform split and are reported back.
pub fn split_ratios(
    link_flows: &BTreeMap<LinkId, f64>,
    movement_flows: &BTreeMap<(LinkId, LinkId), f64>,
) -> (BTreeMap<(LinkId, LinkId), f64>, Vec<LinkId>) {
    let mut by_tail: BTreeMap<&LinkId, Vec<&(LinkId, LinkId)>> = BTreeMap::new();
    for key in movement_flows.keys() {
        by_tail.entry(&key.0).or_default().push(key);
    }
    let mut ratios = BTreeMap::new();
    let mut undetermined = Vec::new();
    for (l, moves) in by_tail {
        let f = link_flows.get(l).copied().unwrap_or(0.0);
        if f > RATIO_FLOW_TOL {
            for key in moves {
                ratios.insert(key.clone(), movement_flows[key] / f);
            }
        } else {
            let share = 1.0 / moves.len() as f64;
            for key in moves {
                ratios.insert(key.clone(), share);
            }
            undetermined.push(l.clone());
        }
    }
    (ratios, undetermined)
}

/// Minimizes the assembled QP from the all-zeros point and reports the
/// calibrated network state.
pub fn solve_qp(problem: &CalibrationProblem, tol: f64) -> Result<FlowSolution, CalibrateError> {
    let x0 = DVector::zeros(problem.num_vars());
    match qp::solve(&problem.qp, x0, tol) {
        Ok(sol) => Ok(build_solution(problem, &sol)),
        Err(QpFailure::IterationLimit(best)) => {
            let solution = build_solution(problem, &best);
            Err(CalibrateError::IterationLimit {
                kkt_residual: best.kkt_residual,
                best: Box::new(solution),
            })
        }
        Err(e) => Err(CalibrateError::Solver(e.to_string())),
    }
}

/// Assembles and solves in one go.
pub fn calibrate(
    g: &NetworkGraph,
    meas: &MeasurementSet,
    tol: f64,
) -> Result<FlowSolution, CalibrateError> {
    solve_qp(&assemble_qp(g, meas)?, tol)
}

fn build_solution(problem: &CalibrationProblem, sol: &QpSolution) -> FlowSolution {
    let meas = &problem.measurements;
    let value = |j: usize| sol.x[j].max(0.0);

    let link_flows: BTreeMap<LinkId, f64> = problem
        .links
        .iter()
        .map(|l| (l.clone(), value(problem.link_index(l).unwrap())))
        .collect();
    let demands: BTreeMap<LinkId, f64> = problem
        .entries
        .iter()
        .map(|l| (l.clone(), value(problem.demand_index(l).unwrap())))
        .collect();
    let movement_flows: BTreeMap<(LinkId, LinkId), f64> = problem
        .movements
        .iter()
        .map(|(l, t)| {
            let j = problem.movement_index(l, t).unwrap();
            ((l.clone(), t.clone()), value(j))
        })
        .collect();
    let (ratios, undetermined) = split_ratios(&link_flows, &movement_flows);

    let mut residuals = Vec::with_capacity(meas.len());
    for (l, m) in &meas.link_flows {
        let cal = link_flows[l];
        residuals.push(Residual {
            kind: MeasurementKind::LinkFlow,
            from: l.clone(),
            to: None,
            measured: m.value,
            calibrated: cal,
            error: cal - m.value,
        });
    }
    for (l, m) in &meas.demands {
        let cal = demands[l];
        residuals.push(Residual {
            kind: MeasurementKind::Demand,
            from: l.clone(),
            to: None,
            measured: m.value,
            calibrated: cal,
            error: cal - m.value,
        });
    }
    for ((l, t), m) in &meas.turn_ratios {
        let key = (l.clone(), t.clone());
        residuals.push(Residual {
            kind: MeasurementKind::TurnRatio,
            from: l.clone(),
            to: Some(t.clone()),
            measured: m.value,
            calibrated: ratios[&key],
            error: movement_flows[&key] - m.value * link_flows[l],
        });
    }

    FlowSolution {
        link_flows,
        demands,
        movement_flows,
        split_ratios: ratios,
        undetermined_ratio_links: undetermined,
        residuals,
        objective_value: sol.objective,
        kkt_residual: sol.kkt_residual,
        non_unique: leaves_slack(problem, sol),
    }
}

/// The minimizer is unique exactly when the balance rows plus the
/// measurement rows pin every variable the objective does not hold against a
/// bound: rank of the stacked system over those columns must equal their
/// count.  A variable pinned with zero reduced cost can drift off its bound
/// at no cost, so it counts as free here.
fn leaves_slack(problem: &CalibrationProblem, sol: &QpSolution) -> bool {
    let qp = &problem.qp;
    let mut free: Vec<usize> = sol.free_vars.clone();
    for j in 0..qp.c.len() {
        if qp.lo[j] < qp.hi[j] && sol.priced[j].abs() <= 1e-7 && free.binary_search(&j).is_err() {
            free.push(j);
        }
    }
    free.sort_unstable();
    if free.is_empty() {
        return false;
    }
    let meas = &problem.measurements;
    let m = qp.a.nrows();
    let rows = m + meas.len();
    if rows == 0 {
        return true;
    }
    let mut stacked = DMatrix::zeros(rows, free.len());
    for r in 0..m {
        for (c, &j) in free.iter().enumerate() {
            stacked[(r, c)] = qp.a[(r, j)];
        }
    }
    let col_of = |j: usize| free.binary_search(&j).ok();
    let mut r = m;
    for l in meas.link_flows.keys() {
        if let Some(c) = col_of(problem.link_index(l).unwrap()) {
            stacked[(r, c)] = 1.0;
        }
        r += 1;
    }
    for l in meas.demands.keys() {
        if let Some(c) = col_of(problem.demand_index(l).unwrap()) {
            stacked[(r, c)] = 1.0;
        }
        r += 1;
    }
    for ((l, t), m) in &meas.turn_ratios {
        if let Some(c) = col_of(problem.movement_index(l, t).unwrap()) {
            stacked[(r, c)] = 1.0;
        }
        if let Some(c) = col_of(problem.link_index(l).unwrap()) {
            stacked[(r, c)] = -m.value;
        }
        r += 1;
    }
    let svd = stacked.svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return true;
    }
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > smax * 1e-9)
        .count();
    rank < free.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::testutil::{chain3, ten_link, ten_link_flow, link, movement, node};
    use crate::network::{
        LinkKind, NetworkData, NetworkGraph, NodeId, PhaseGreen, Stage, TimingPlan,
    };
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn lid(s: &str) -> LinkId {
        LinkId::from(s)
    }

    /// entry a → node → exits e1/e2.
    fn fork() -> NetworkGraph {
        let data = NetworkData {
            nodes: vec![node("n", 60.0, 0.0)],
            links: vec![
                link("a", None, Some("n"), LinkKind::Entry),
                link("e1", Some("n"), None, LinkKind::Exit),
                link("e2", Some("n"), None, LinkKind::Exit),
            ],
            movements: vec![movement("a", "e1", 1800.0), movement("a", "e2", 1800.0)],
            timing_plans: vec![],
            demands: vec![],
        };
        NetworkGraph::new(data).unwrap()
    }

    #[test]
    fn no_measurements_solves_to_zero_and_flags_slack() {
        let g = chain3();
        let p = assemble_qp(&g, &MeasurementSet::new()).unwrap();
        let sol = solve_qp(&p, DEFAULT_TOL).unwrap();
        assert_eq!(sol.objective_value, 0.0);
        for f in sol.link_flows.values() {
            assert_eq!(*f, 0.0);
        }
        assert!(sol.non_unique);
        // Zero flow everywhere: ratios fall back to uniform on both links
        // that have out-movements.
        assert_eq!(sol.undetermined_ratio_links, vec![lid("e"), lid("m")]);
        assert_eq!(sol.split_ratios[&(lid("e"), lid("m"))], 1.0);
    }

    #[test]
    fn one_entry_count_propagates_down_the_chain() {
        let g = chain3();
        let meas = MeasurementSet::new().with_link_flow("e", 600.0, 1.0);
        let sol = calibrate(&g, &meas, DEFAULT_TOL).unwrap();
        for l in ["e", "m", "x"] {
            assert_relative_eq!(sol.link_flows[&lid(l)], 600.0, epsilon = 1e-5);
        }
        assert_relative_eq!(sol.demands[&lid("e")], 600.0, epsilon = 1e-5);
        assert_relative_eq!(sol.movement_flows[&(lid("e"), lid("m"))], 600.0, epsilon = 1e-5);
        assert!(sol.residuals[0].error.abs() < 1e-5);
        assert!(sol.kkt_residual <= DEFAULT_TOL);
        assert!(!sol.non_unique);
        assert_relative_eq!(sol.split_ratios[&(lid("m"), lid("x"))], 1.0, epsilon = 1e-9);
        assert!(sol.undetermined_ratio_links.is_empty());
    }

    #[test]
    fn inconsistent_counts_meet_in_the_middle() {
        let g = chain3();
        let meas = MeasurementSet::new()
            .with_link_flow("e", 100.0, 1.0)
            .with_link_flow("m", 120.0, 1.0);
        let sol = calibrate(&g, &meas, DEFAULT_TOL).unwrap();
        assert_relative_eq!(sol.link_flows[&lid("e")], 110.0, epsilon = 1e-5);
        assert_relative_eq!(sol.link_flows[&lid("m")], 110.0, epsilon = 1e-5);
        assert_relative_eq!(sol.objective_value, 200.0, epsilon = 1e-4);
        let errs: Vec<f64> = sol.residuals.iter().map(|r| r.error).collect();
        assert_relative_eq!(errs[0], 10.0, epsilon = 1e-5);
        assert_relative_eq!(errs[1], -10.0, epsilon = 1e-5);
        // Never worse than leaving everything at zero.
        assert!(sol.objective_value <= 100.0 * 100.0 + 120.0 * 120.0);
    }

    #[test]
    fn weights_tilt_the_compromise() {
        let g = chain3();
        let meas = MeasurementSet::new()
            .with_link_flow("e", 100.0, 1.0)
            .with_link_flow("m", 120.0, 3.0);
        let sol = calibrate(&g, &meas, DEFAULT_TOL).unwrap();
        // min (f−100)² + 3(f−120)²  →  f = 115.
        assert_relative_eq!(sol.link_flows[&lid("e")], 115.0, epsilon = 1e-5);
    }

    #[test]
    fn scaling_all_weights_leaves_the_argmin_alone() {
        let g = chain3();
        let base = MeasurementSet::new()
            .with_link_flow("e", 100.0, 1.0)
            .with_link_flow("m", 120.0, 3.0);
        let scaled = MeasurementSet::new()
            .with_link_flow("e", 100.0, 7.0)
            .with_link_flow("m", 120.0, 21.0);
        let a = calibrate(&g, &base, DEFAULT_TOL).unwrap();
        let b = calibrate(&g, &scaled, DEFAULT_TOL).unwrap();
        for (l, f) in &a.link_flows {
            assert_relative_eq!(*f, b.link_flows[l], epsilon = 1e-6);
        }
        assert_relative_eq!(b.objective_value, 7.0 * a.objective_value, epsilon = 1e-6);
    }

    #[test]
    fn capacity_cap_binds_and_conservation_holds() {
        let mut g = chain3();
        // Starve the first signal: 10 s of green on a 60 s cycle caps the
        // movement at 300 vph.
        g.set_timing_plan(TimingPlan {
            node: NodeId::from("n1"),
            offset_s: 0.0,
            stages: vec![Stage {
                phases: vec![PhaseGreen {
                    from: lid("e"),
                    to: lid("m"),
                    green_s: 10.0,
                }],
            }],
        });
        let meas = MeasurementSet::new().with_link_flow("e", 600.0, 1.0);
        let sol = calibrate(&g, &meas, DEFAULT_TOL).unwrap();
        assert_relative_eq!(sol.movement_flows[&(lid("e"), lid("m"))], 300.0, epsilon = 1e-6);
        assert_relative_eq!(sol.link_flows[&lid("e")], 300.0, epsilon = 1e-6);
        assert_relative_eq!(sol.link_flows[&lid("x")], 300.0, epsilon = 1e-6);
        assert_relative_eq!(sol.objective_value, 300.0 * 300.0, epsilon = 1e-3);
        assert_relative_eq!(sol.residuals[0].error, -300.0, epsilon = 1e-6);
    }

    #[test]
    fn ratio_measurement_splits_the_fork() {
        let g = fork();
        let meas = MeasurementSet::new()
            .with_link_flow("a", 400.0, 1.0)
            .with_turn_ratio("a", "e1", 0.75, 1.0);
        let sol = calibrate(&g, &meas, DEFAULT_TOL).unwrap();
        assert_relative_eq!(sol.link_flows[&lid("a")], 400.0, epsilon = 1e-5);
        assert_relative_eq!(sol.movement_flows[&(lid("a"), lid("e1"))], 300.0, epsilon = 1e-5);
        assert_relative_eq!(sol.movement_flows[&(lid("a"), lid("e2"))], 100.0, epsilon = 1e-5);
        assert_relative_eq!(sol.split_ratios[&(lid("a"), lid("e1"))], 0.75, epsilon = 1e-7);
        assert_relative_eq!(sol.split_ratios[&(lid("a"), lid("e2"))], 0.25, epsilon = 1e-7);
        assert!(!sol.non_unique);
        for r in &sol.residuals {
            assert!(r.error.abs() < 1e-5, "residual {r:?}");
        }
    }

    #[test]
    fn solution_matches_a_direct_kkt_solve() {
        let g = chain3();
        let meas = MeasurementSet::new().with_link_flow("e", 600.0, 1.0);
        let p = assemble_qp(&g, &meas).unwrap();
        let sol = solve_qp(&p, DEFAULT_TOL).unwrap();

        // Oracle: stationarity + balance as one saddle-point system, solved
        // by least squares (the balance rows are redundant, SVD shrugs).
        let n = p.num_vars();
        let m = p.qp.a.nrows();
        let mut kkt = DMatrix::zeros(n + m, n + m);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = p.qp.h[(i, j)];
            }
            kkt[(i, i)] += 2.0 * REG;
        }
        for r in 0..m {
            for j in 0..n {
                kkt[(n + r, j)] = p.qp.a[(r, j)];
                kkt[(j, n + r)] = p.qp.a[(r, j)];
            }
        }
        let mut rhs = DVector::zeros(n + m);
        for j in 0..n {
            rhs[j] = -p.qp.c[j];
        }
        let svd = kkt.svd(true, true);
        let smax = svd.singular_values.max();
        let direct = svd.solve(&rhs, smax * 1e-13).unwrap();

        for l in &["e", "m", "x"] {
            let j = p.link_index(&lid(l)).unwrap();
            assert_relative_eq!(sol.link_flows[&lid(l)], direct[j], epsilon = 1e-6);
        }
        let obj_direct = {
            let x = direct.rows(0, n).into_owned();
            0.5 * (&p.qp.h * &x).dot(&x) + p.qp.c.dot(&x) + p.qp.constant
        };
        assert_relative_eq!(sol.objective_value, obj_direct, epsilon = 1e-6);
    }

    #[test]
    fn four_counts_pin_every_link_of_the_ten_link_example() {
        let g = ten_link();
        let truth = ten_link_flow();
        let mut meas = MeasurementSet::new();
        for l in ["b", "e", "f", "g"] {
            meas = meas.with_link_flow(l, truth[&lid(l)], 1.0);
        }
        let sol = calibrate(&g, &meas, DEFAULT_TOL).unwrap();
        for (l, f) in &truth {
            assert_relative_eq!(sol.link_flows[l], *f, epsilon = 1e-4);
        }
        for r in &sol.residuals {
            assert!(r.error.abs() < 1e-4, "residual {r:?}");
        }
        // Link flows are pinned, but the movement flows through node 1 are
        // not: its two in-flows can trade mass across (c,a)/(c,b)/(e,a)/(e,b)
        // without moving any link total, so the solver reports slack and
        // returns the minimum-norm split.
        assert!(sol.non_unique);
        let t = sol.movement_flows[&(lid("c"), lid("a"))];
        assert_relative_eq!(t, 50.0, epsilon = 1e-4);
        assert_relative_eq!(
            sol.movement_flows[&(lid("c"), lid("b"))],
            150.0,
            epsilon = 1e-4
        );
        // Balance holds at every node regardless.
        for (l, f) in &sol.link_flows {
            let outs: f64 = sol
                .movement_flows
                .iter()
                .filter(|((a, _), _)| a == l)
                .map(|(_, v)| v)
                .sum();
            let ins: f64 = sol
                .movement_flows
                .iter()
                .filter(|((_, b), _)| b == l)
                .map(|(_, v)| v)
                .sum();
            if !g.out_movements(l).is_empty() {
                assert_relative_eq!(*f, outs, epsilon = 1e-6);
            }
            if !g.in_movements(l).is_empty() {
                assert_relative_eq!(*f, ins, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn measurement_checks_reject_bad_input() {
        let g = chain3();
        let unknown = MeasurementSet::new().with_link_flow("zz", 1.0, 1.0);
        assert!(matches!(
            assemble_qp(&g, &unknown),
            Err(CalibrateError::UnknownMeasuredLink(_))
        ));
        let not_entry = MeasurementSet::new().with_demand("m", 1.0, 1.0);
        assert!(matches!(
            assemble_qp(&g, &not_entry),
            Err(CalibrateError::NotAnEntryLink(_))
        ));
        let bad_ratio = MeasurementSet::new().with_turn_ratio("e", "m", 1.5, 1.0);
        assert!(matches!(
            assemble_qp(&g, &bad_ratio),
            Err(CalibrateError::BadMeasurement(..))
        ));
        let bad_weight = MeasurementSet::new().with_link_flow("e", 1.0, 0.0);
        assert!(matches!(
            assemble_qp(&g, &bad_weight),
            Err(CalibrateError::BadMeasurement(..))
        ));
        let no_such_turn = MeasurementSet::new().with_turn_ratio("e", "x", 0.5, 1.0);
        assert!(matches!(
            assemble_qp(&g, &no_such_turn),
            Err(CalibrateError::UnknownMeasuredMovement(..))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let text = "kind,id_from,id_to,value,weight\n\
                    link_flow,e,,600,1\n\
                    demand,e,,590,0.5\n\
                    turn_ratio,e,m,0.75,2\n";
        let set = MeasurementSet::from_csv_str(text).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.link_flows[&lid("e")].value, 600.0);
        assert_eq!(set.demands[&lid("e")].weight, 0.5);
        assert_eq!(set.turn_ratios[&(lid("e"), lid("m"))].value, 0.75);
        let round = MeasurementSet::from_csv_str(&set.to_csv_string()).unwrap();
        assert_eq!(round, set);
    }

    #[test]
    fn csv_defaults_and_errors() {
        let no_weight = "kind,id_from,id_to,value\nlink_flow,e,,600\n";
        let set = MeasurementSet::from_csv_str(no_weight).unwrap();
        assert_eq!(set.link_flows[&lid("e")].weight, 1.0);

        for (bad, what) in [
            ("kind,id_from,id_to,value,weight\nspeed,e,,1,1\n", "kind"),
            ("kind,id_from,id_to,value,weight\nlink_flow,,,1,1\n", "id"),
            ("kind,id_from,id_to,value,weight\nturn_ratio,e,,0.5,1\n", "id_to"),
            ("kind,id_from,id_to,value,weight\nlink_flow,e,,x,1\n", "value"),
            (
                "kind,id_from,id_to,value,weight\nlink_flow,e,,1,1\nlink_flow,e,,2,1\n",
                "duplicate",
            ),
            ("oops,id_from,id_to,value,weight\nlink_flow,e,,1,1\n", "header"),
        ] {
            assert!(
                matches!(
                    MeasurementSet::from_csv_str(bad),
                    Err(CalibrateError::Csv { .. })
                ),
                "expected csv error for {what}"
            );
        }
    }

    #[test]
    fn solution_csv_marks_unmeasured_with_minus_one() {
        let g = chain3();
        let meas = MeasurementSet::new().with_link_flow("e", 600.0, 1.0);
        let sol = calibrate(&g, &meas, DEFAULT_TOL).unwrap();
        let csv = sol.to_csv_string(&meas);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kind,id_from,id_to,measured,calculated");
        assert!(lines.iter().any(|l| l.starts_with("link_flow,e,,600,")));
        assert!(lines.iter().any(|l| l.starts_with("link_flow,m,,-1,")));
        assert!(lines.iter().any(|l| l.starts_with("demand,e,,-1,")));
        assert!(lines.iter().any(|l| l.starts_with("turn_ratio,e,m,-1,")));
    }
}

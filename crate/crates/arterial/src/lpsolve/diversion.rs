//! How much extra traffic a fixed route can absorb.
//!
//! With timing held fixed the answer is the smallest capacity slack along
//! the route.  Allowing each intersection to re-split its green durations
//! (same stages, same cycle) turns the question into an LP over the
//! durations: route movements must fit baseline + diverted flow, every other
//! movement must still fit its baseline, and each node's green budget
//! `T_n − L_n` caps the total.

use super::{solve_lp, LinearProgram, LpError, LpOutcome, Sense};
use crate::network::{LinkId, NetworkError, NetworkGraph, NodeId, TimingPlan};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

const FLOW_EPS: f64 = 1e-9;
/// Movements within this much of the minimum slack count as binding.
const BINDING_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct DiversionResult {
    /// D* (fixed timing) or D⁺* (re-split timing), in vph.
    pub optimal_diversion_vph: f64,
    /// Route movements whose capacity constraint is tight at the optimum.
    pub binding_movements: Vec<(LinkId, LinkId)>,
    /// Re-split timing plans; `None` when timing was held fixed.
    pub new_plans: Option<Vec<TimingPlan>>,
}

#[derive(Debug, Error)]
pub enum DiversionError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("route must contain at least two links")]
    RouteTooShort,
    #[error("movement ({0}, {1}) carries flow but has no green in any stage")]
    NoGreen(LinkId, LinkId),
    #[error("node {node}: serving baseline flows needs {needed_s:.1} s of green per cycle, budget is {budget_s:.1} s")]
    Unservable {
        node: NodeId,
        needed_s: f64,
        budget_s: f64,
    },
    #[error(transparent)]
    Lp(#[from] LpError),
}

fn route_pairs(route: &[LinkId]) -> Result<Vec<(LinkId, LinkId)>, DiversionError> {
    if route.len() < 2 {
        return Err(DiversionError::RouteTooShort);
    }
    Ok(route
        .windows(2)
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect())
}

/// D* = max(0, min over route movements of `s(l,m) − f*(l,m)`), the extra
/// flow the route absorbs without touching signal timing.
pub fn max_simple_diversion(
    g: &NetworkGraph,
    baseline: &BTreeMap<(LinkId, LinkId), f64>,
    route: &[LinkId],
) -> Result<DiversionResult, DiversionError> {
    let pairs = route_pairs(route)?;
    let mut slacks = Vec::with_capacity(pairs.len());
    for (l, m) in &pairs {
        let s = g.saturation_capacity(l, m)?;
        let f = baseline.get(&(l.clone(), m.clone())).copied().unwrap_or(0.0);
        slacks.push(((l.clone(), m.clone()), s - f));
    }
    let min_slack = slacks.iter().map(|(_, s)| *s).fold(f64::INFINITY, f64::min);
    let binding_movements = slacks
        .iter()
        .filter(|(_, s)| *s <= min_slack + BINDING_TOL)
        .map(|(k, _)| k.clone())
        .collect();
    Ok(DiversionResult {
        optimal_diversion_vph: min_slack.max(0.0),
        binding_movements,
        new_plans: None,
    })
}

/// D⁺*: the diversion achievable when every signalized node may re-split its
/// stage durations (stage set, cycle time and lost time unchanged).  Always
/// at least D*, since keeping the current durations is one feasible choice.
///
/// Nodes without a timing plan are treated as unsignalized and impose no
/// capacity constraints; route movements must be at signalized nodes.
pub fn max_retimed_diversion(
    g: &NetworkGraph,
    baseline: &BTreeMap<(LinkId, LinkId), f64>,
    route: &[LinkId],
) -> Result<DiversionResult, DiversionError> {
    let pairs = route_pairs(route)?;
    let route_set: BTreeSet<(LinkId, LinkId)> = pairs.iter().cloned().collect();
    for (l, m) in &route_set {
        let mv = g
            .movement(l, m)
            .ok_or_else(|| NetworkError::UnknownMovement(l.clone(), m.clone()))?;
        if !mv.allowed {
            return Err(NetworkError::ForbiddenMovement(l.clone(), m.clone()).into());
        }
        let node = g.movement_node(l, m).expect("movement endpoints share a node");
        if g.timing_plan(node).is_none() {
            return Err(NetworkError::MissingTimingPlan(node.clone()).into());
        }
    }

    // One LP variable per (node, stage, phase); variable 0 is D itself.
    let mut var_of: BTreeMap<(NodeId, usize, usize), usize> = BTreeMap::new();
    let mut phases_of: BTreeMap<(LinkId, LinkId), Vec<usize>> = BTreeMap::new();
    let mut node_vars: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    let mut next = 1;
    for plan in g.timing_plans() {
        for (i, stage) in plan.stages.iter().enumerate() {
            for (k, phase) in stage.phases.iter().enumerate() {
                var_of.insert((plan.node.clone(), i, k), next);
                phases_of
                    .entry((phase.from.clone(), phase.to.clone()))
                    .or_default()
                    .push(next);
                node_vars.entry(plan.node.clone()).or_default().push(next);
                next += 1;
            }
        }
    }
    let nvars = next;

    let flow_of = |key: &(LinkId, LinkId)| baseline.get(key).copied().unwrap_or(0.0);

    // Feasibility at D = 0 must hold before asking the LP for more: each
    // movement needs green f*·T/c, and the needs at a node are additive.
    for plan in g.timing_plans() {
        let node = g.node(&plan.node).unwrap();
        let budget = node.cycle_time_s - node.lost_time_s;
        let mut needed = 0.0;
        for mv in g.movements().filter(|m| m.allowed) {
            let key = (mv.from.clone(), mv.to.clone());
            if g.movement_node(&mv.from, &mv.to) != Some(&plan.node) {
                continue;
            }
            let f = flow_of(&key);
            if f <= FLOW_EPS {
                continue;
            }
            if !phases_of.contains_key(&key) {
                return Err(DiversionError::NoGreen(key.0, key.1));
            }
            needed += f * node.cycle_time_s / mv.saturation_flow_vph;
        }
        if needed > budget + 1e-9 {
            return Err(DiversionError::Unservable {
                node: plan.node.clone(),
                needed_s: needed,
                budget_s: budget,
            });
        }
    }

    let mut objective = vec![0.0; nvars];
    objective[0] = 1.0;
    let mut lp = LinearProgram::new(Sense::Maximize, objective);
    for mv in g.movements().filter(|m| m.allowed) {
        let key = (mv.from.clone(), mv.to.clone());
        let node_id = g.movement_node(&mv.from, &mv.to).unwrap();
        if g.timing_plan(node_id).is_none() {
            continue;
        }
        let on_route = route_set.contains(&key);
        let f = flow_of(&key);
        if !on_route && f <= FLOW_EPS {
            continue; // 0 ≤ s(l,m) holds for free
        }
        // f* (+ D) ≤ (c/T) Σ g  ⇔  [D] − (c/T) Σ g ≤ −f*
        let cycle = g.node(node_id).unwrap().cycle_time_s;
        let rate = mv.saturation_flow_vph / cycle;
        let mut row = vec![0.0; nvars];
        if on_route {
            row[0] = 1.0;
        }
        for &v in phases_of.get(&key).map(Vec::as_slice).unwrap_or(&[]) {
            row[v] -= rate;
        }
        lp.le.push((row, -f));
    }
    for (node_id, vars) in &node_vars {
        let node = g.node(node_id).unwrap();
        let mut row = vec![0.0; nvars];
        for &v in vars {
            row[v] = 1.0;
        }
        lp.le.push((row, node.cycle_time_s - node.lost_time_s));
    }

    let x = match solve_lp(&lp)? {
        LpOutcome::Optimal { x, .. } => x,
        other => {
            return Err(LpError::NumericBreakdown(format!(
                "re-timing LP should have a finite optimum, got {other:?}"
            ))
            .into())
        }
    };
    let diversion = x[0];

    let new_plans: Vec<TimingPlan> = g
        .timing_plans()
        .map(|plan| {
            let mut plan = plan.clone();
            for (i, stage) in plan.stages.iter_mut().enumerate() {
                for (k, phase) in stage.phases.iter_mut().enumerate() {
                    phase.green_s = x[var_of[&(plan.node.clone(), i, k)]];
                }
            }
            plan
        })
        .collect();

    let mut binding_movements = Vec::new();
    for key in route_set {
        let node_id = g.movement_node(&key.0, &key.1).unwrap();
        let cycle = g.node(node_id).unwrap().cycle_time_s;
        let c = g.movement(&key.0, &key.1).unwrap().saturation_flow_vph;
        let green: f64 = phases_of
            .get(&key)
            .map(Vec::as_slice)
            .unwrap_or(&[])
            .iter()
            .map(|&v| x[v])
            .sum();
        let slack = green / cycle * c - flow_of(&key) - diversion;
        if slack <= BINDING_TOL {
            binding_movements.push(key);
        }
    }
    Ok(DiversionResult {
        optimal_diversion_vph: diversion,
        binding_movements,
        new_plans: Some(new_plans),
    })
}

//! Well-formedness checks, report-style.
//!
//! Structural violations (duplicate ids, dangling references, endpoint
//! mismatches) make a graph unconstructible; semantic ones (non-positive
//! geometry, timing budgets, ratio sums, broken routes) are reported but do
//! not prevent construction.

use super::*;
use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyNetwork,
    DuplicateNode(NodeId),
    DuplicateLink(LinkId),
    DuplicateMovement(LinkId, LinkId),
    UnknownNodeRef { link: LinkId, node: NodeId },
    /// Entry links must have no tail node, exit links no head node,
    /// internal links both.
    EndpointKindMismatch { link: LinkId },
    UnknownLinkRef { context: String, link: LinkId },
    MovementEndpointsDisjoint { from: LinkId, to: LinkId },
    /// Movements out of an exit link or into an entry link.
    MovementOnBoundary { from: LinkId, to: LinkId },
    DuplicateTimingPlan(NodeId),
    PhaseNotAMovement { node: NodeId, from: LinkId, to: LinkId },
    PhaseAtWrongNode { node: NodeId, from: LinkId, to: LinkId },

    NonPositiveLength(LinkId),
    NonPositiveTravelTime(LinkId),
    ZeroStorage(LinkId),
    ZeroLanes(LinkId),
    NonPositiveSaturation(LinkId, LinkId),
    NonPositiveCycle(NodeId),
    NegativeLostTime(NodeId),
    LostTimeNotBelowCycle(NodeId),
    NegativeGreen { node: NodeId, from: LinkId, to: LinkId },
    /// Σ_i Σ_(l,m) g_{n,i}(l,m) > T_n − L_n.
    StageBudgetExceeded { node: NodeId, total_green_s: f64, budget_s: f64 },
    NegativeEntryFlow { commodity: u32, link: LinkId },
    EntryFlowNotOnEntryLink { commodity: u32, link: LinkId },
    RatioOutOfRange { commodity: u32, from: LinkId, to: LinkId },
    RatioOnForbiddenMovement { commodity: u32, from: LinkId, to: LinkId },
    /// Ratios present on a link must cover its allowed movements and sum to 1.
    RatioSumNotOne { commodity: u32, link: LinkId, sum: f64 },
    RouteAndRatiosBothGiven { commodity: u32 },
    RouteNotConnected { commodity: u32, position: usize },
    RouteEndpointsNotBoundary { commodity: u32 },
    RouteEntryFlowMismatch { commodity: u32 },
}

impl Violation {
    /// Structural violations abort graph construction.
    pub fn is_structural(&self) -> bool {
        use Violation::*;
        matches!(
            self,
            EmptyNetwork
                | DuplicateNode(_)
                | DuplicateLink(_)
                | DuplicateMovement(..)
                | UnknownNodeRef { .. }
                | EndpointKindMismatch { .. }
                | UnknownLinkRef { .. }
                | MovementEndpointsDisjoint { .. }
                | MovementOnBoundary { .. }
                | DuplicateTimingPlan(_)
                | PhaseNotAMovement { .. }
                | PhaseAtWrongNode { .. }
        )
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            EmptyNetwork => write!(f, "network has no nodes"),
            DuplicateNode(n) => write!(f, "duplicate node id {n}"),
            DuplicateLink(l) => write!(f, "duplicate link id {l}"),
            DuplicateMovement(a, b) => write!(f, "duplicate movement ({a}, {b})"),
            UnknownNodeRef { link, node } => write!(f, "link {link} references unknown node {node}"),
            EndpointKindMismatch { link } => {
                write!(f, "link {link}: endpoints do not match its entry/internal/exit kind")
            }
            UnknownLinkRef { context, link } => write!(f, "{context} references unknown link {link}"),
            MovementEndpointsDisjoint { from, to } => {
                write!(f, "movement ({from}, {to}): links do not meet at a node")
            }
            MovementOnBoundary { from, to } => {
                write!(f, "movement ({from}, {to}) crosses a virtual boundary endpoint")
            }
            DuplicateTimingPlan(n) => write!(f, "node {n} has more than one timing plan"),
            PhaseNotAMovement { node, from, to } => {
                write!(f, "timing plan at {node}: phase ({from}, {to}) is not an allowed movement")
            }
            PhaseAtWrongNode { node, from, to } => {
                write!(f, "timing plan at {node}: movement ({from}, {to}) happens elsewhere")
            }
            NonPositiveLength(l) => write!(f, "link {l}: length must be positive"),
            NonPositiveTravelTime(l) => write!(f, "link {l}: travel time must be positive"),
            ZeroStorage(l) => write!(f, "link {l}: storage must be at least 1"),
            ZeroLanes(l) => write!(f, "link {l}: lanes must be at least 1"),
            NonPositiveSaturation(a, b) => {
                write!(f, "movement ({a}, {b}): saturation flow must be positive")
            }
            NonPositiveCycle(n) => write!(f, "node {n}: cycle time must be positive"),
            NegativeLostTime(n) => write!(f, "node {n}: lost time must be nonnegative"),
            LostTimeNotBelowCycle(n) => write!(f, "node {n}: lost time must be below cycle time"),
            NegativeGreen { node, from, to } => {
                write!(f, "timing plan at {node}: negative green for ({from}, {to})")
            }
            StageBudgetExceeded { node, total_green_s, budget_s } => write!(
                f,
                "timing plan at {node}: total green {total_green_s} s exceeds budget {budget_s} s"
            ),
            NegativeEntryFlow { commodity, link } => {
                write!(f, "commodity {commodity}: negative entry flow on {link}")
            }
            EntryFlowNotOnEntryLink { commodity, link } => {
                write!(f, "commodity {commodity}: {link} is not an entry link")
            }
            RatioOutOfRange { commodity, from, to } => {
                write!(f, "commodity {commodity}: ratio for ({from}, {to}) outside [0, 1]")
            }
            RatioOnForbiddenMovement { commodity, from, to } => {
                write!(f, "commodity {commodity}: ratio on forbidden movement ({from}, {to})")
            }
            RatioSumNotOne { commodity, link, sum } => write!(
                f,
                "commodity {commodity}: turn ratios out of {link} sum to {sum}, expected 1"
            ),
            RouteAndRatiosBothGiven { commodity } => {
                write!(f, "commodity {commodity}: give either turn ratios or a route, not both")
            }
            RouteNotConnected { commodity, position } => write!(
                f,
                "commodity {commodity}: route step {position} is not an allowed movement"
            ),
            RouteEndpointsNotBoundary { commodity } => {
                write!(f, "commodity {commodity}: route must run from an entry link to an exit link")
            }
            RouteEntryFlowMismatch { commodity } => write!(
                f,
                "commodity {commodity}: entry flows must name exactly the route's first link"
            ),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "- {v}")?;
        }
        Ok(())
    }
}

/// Full report: structural and semantic checks over a raw description.
pub fn validate(data: &NetworkData) -> ValidationReport {
    let mut report = structural(data, None);
    semantic(data, &mut report);
    report
}

pub(super) fn structural(data: &NetworkData, super_node: Option<&NodeId>) -> ValidationReport {
    let mut v = Vec::new();
    if data.nodes.is_empty() {
        v.push(Violation::EmptyNetwork);
    }
    let mut node_ids = BTreeSet::new();
    for n in &data.nodes {
        if !node_ids.insert(n.id.clone()) {
            v.push(Violation::DuplicateNode(n.id.clone()));
        }
    }
    let mut link_ids = BTreeSet::new();
    for l in &data.links {
        if !link_ids.insert(l.id.clone()) {
            v.push(Violation::DuplicateLink(l.id.clone()));
        }
        for n in [&l.from, &l.to].into_iter().flatten() {
            if !node_ids.contains(n) {
                v.push(Violation::UnknownNodeRef {
                    link: l.id.clone(),
                    node: n.clone(),
                });
            }
        }
        // Entry links may gain a tail and exit links a head only at the
        // designated super node.
        let boundary_ok = |end: &Option<NodeId>| match (end, super_node) {
            (None, _) => true,
            (Some(n), Some(s)) => n == s,
            (Some(_), None) => false,
        };
        let ok = match l.kind {
            LinkKind::Entry => boundary_ok(&l.from) && l.to.is_some(),
            LinkKind::Exit => l.from.is_some() && boundary_ok(&l.to),
            LinkKind::Internal => l.from.is_some() && l.to.is_some(),
        };
        if !ok {
            v.push(Violation::EndpointKindMismatch { link: l.id.clone() });
        }
    }
    let by_id: BTreeMap<&LinkId, &Link> = data.links.iter().map(|l| (&l.id, l)).collect();
    let mut mv_ids = BTreeSet::new();
    for m in &data.movements {
        if !mv_ids.insert((m.from.clone(), m.to.clone())) {
            v.push(Violation::DuplicateMovement(m.from.clone(), m.to.clone()));
        }
        let (Some(from), Some(to)) = (by_id.get(&m.from), by_id.get(&m.to)) else {
            for (link, present) in [(&m.from, by_id.contains_key(&m.from)), (&m.to, by_id.contains_key(&m.to))] {
                if !present {
                    v.push(Violation::UnknownLinkRef {
                        context: "movement".into(),
                        link: link.clone(),
                    });
                }
            }
            continue;
        };
        match (&from.to, &to.from) {
            (Some(a), Some(b)) if a == b && Some(a) != super_node => {}
            (Some(a), Some(b)) if a == b => {
                // Turning around through the virtual boundary node is not a
                // real movement.
                v.push(Violation::MovementOnBoundary {
                    from: m.from.clone(),
                    to: m.to.clone(),
                });
            }
            (None, _) | (_, None) => {
                v.push(Violation::MovementOnBoundary {
                    from: m.from.clone(),
                    to: m.to.clone(),
                });
            }
            _ => {
                v.push(Violation::MovementEndpointsDisjoint {
                    from: m.from.clone(),
                    to: m.to.clone(),
                });
            }
        }
    }
    let movement_set: BTreeSet<(LinkId, LinkId)> = data
        .movements
        .iter()
        .filter(|m| m.allowed)
        .map(|m| (m.from.clone(), m.to.clone()))
        .collect();
    let mut plan_nodes = BTreeSet::new();
    for p in &data.timing_plans {
        if !node_ids.contains(&p.node) {
            v.push(Violation::UnknownNodeRef {
                link: LinkId(format!("timing plan {}", p.node)),
                node: p.node.clone(),
            });
        }
        if !plan_nodes.insert(p.node.clone()) {
            v.push(Violation::DuplicateTimingPlan(p.node.clone()));
        }
        for phase in p.stages.iter().flat_map(|s| &s.phases) {
            if !movement_set.contains(&(phase.from.clone(), phase.to.clone())) {
                v.push(Violation::PhaseNotAMovement {
                    node: p.node.clone(),
                    from: phase.from.clone(),
                    to: phase.to.clone(),
                });
            } else {
                let at = by_id.get(&phase.from).and_then(|l| l.to.as_ref());
                if at != Some(&p.node) {
                    v.push(Violation::PhaseAtWrongNode {
                        node: p.node.clone(),
                        from: phase.from.clone(),
                        to: phase.to.clone(),
                    });
                }
            }
        }
    }
    for d in &data.demands {
        for ef in &d.entry_flows {
            if !link_ids.contains(&ef.link) {
                v.push(Violation::UnknownLinkRef {
                    context: format!("commodity {}", d.commodity),
                    link: ef.link.clone(),
                });
            }
        }
        for t in &d.turn_ratios {
            for link in [&t.from, &t.to] {
                if !link_ids.contains(link) {
                    v.push(Violation::UnknownLinkRef {
                        context: format!("commodity {}", d.commodity),
                        link: link.clone(),
                    });
                }
            }
        }
        if let Some(route) = &d.route {
            for link in route {
                if !link_ids.contains(link) {
                    v.push(Violation::UnknownLinkRef {
                        context: format!("commodity {}", d.commodity),
                        link: link.clone(),
                    });
                }
            }
        }
    }
    ValidationReport { violations: v }
}

fn semantic(data: &NetworkData, report: &mut ValidationReport) {
    let v = &mut report.violations;
    for n in &data.nodes {
        if n.cycle_time_s <= 0.0 {
            v.push(Violation::NonPositiveCycle(n.id.clone()));
        }
        if n.lost_time_s < 0.0 {
            v.push(Violation::NegativeLostTime(n.id.clone()));
        } else if n.cycle_time_s > 0.0 && n.lost_time_s >= n.cycle_time_s {
            v.push(Violation::LostTimeNotBelowCycle(n.id.clone()));
        }
    }
    for l in &data.links {
        if l.length_miles <= 0.0 {
            v.push(Violation::NonPositiveLength(l.id.clone()));
        }
        if l.travel_time_s <= 0.0 {
            v.push(Violation::NonPositiveTravelTime(l.id.clone()));
        }
        if l.storage == 0 {
            v.push(Violation::ZeroStorage(l.id.clone()));
        }
        if l.lanes == 0 {
            v.push(Violation::ZeroLanes(l.id.clone()));
        }
    }
    for m in &data.movements {
        if m.saturation_flow_vph <= 0.0 {
            v.push(Violation::NonPositiveSaturation(m.from.clone(), m.to.clone()));
        }
    }
    let nodes: BTreeMap<&NodeId, &Node> = data.nodes.iter().map(|n| (&n.id, n)).collect();
    for p in &data.timing_plans {
        let mut total = 0.0;
        for phase in p.stages.iter().flat_map(|s| &s.phases) {
            if phase.green_s < 0.0 {
                v.push(Violation::NegativeGreen {
                    node: p.node.clone(),
                    from: phase.from.clone(),
                    to: phase.to.clone(),
                });
            }
            total += phase.green_s.max(0.0);
        }
        if let Some(n) = nodes.get(&p.node) {
            let budget = n.cycle_time_s - n.lost_time_s;
            if total > budget + 1e-9 {
                v.push(Violation::StageBudgetExceeded {
                    node: p.node.clone(),
                    total_green_s: total,
                    budget_s: budget,
                });
            }
        }
    }

    let links: BTreeMap<&LinkId, &Link> = data.links.iter().map(|l| (&l.id, l)).collect();
    let allowed: BTreeSet<(LinkId, LinkId)> = data
        .movements
        .iter()
        .filter(|m| m.allowed)
        .map(|m| (m.from.clone(), m.to.clone()))
        .collect();
    let forbidden: BTreeSet<(LinkId, LinkId)> = data
        .movements
        .iter()
        .filter(|m| !m.allowed)
        .map(|m| (m.from.clone(), m.to.clone()))
        .collect();
    for d in &data.demands {
        for ef in &d.entry_flows {
            if ef.flow_vph < 0.0 {
                v.push(Violation::NegativeEntryFlow {
                    commodity: d.commodity,
                    link: ef.link.clone(),
                });
            }
            if let Some(l) = links.get(&ef.link) {
                if l.kind != LinkKind::Entry {
                    v.push(Violation::EntryFlowNotOnEntryLink {
                        commodity: d.commodity,
                        link: ef.link.clone(),
                    });
                }
            }
        }
        if d.route.is_some() && !d.turn_ratios.is_empty() {
            v.push(Violation::RouteAndRatiosBothGiven { commodity: d.commodity });
        }
        let mut per_link: BTreeMap<&LinkId, f64> = BTreeMap::new();
        for t in &d.turn_ratios {
            if !(0.0..=1.0).contains(&t.ratio) {
                v.push(Violation::RatioOutOfRange {
                    commodity: d.commodity,
                    from: t.from.clone(),
                    to: t.to.clone(),
                });
            }
            if forbidden.contains(&(t.from.clone(), t.to.clone())) {
                v.push(Violation::RatioOnForbiddenMovement {
                    commodity: d.commodity,
                    from: t.from.clone(),
                    to: t.to.clone(),
                });
            }
            *per_link.entry(&t.from).or_default() += t.ratio;
        }
        for (link, sum) in per_link {
            if (sum - 1.0).abs() > 1e-6 {
                v.push(Violation::RatioSumNotOne {
                    commodity: d.commodity,
                    link: link.clone(),
                    sum,
                });
            }
        }
        if let Some(route) = &d.route {
            let kinds_ok = match (route.first(), route.last()) {
                (Some(first), Some(last)) => {
                    links.get(first).map(|l| l.kind) == Some(LinkKind::Entry)
                        && links.get(last).map(|l| l.kind) == Some(LinkKind::Exit)
                }
                _ => false,
            };
            if !kinds_ok {
                v.push(Violation::RouteEndpointsNotBoundary { commodity: d.commodity });
            }
            for (i, pair) in route.windows(2).enumerate() {
                if !allowed.contains(&(pair[0].clone(), pair[1].clone())) {
                    v.push(Violation::RouteNotConnected {
                        commodity: d.commodity,
                        position: i + 1,
                    });
                }
            }
            let named: BTreeSet<&LinkId> = d.entry_flows.iter().map(|e| &e.link).collect();
            if route.first().map(|f| named != BTreeSet::from([f])).unwrap_or(true) {
                v.push(Violation::RouteEntryFlowMismatch { commodity: d.commodity });
            }
        }
    }
}

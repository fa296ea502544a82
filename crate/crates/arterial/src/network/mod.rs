//! Road-network model for signalized arterials.
//!
//! A network is a directed graph of *links* (road segments) joined at *nodes*
//! (intersections).  Entry links have a virtual source instead of a tail node,
//! exit links a virtual sink instead of a head node.  A *movement* `(l, m)` is
//! a permitted turn from link `l` onto link `m` at the node they share, with a
//! saturation flow `c(l,m)` (vph discharged while the movement has green).
//! Each node runs a fixed cycle of length `T_n` with lost time `L_n`; a timing
//! plan splits the cycle into stages, each granting green `g_{n,i}(l,m)` to a
//! set of compatible movements.  The per-movement capacity is
//!
//! ```text
//! s(l,m) = (1/T_n) * sum_i g_{n,i}(l,m) * c(l,m)          (vph)
//! ```
//!
//! Demand enters on entry links per commodity, routed either by turn ratios
//! `r(l,m)` or by an explicit link route.

mod augment;
mod flows;
mod validate;

pub use augment::{ForbiddenTurnPolicy, SuperNodeAugmentation, TurnAugmentation};
pub use flows::{aggregate_commodities, resolve_commodity_flows, AggregateRouting, CommodityFlows};
pub use validate::{validate, ValidationReport, Violation};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LinkId {
    fn from(s: &str) -> Self {
        LinkId(s.to_owned())
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Entry,
    Internal,
    Exit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    /// Tail node; `None` for entry links (virtual source).
    #[serde(default)]
    pub from: Option<NodeId>,
    /// Head node; `None` for exit links (virtual sink).
    #[serde(default)]
    pub to: Option<NodeId>,
    pub kind: LinkKind,
    pub length_miles: f64,
    /// Storage capacity in vehicles; crossing into a full link is blocked.
    pub storage: u32,
    pub travel_time_s: f64,
    #[serde(default = "default_lanes")]
    pub lanes: u32,
}

fn default_lanes() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Movement {
    pub from: LinkId,
    pub to: LinkId,
    pub saturation_flow_vph: f64,
    /// `false` marks a prohibited turn (e.g. a U-turn) kept for bookkeeping.
    #[serde(default = "default_true")]
    pub allowed: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub cycle_time_s: f64,
    pub lost_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseGreen {
    pub from: LinkId,
    pub to: LinkId,
    pub green_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage {
    pub phases: Vec<PhaseGreen>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingPlan {
    pub node: NodeId,
    #[serde(default)]
    pub offset_s: f64,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryFlow {
    pub link: LinkId,
    pub flow_vph: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRatio {
    pub from: LinkId,
    pub to: LinkId,
    pub ratio: f64,
}

/// Demand for one commodity: entry inflows plus either per-link turn ratios
/// or one explicit route (an ordered entry→…→exit link path).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommodityDemand {
    pub commodity: u32,
    pub entry_flows: Vec<EntryFlow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turn_ratios: Vec<TurnRatio>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<Vec<LinkId>>,
}

impl CommodityDemand {
    pub fn ratio_map(&self) -> BTreeMap<(LinkId, LinkId), f64> {
        self.turn_ratios
            .iter()
            .map(|t| ((t.from.clone(), t.to.clone()), t.ratio))
            .collect()
    }
}

/// Raw network description as read from / written to JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NetworkData {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    pub movements: Vec<Movement>,
    #[serde(default)]
    pub timing_plans: Vec<TimingPlan>,
    #[serde(default)]
    pub demands: Vec<CommodityDemand>,
}

impl NetworkData {
    pub fn from_json_str(s: &str) -> Result<Self, NetworkError> {
        serde_json::from_str(s).map_err(|e| NetworkError::Parse(e.to_string()))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NetworkError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cannot read network file: {0}")]
    Io(String),
    #[error("cannot parse network JSON: {0}")]
    Parse(String),
    #[error("network is structurally invalid:\n{0}")]
    Invalid(ValidationReport),
    #[error("unknown link {0}")]
    UnknownLink(LinkId),
    #[error("unknown movement ({0}, {1})")]
    UnknownMovement(LinkId, LinkId),
    #[error("movement ({0}, {1}) is not allowed")]
    ForbiddenMovement(LinkId, LinkId),
    #[error("node {0} has no timing plan")]
    MissingTimingPlan(NodeId),
    #[error("link {0} has no {1} node; augment the graph first")]
    MissingEndpoint(LinkId, &'static str),
    #[error("commodity {commodity}: link {link} carries flow but its turn ratios sum to {sum}")]
    MissingRatios {
        commodity: u32,
        link: LinkId,
        sum: f64,
    },
    #[error("commodity routing is circular with no leakage (I - R^T is singular)")]
    SingularRouting,
    #[error("commodity {commodity}: route is not a connected entry-to-exit path")]
    BadRoute { commodity: u32 },
}

/// Validated road network with derived adjacency.
///
/// Construction enforces structural invariants (unique ids, resolvable
/// references, endpoint consistency); semantic checks live in [`validate`].
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    nodes: BTreeMap<NodeId, Node>,
    links: BTreeMap<LinkId, Link>,
    movements: BTreeMap<(LinkId, LinkId), Movement>,
    timing_plans: BTreeMap<NodeId, TimingPlan>,
    demands: Vec<CommodityDemand>,
    super_node: Option<NodeId>,
    /// I(n): links whose head is n, sorted by id.
    incoming: BTreeMap<NodeId, Vec<LinkId>>,
    /// O(n): links whose tail is n, sorted by id.
    outgoing: BTreeMap<NodeId, Vec<LinkId>>,
    /// Allowed out-movements per link, sorted by receiving link id.
    out_movements: BTreeMap<LinkId, Vec<LinkId>>,
    /// Allowed in-movements per link, sorted by sending link id.
    in_movements: BTreeMap<LinkId, Vec<LinkId>>,
}

impl NetworkGraph {
    pub fn new(data: NetworkData) -> Result<Self, NetworkError> {
        Self::assemble(data, None)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, NetworkError> {
        Self::new(NetworkData::from_path(path)?)
    }

    pub(crate) fn assemble(
        data: NetworkData,
        super_node: Option<NodeId>,
    ) -> Result<Self, NetworkError> {
        let report = validate::structural(&data, super_node.as_ref());
        if !report.violations.is_empty() {
            return Err(NetworkError::Invalid(report));
        }
        let mut g = NetworkGraph {
            nodes: data.nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
            links: data.links.into_iter().map(|l| (l.id.clone(), l)).collect(),
            movements: data
                .movements
                .into_iter()
                .map(|m| ((m.from.clone(), m.to.clone()), m))
                .collect(),
            timing_plans: data
                .timing_plans
                .into_iter()
                .map(|p| (p.node.clone(), p))
                .collect(),
            demands: data.demands,
            super_node,
            incoming: BTreeMap::new(),
            outgoing: BTreeMap::new(),
            out_movements: BTreeMap::new(),
            in_movements: BTreeMap::new(),
        };
        for node in g.nodes.keys() {
            g.incoming.insert(node.clone(), Vec::new());
            g.outgoing.insert(node.clone(), Vec::new());
        }
        for (id, link) in &g.links {
            if let Some(n) = &link.to {
                g.incoming.get_mut(n).unwrap().push(id.clone());
            }
            if let Some(n) = &link.from {
                g.outgoing.get_mut(n).unwrap().push(id.clone());
            }
        }
        for ((from, to), mv) in &g.movements {
            if !mv.allowed {
                continue;
            }
            g.out_movements
                .entry(from.clone())
                .or_default()
                .push(to.clone());
            g.in_movements
                .entry(to.clone())
                .or_default()
                .push(from.clone());
        }
        // BTreeMap insertion order is already sorted per key; the Vecs are
        // filled in key order, so they come out sorted too.
        Ok(g)
    }

    /// Rebuilds the raw description (used by the augmentation ops).
    pub fn to_data(&self) -> NetworkData {
        NetworkData {
            nodes: self.nodes.values().cloned().collect(),
            links: self.links.values().cloned().collect(),
            movements: self.movements.values().cloned().collect(),
            timing_plans: self.timing_plans.values().cloned().collect(),
            demands: self.demands.clone(),
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values()
    }

    pub fn movements(&self) -> impl Iterator<Item = &Movement> {
        self.movements.values()
    }

    pub fn demands(&self) -> &[CommodityDemand] {
        &self.demands
    }

    pub fn set_demands(&mut self, demands: Vec<CommodityDemand>) {
        self.demands = demands;
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn link(&self, id: &LinkId) -> Option<&Link> {
        self.links.get(id)
    }

    pub fn movement(&self, from: &LinkId, to: &LinkId) -> Option<&Movement> {
        self.movements.get(&(from.clone(), to.clone()))
    }

    pub fn timing_plan(&self, node: &NodeId) -> Option<&TimingPlan> {
        self.timing_plans.get(node)
    }

    pub fn timing_plans(&self) -> impl Iterator<Item = &TimingPlan> {
        self.timing_plans.values()
    }

    pub fn set_timing_plan(&mut self, plan: TimingPlan) {
        self.timing_plans.insert(plan.node.clone(), plan);
    }

    pub fn super_node(&self) -> Option<&NodeId> {
        self.super_node.as_ref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    /// Links entering node `n`, sorted by id.
    pub fn in_links(&self, n: &NodeId) -> &[LinkId] {
        self.incoming.get(n).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Links leaving node `n`, sorted by id.
    pub fn out_links(&self, n: &NodeId) -> &[LinkId] {
        self.outgoing.get(n).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Receiving links of the allowed movements out of `l`, sorted by id.
    pub fn out_movements(&self, l: &LinkId) -> &[LinkId] {
        self.out_movements.get(l).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Sending links of the allowed movements into `m`, sorted by id.
    pub fn in_movements(&self, m: &LinkId) -> &[LinkId] {
        self.in_movements.get(m).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Node at which movement `(from, to)` takes place.
    pub fn movement_node(&self, from: &LinkId, to: &LinkId) -> Option<&NodeId> {
        let f = self.links.get(from)?;
        let t = self.links.get(to)?;
        match (&f.to, &t.from) {
            (Some(a), Some(b)) if a == b => Some(a),
            _ => None,
        }
    }

    /// Per-movement capacity `s(l,m) = (1/T_n) Σ_i g_{n,i}(l,m) · c(l,m)`.
    ///
    /// Requires an allowed movement and a timing plan at its node.
    pub fn saturation_capacity(&self, from: &LinkId, to: &LinkId) -> Result<f64, NetworkError> {
        let mv = self
            .movements
            .get(&(from.clone(), to.clone()))
            .ok_or_else(|| NetworkError::UnknownMovement(from.clone(), to.clone()))?;
        if !mv.allowed {
            return Err(NetworkError::ForbiddenMovement(from.clone(), to.clone()));
        }
        let node_id = self
            .movement_node(from, to)
            .expect("movement endpoints share a node by construction")
            .clone();
        let node = &self.nodes[&node_id];
        let plan = self
            .timing_plans
            .get(&node_id)
            .ok_or(NetworkError::MissingTimingPlan(node_id))?;
        let green: f64 = plan
            .stages
            .iter()
            .flat_map(|s| &s.phases)
            .filter(|p| &p.from == from && &p.to == to)
            .map(|p| p.green_s)
            .sum();
        Ok(green / node.cycle_time_s * mv.saturation_flow_vph)
    }

    /// Node–link incidence matrix `A` with `A[n][l] = +1` if `l` leaves `n`
    /// and `−1` if `l` enters `n`.  Rows/columns follow sorted id order.
    ///
    /// Requires an augmented graph (every link has both endpoints), else the
    /// columns would not describe conservation.
    pub fn incidence_matrix(&self) -> Result<Incidence, NetworkError> {
        for (id, link) in &self.links {
            if link.from.is_none() {
                return Err(NetworkError::MissingEndpoint(id.clone(), "tail"));
            }
            if link.to.is_none() {
                return Err(NetworkError::MissingEndpoint(id.clone(), "head"));
            }
        }
        let nodes: Vec<NodeId> = self.nodes.keys().cloned().collect();
        let links: Vec<LinkId> = self.links.keys().cloned().collect();
        let node_idx: BTreeMap<&NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n, i)).collect();
        let mut a = DMatrix::zeros(nodes.len(), links.len());
        for (j, lid) in links.iter().enumerate() {
            let link = &self.links[lid];
            a[(node_idx[link.from.as_ref().unwrap()], j)] += 1.0;
            a[(node_idx[link.to.as_ref().unwrap()], j)] -= 1.0;
        }
        Ok(Incidence { a, nodes, links })
    }

    /// Entry links sorted by id.
    pub fn entry_links(&self) -> Vec<LinkId> {
        self.links
            .values()
            .filter(|l| l.kind == LinkKind::Entry)
            .map(|l| l.id.clone())
            .collect()
    }

    pub fn exit_links(&self) -> Vec<LinkId> {
        self.links
            .values()
            .filter(|l| l.kind == LinkKind::Exit)
            .map(|l| l.id.clone())
            .collect()
    }

    /// Nodes reachable from `start` following link directions.
    pub fn reachable_from(&self, start: &NodeId) -> BTreeSet<NodeId> {
        self.reach(start, false)
    }

    /// Nodes from which `target` is reachable.
    pub fn reaching(&self, target: &NodeId) -> BTreeSet<NodeId> {
        self.reach(target, true)
    }

    fn reach(&self, start: &NodeId, reverse: bool) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        if !self.nodes.contains_key(start) {
            return seen;
        }
        let mut stack = vec![start.clone()];
        seen.insert(start.clone());
        while let Some(n) = stack.pop() {
            let step = if reverse {
                self.in_links(&n)
            } else {
                self.out_links(&n)
            };
            for lid in step {
                let link = &self.links[lid];
                let next = if reverse { &link.from } else { &link.to };
                if let Some(next) = next {
                    if seen.insert(next.clone()) {
                        stack.push(next.clone());
                    }
                }
            }
        }
        seen
    }
}

/// Incidence matrix together with its row/column orderings.
#[derive(Debug, Clone)]
pub struct Incidence {
    pub a: DMatrix<f64>,
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkId>,
}

impl Incidence {
    pub fn link_column(&self, id: &LinkId) -> Option<usize> {
        self.links.iter().position(|l| l == id)
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn node(id: &str, cycle: f64, lost: f64) -> Node {
        Node {
            id: NodeId::from(id),
            cycle_time_s: cycle,
            lost_time_s: lost,
        }
    }

    pub fn link(id: &str, from: Option<&str>, to: Option<&str>, kind: LinkKind) -> Link {
        Link {
            id: LinkId::from(id),
            from: from.map(NodeId::from),
            to: to.map(NodeId::from),
            kind,
            length_miles: 0.25,
            storage: 50,
            travel_time_s: 30.0,
            lanes: 1,
        }
    }

    pub fn movement(from: &str, to: &str, sat: f64) -> Movement {
        Movement {
            from: LinkId::from(from),
            to: LinkId::from(to),
            saturation_flow_vph: sat,
            allowed: true,
        }
    }

    /// entry `e` → n1 → `m` → n2 → exit `x`, one movement per node.
    pub fn chain3() -> NetworkGraph {
        let data = NetworkData {
            nodes: vec![node("n1", 60.0, 0.0), node("n2", 60.0, 0.0)],
            links: vec![
                link("e", None, Some("n1"), LinkKind::Entry),
                link("m", Some("n1"), Some("n2"), LinkKind::Internal),
                link("x", Some("n2"), None, LinkKind::Exit),
            ],
            movements: vec![movement("e", "m", 1800.0), movement("m", "x", 1800.0)],
            timing_plans: vec![
                TimingPlan {
                    node: NodeId::from("n1"),
                    offset_s: 0.0,
                    stages: vec![Stage {
                        phases: vec![PhaseGreen {
                            from: LinkId::from("e"),
                            to: LinkId::from("m"),
                            green_s: 45.0,
                        }],
                    }],
                },
                TimingPlan {
                    node: NodeId::from("n2"),
                    offset_s: 0.0,
                    stages: vec![Stage {
                        phases: vec![PhaseGreen {
                            from: LinkId::from("m"),
                            to: LinkId::from("x"),
                            green_s: 54.0,
                        }],
                    }],
                },
            ],
            demands: vec![CommodityDemand {
                commodity: 0,
                entry_flows: vec![EntryFlow {
                    link: LinkId::from("e"),
                    flow_vph: 600.0,
                }],
                turn_ratios: vec![
                    TurnRatio {
                        from: LinkId::from("e"),
                        to: LinkId::from("m"),
                        ratio: 1.0,
                    },
                    TurnRatio {
                        from: LinkId::from("m"),
                        to: LinkId::from("x"),
                        ratio: 1.0,
                    },
                ],
                route: None,
            }],
        };
        NetworkGraph::new(data).unwrap()
    }

    /// The ten-link identifiability example: links a..j over nodes 1..6.
    ///
    /// Cycles (b,d,a) and (g,h,j) are undirected only; (a,f,c) and
    /// (f,c,b,d) are directed.  Measured {b,e,f,g} is a minimal set that
    /// identifies every other link.
    pub fn ten_link() -> NetworkGraph {
        let mk = |id: &str, from: Option<&str>, to: Option<&str>, kind| {
            let mut l = link(id, from, to, kind);
            l.length_miles = 0.3;
            l
        };
        let data = NetworkData {
            nodes: (1..=6).map(|i| node(&i.to_string(), 60.0, 0.0)).collect(),
            links: vec![
                mk("a", Some("1"), Some("2"), LinkKind::Internal),
                mk("b", Some("1"), Some("4"), LinkKind::Internal),
                mk("c", Some("3"), Some("1"), LinkKind::Internal),
                mk("d", Some("4"), Some("2"), LinkKind::Internal),
                mk("e", None, Some("1"), LinkKind::Entry),
                mk("f", Some("2"), Some("3"), LinkKind::Internal),
                mk("g", Some("5"), None, LinkKind::Exit),
                mk("h", Some("5"), Some("6"), LinkKind::Internal),
                mk("i", Some("4"), Some("5"), LinkKind::Internal),
                mk("j", Some("6"), None, LinkKind::Exit),
            ],
            movements: vec![
                movement("e", "a", 1800.0),
                movement("e", "b", 1800.0),
                movement("c", "a", 1800.0),
                movement("c", "b", 1800.0),
                movement("a", "f", 1800.0),
                movement("d", "f", 1800.0),
                movement("f", "c", 1800.0),
                movement("b", "d", 1800.0),
                movement("b", "i", 1800.0),
                movement("i", "g", 1800.0),
                movement("i", "h", 1800.0),
                movement("h", "j", 1800.0),
            ],
            timing_plans: vec![],
            demands: vec![],
        };
        NetworkGraph::new(data).unwrap()
    }

    /// Conserving flow on [`ten_link`], strictly positive on every link.
    pub fn ten_link_flow() -> BTreeMap<LinkId, f64> {
        [
            ("a", 100.0),
            ("b", 300.0),
            ("c", 200.0),
            ("d", 100.0),
            ("e", 200.0),
            ("f", 200.0),
            ("g", 100.0),
            ("h", 100.0),
            ("i", 200.0),
            ("j", 100.0),
        ]
        .into_iter()
        .map(|(k, v)| (LinkId::from(k), v))
        .collect()
    }
}

//! Which flows does a sensor layout pin down?
//!
//! On a strongly connected graph, an unmeasured link's flow is recoverable
//! from conservation exactly when the link lies on no undirected cycle of
//! unmeasured links: cutting it then splits the graph, and the balance of
//! measured flows across the cut yields its value.  This module classifies
//! every link (measured / identified / undetermined), imputes the
//! identified flows, proposes a minimum set of extra sensors, pushes known
//! turn ratios through the same machinery, and brackets what the
//! undetermined remainder can contribute to vehicle-miles traveled.

mod bounds;

pub use bounds::{flow_bounds, vmt_bounds, FlowBound, VmtBounds};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    ForbiddenTurnPolicy, Link, LinkId, NetworkError, NetworkGraph, NodeId,
};

/// Relative tolerance for declaring measured cutset sums consistent.
const CONSISTENCY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkStatus {
    Measured,
    Identified,
    Undetermined,
}

impl LinkStatus {
    /// Display color matching the usual map annotation.
    pub fn color(self) -> &'static str {
        match self {
            LinkStatus::Measured => "red",
            LinkStatus::Identified => "green",
            LinkStatus::Undetermined => "blue",
        }
    }
}

impl std::fmt::Display for LinkStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LinkStatus::Measured => "measured",
            LinkStatus::Identified => "identified",
            LinkStatus::Undetermined => "undetermined",
        })
    }
}

#[derive(Debug, Clone)]
pub struct IdentifiabilityReport {
    pub status: BTreeMap<LinkId, LinkStatus>,
    pub undetermined_links: BTreeSet<LinkId>,
    pub undetermined_nodes: BTreeSet<NodeId>,
    /// Σ over undetermined components of `links − (nodes − 1)`.
    pub required_additional_count: usize,
    /// Non-tree links of a breadth-first spanning tree per undetermined
    /// component; measuring exactly these makes everything identifiable.
    pub suggested_measurements: BTreeSet<LinkId>,
    /// Filled by [`flow_bounds`]; empty until then.
    pub flow_bounds: BTreeMap<LinkId, FlowBound>,
    /// Filled by [`vmt_bounds`]; `None` until then.
    pub vmt: Option<VmtBounds>,
}

impl IdentifiabilityReport {
    pub fn minimal_additional_measurements(&self) -> &BTreeSet<LinkId> {
        &self.suggested_measurements
    }

    /// `link,status,lo,hi` rows; bounds only on undetermined links, `inf`
    /// for an unbounded upper end.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("link,status,lo,hi\n");
        for (l, st) in &self.status {
            match self.flow_bounds.get(l) {
                Some(b) => {
                    let hi = b.upper.map(|u| u.to_string()).unwrap_or("inf".into());
                    let _ = writeln!(s, "{l},{st},{},{hi}", b.lower);
                }
                None => {
                    let _ = writeln!(s, "{l},{st},,");
                }
            }
        }
        s
    }

    /// JSON map link → {status, color} for painting a network drawing.
    pub fn to_annotation_json(&self) -> String {
        #[derive(Serialize)]
        struct Entry<'a> {
            status: &'a LinkStatus,
            color: &'static str,
        }
        let map: BTreeMap<&LinkId, Entry> = self
            .status
            .iter()
            .map(|(l, st)| {
                (
                    l,
                    Entry {
                        status: st,
                        color: st.color(),
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&map).expect("serializable")
    }
}

#[derive(Debug, Error)]
pub enum IdentifyError {
    #[error("link `{0}` is not in the network")]
    UnknownLink(LinkId),
    #[error("link `{0}` is missing an endpoint; boundary augmentation must run first")]
    NotAugmented(LinkId),
    #[error("graph is not strongly connected: no round trip between `{0}` and `{1}`")]
    NotStronglyConnected(NodeId, NodeId),
    #[error("measurements conflict across the cut around nodes {nodes:?}: net flow {residual:.6}")]
    InconsistentCutset { nodes: Vec<NodeId>, residual: f64 },
    #[error("turn ratios on `{link}` do not cover the movement to `{missing}`")]
    RatioCoverage { link: LinkId, missing: LinkId },
    #[error("turn ratios on `{link}` sum to {sum}, expected 1")]
    RatioSum { link: LinkId, sum: f64 },
    #[error("turn ratio ({0}, {1}) must lie in (0, 1]")]
    BadRatio(LinkId, LinkId),
    #[error("ratio ({from}, {to}) implies flow {implied:.6} but {known:.6} is already known")]
    InconsistentRatio {
        from: LinkId,
        to: LinkId,
        implied: f64,
        known: f64,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("flow bounding failed: {0}")]
    Lp(String),
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

fn endpoints(link: &Link) -> Result<(&NodeId, &NodeId), IdentifyError> {
    match (&link.from, &link.to) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(IdentifyError::NotAugmented(link.id.clone())),
    }
}

fn check_strongly_connected(g: &NetworkGraph) -> Result<BTreeMap<&NodeId, usize>, IdentifyError> {
    let index: BTreeMap<&NodeId, usize> = g
        .nodes()
        .enumerate()
        .map(|(i, n)| (&n.id, i))
        .collect();
    // Nodes the turn augmentation stranded without links have a vacuous
    // balance; connectivity matters only where flow can actually go.
    let mut touched: BTreeSet<&NodeId> = BTreeSet::new();
    for link in g.links() {
        let (a, b) = endpoints(link)?;
        touched.insert(a);
        touched.insert(b);
    }
    if let Some(&first) = touched.iter().next() {
        let fwd = g.reachable_from(first);
        let back = g.reaching(first);
        for &n in &touched {
            if !fwd.contains(n) || !back.contains(n) {
                return Err(IdentifyError::NotStronglyConnected(
                    n.clone(),
                    first.clone(),
                ));
            }
        }
    }
    Ok(index)
}

/// True when `e` lies on an undirected cycle of `unmeasured` links: with `e`
/// removed its endpoints stay connected through the rest.
fn on_unmeasured_cycle(
    g: &NetworkGraph,
    e: &Link,
    unmeasured: &BTreeSet<LinkId>,
    index: &BTreeMap<&NodeId, usize>,
) -> bool {
    let mut uf = UnionFind::new(index.len());
    for l in g.links() {
        if l.id != e.id && unmeasured.contains(&l.id) {
            let (a, b) = endpoints(l).expect("checked");
            uf.union(index[a], index[b]);
        }
    }
    let (a, b) = endpoints(e).expect("checked");
    uf.find(index[a]) == uf.find(index[b])
}

/// Classifies every link given the measured set.  Requires an augmented,
/// strongly connected graph.
///
/// One pass suffices: an identified link lies on no unmeasured cycle, so
/// treating it as measured cannot break any cycle that traps another link.
pub fn identifiable_links(
    g: &NetworkGraph,
    measured: &BTreeSet<LinkId>,
) -> Result<IdentifiabilityReport, IdentifyError> {
    for l in measured {
        if g.link(l).is_none() {
            return Err(IdentifyError::UnknownLink(l.clone()));
        }
    }
    let index = check_strongly_connected(g)?;

    let unmeasured: BTreeSet<LinkId> = g
        .links()
        .map(|l| l.id.clone())
        .filter(|id| !measured.contains(id))
        .collect();
    let mut status = BTreeMap::new();
    let mut undetermined_links = BTreeSet::new();
    for link in g.links() {
        let st = if measured.contains(&link.id) {
            LinkStatus::Measured
        } else if on_unmeasured_cycle(g, link, &unmeasured, &index) {
            undetermined_links.insert(link.id.clone());
            LinkStatus::Undetermined
        } else {
            LinkStatus::Identified
        };
        status.insert(link.id.clone(), st);
    }

    // Components of the undetermined subgraph, for the sensor count
    // l_c − (n_c − 1) and the spanning-tree suggestions.
    let mut uf = UnionFind::new(index.len());
    let mut undetermined_nodes = BTreeSet::new();
    for id in &undetermined_links {
        let (a, b) = endpoints(g.link(id).unwrap()).expect("checked");
        undetermined_nodes.insert(a.clone());
        undetermined_nodes.insert(b.clone());
        uf.union(index[a], index[b]);
    }
    let mut comp_links: BTreeMap<usize, Vec<&LinkId>> = BTreeMap::new();
    let mut comp_nodes: BTreeMap<usize, BTreeSet<&NodeId>> = BTreeMap::new();
    for id in &undetermined_links {
        let (a, b) = endpoints(g.link(id).unwrap()).expect("checked");
        let root = uf.find(index[a]);
        comp_links.entry(root).or_default().push(id);
        let nodes = comp_nodes.entry(root).or_default();
        nodes.insert(a);
        nodes.insert(b);
    }
    let mut required = 0usize;
    let mut suggested = BTreeSet::new();
    for (root, links) in &comp_links {
        let nodes = &comp_nodes[root];
        required += links.len() - (nodes.len() - 1);
        // Undirected BFS tree from the component's smallest node, links
        // taken in id order; what the tree skips must be measured.
        let mut adjacency: BTreeMap<&NodeId, Vec<(&LinkId, &NodeId)>> = BTreeMap::new();
        for &id in links {
            let (a, b) = endpoints(g.link(id).unwrap()).expect("checked");
            adjacency.entry(a).or_default().push((id, b));
            adjacency.entry(b).or_default().push((id, a));
        }
        for list in adjacency.values_mut() {
            list.sort();
        }
        let start = *nodes.iter().next().expect("component has nodes");
        let mut seen: BTreeSet<&NodeId> = BTreeSet::from([start]);
        let mut tree: BTreeSet<&LinkId> = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for &(id, other) in &adjacency[n] {
                if seen.insert(other) {
                    tree.insert(id);
                    queue.push_back(other);
                }
            }
        }
        for &id in links {
            if !tree.contains(id) {
                suggested.insert(id.clone());
            }
        }
    }
    debug_assert_eq!(suggested.len(), required);

    Ok(IdentifiabilityReport {
        status,
        undetermined_links,
        undetermined_nodes,
        required_additional_count: required,
        suggested_measurements: suggested,
        flow_bounds: BTreeMap::new(),
        vmt: None,
    })
}

/// Measured cutset sums must balance: contract every unmeasured link, then
/// the measured flows crossing each contracted group must net to zero.
fn check_consistency(
    g: &NetworkGraph,
    flows: &BTreeMap<LinkId, f64>,
    index: &BTreeMap<&NodeId, usize>,
) -> Result<(), IdentifyError> {
    let mut uf = UnionFind::new(index.len());
    for l in g.links() {
        if !flows.contains_key(&l.id) {
            let (a, b) = endpoints(l).expect("checked");
            uf.union(index[a], index[b]);
        }
    }
    let mut net: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for l in g.links() {
        if let Some(f) = flows.get(&l.id) {
            let (a, b) = endpoints(l).expect("checked");
            let (ra, rb) = (uf.find(index[a]), uf.find(index[b]));
            if ra != rb {
                let ea = net.entry(ra).or_insert((0.0, 0.0));
                ea.0 += f;
                ea.1 += f.abs();
                let eb = net.entry(rb).or_insert((0.0, 0.0));
                eb.0 -= f;
                eb.1 += f.abs();
            }
        }
    }
    for (root, (residual, scale)) in net {
        if residual.abs() > CONSISTENCY_TOL * scale.max(1.0) {
            let mut nodes = Vec::new();
            for (n, &i) in index.iter() {
                if uf.find(i) == root {
                    nodes.push((*n).clone());
                }
            }
            return Err(IdentifyError::InconsistentCutset { nodes, residual });
        }
    }
    Ok(())
}

/// Values for every identified link, from the signed sum of measured flows
/// across the cut its removal creates.
pub fn impute_flows(
    g: &NetworkGraph,
    measured_flows: &BTreeMap<LinkId, f64>,
) -> Result<BTreeMap<LinkId, f64>, IdentifyError> {
    let measured: BTreeSet<LinkId> = measured_flows.keys().cloned().collect();
    let report = identifiable_links(g, &measured)?;
    let index = check_strongly_connected(g)?;
    check_consistency(g, measured_flows, &index)?;

    // Undirected adjacency over unmeasured links, for the cut construction.
    let mut adjacency: BTreeMap<&NodeId, Vec<(&LinkId, &NodeId)>> = BTreeMap::new();
    for l in g.links() {
        if !measured.contains(&l.id) {
            let (a, b) = endpoints(l).expect("checked");
            adjacency.entry(a).or_default().push((&l.id, b));
            adjacency.entry(b).or_default().push((&l.id, a));
        }
    }

    let mut out = BTreeMap::new();
    for (id, st) in &report.status {
        if *st != LinkStatus::Identified {
            continue;
        }
        let link = g.link(id).unwrap();
        let (tail, head) = endpoints(link).expect("checked");
        // Nodes on the tail side once the link is cut: unmeasured-reachable
        // from the tail without using the link itself.
        let mut side: BTreeSet<&NodeId> = BTreeSet::from([tail]);
        let mut queue = VecDeque::from([tail]);
        while let Some(n) = queue.pop_front() {
            for &(lid, other) in adjacency.get(n).map(|v| v.as_slice()).unwrap_or(&[]) {
                if lid != id && side.insert(other) {
                    queue.push_back(other);
                }
            }
        }
        debug_assert!(!side.contains(head), "identified link must be a bridge");
        // Everything else crossing the cut is measured; flow out of the
        // side balances to zero.
        let mut sum = 0.0;
        for l in g.links() {
            if let Some(f) = measured_flows.get(&l.id) {
                let (a, b) = endpoints(l).expect("checked");
                match (side.contains(a), side.contains(b)) {
                    (true, false) => sum += f,
                    (false, true) => sum -= f,
                    _ => {}
                }
            }
        }
        out.insert(id.clone(), -sum);
    }
    Ok(out)
}

/// What pushing known turn ratios through identification recovered.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatioPropagation {
    /// Movement flows `f(l,m) = r̂(l,m)·f_l` for every ratio-covered link
    /// whose flow became known.
    pub movement_flows: BTreeMap<(LinkId, LinkId), f64>,
    /// Link flows that became known along the way (imputed or recovered
    /// through a ratio), beyond the measured inputs.
    pub link_flows: BTreeMap<LinkId, f64>,
}

/// Treats each movement with a known ratio as an explicit link, then
/// alternates imputation with the ratio relations `f(l,m) = r̂·f_l` until
/// nothing more resolves.
///
/// Ratios on a link must cover all its allowed movements, each positive,
/// summing to 1.
pub fn propagate_turn_ratios(
    g: &NetworkGraph,
    measured_flows: &BTreeMap<LinkId, f64>,
    ratios: &BTreeMap<(LinkId, LinkId), f64>,
) -> Result<RatioPropagation, IdentifyError> {
    let mut by_tail: BTreeMap<LinkId, Vec<(LinkId, f64)>> = BTreeMap::new();
    for ((l, m), r) in ratios {
        match g.movement(l, m) {
            None => return Err(NetworkError::UnknownMovement(l.clone(), m.clone()).into()),
            Some(mv) if !mv.allowed => {
                return Err(NetworkError::ForbiddenMovement(l.clone(), m.clone()).into())
            }
            Some(_) => {}
        }
        if !(*r > 0.0 && *r <= 1.0) {
            return Err(IdentifyError::BadRatio(l.clone(), m.clone()));
        }
        by_tail.entry(l.clone()).or_default().push((m.clone(), *r));
    }
    for (l, list) in &by_tail {
        for m in g.out_movements(l) {
            if !list.iter().any(|(m2, _)| m2 == m) {
                return Err(IdentifyError::RatioCoverage {
                    link: l.clone(),
                    missing: m.clone(),
                });
            }
        }
        let sum: f64 = list.iter().map(|(_, r)| r).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(IdentifyError::RatioSum {
                link: l.clone(),
                sum,
            });
        }
    }
    if by_tail.is_empty() {
        return Ok(RatioPropagation::default());
    }

    let pairs: Vec<(LinkId, LinkId)> = ratios.keys().cloned().collect();
    let aug = g.augment_turn_movements(&pairs, ForbiddenTurnPolicy::MeasuredZero)?;
    let mut known: BTreeMap<LinkId, f64> = measured_flows.clone();
    for z in &aug.zero_flow_links {
        known.insert(z.clone(), 0.0);
    }

    /// Records a value; `Err((implied, existing))` on disagreement.
    fn merge(
        known: &mut BTreeMap<LinkId, f64>,
        id: &LinkId,
        value: f64,
    ) -> Result<bool, (f64, f64)> {
        match known.get(id) {
            Some(&old) if (old - value).abs() > CONSISTENCY_TOL * old.abs().max(1.0) => {
                Err((value, old))
            }
            Some(_) => Ok(false),
            None => {
                known.insert(id.clone(), value);
                Ok(true)
            }
        }
    }

    loop {
        let mut changed = false;
        // Ratio relations, both directions: a known tail determines all its
        // movements; any known movement determines the tail.
        for (l, list) in &by_tail {
            let tail_flow = if let Some(&f) = known.get(l) {
                Some((f, None))
            } else {
                list.iter().find_map(|(m, r)| {
                    let id = &aug.movement_links[&(l.clone(), m.clone())];
                    known.get(id).map(|f| (f / r, Some(m)))
                })
            };
            let Some((fl, via)) = tail_flow else {
                continue;
            };
            let conflict = |m: &LinkId, (implied, old): (f64, f64)| {
                IdentifyError::InconsistentRatio {
                    from: l.clone(),
                    to: m.clone(),
                    implied,
                    known: old,
                }
            };
            changed |= merge(&mut known, l, fl)
                .map_err(|e| conflict(via.unwrap_or(l), e))?;
            for (m, r) in list {
                let id = aug.movement_links[&(l.clone(), m.clone())].clone();
                changed |= merge(&mut known, &id, r * fl).map_err(|e| conflict(m, e))?;
            }
        }
        // Conservation closes the rest; imputed links were unknown, so they
        // never collide with an existing value.
        let imputed = impute_flows(&aug.graph, &known)?;
        changed |= !imputed.is_empty();
        known.extend(imputed);
        if !changed {
            break;
        }
    }

    let mut result = RatioPropagation::default();
    for (key, id) in &aug.movement_links {
        if let Some(f) = known.get(id) {
            if ratios.contains_key(key) {
                result.movement_flows.insert(key.clone(), *f);
            }
        }
    }
    for (id, f) in &known {
        if g.link(id).is_some() && !measured_flows.contains_key(id) {
            result.link_flows.insert(id.clone(), *f);
        }
    }
    Ok(result)
}

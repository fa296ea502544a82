//! Interval bounds on what an incomplete sensor layout leaves open.
//!
//! Undetermined links still obey conservation and nonnegativity, which caps
//! most of them: processing the strongly connected pieces of the
//! undetermined subgraph in topological order, every link leaving a piece
//! can carry at most the flow available to that piece.  Links on a directed
//! undetermined cycle escape the argument — flow can circulate there
//! without bound.  The same constraints bracket total vehicle-miles as a
//! pair of linear programs over the unmeasured flows.

use std::collections::{BTreeMap, BTreeSet};

use crate::lpsolve::{solve_lp, LinearProgram, LpOutcome, Sense};
use crate::network::{LinkId, NetworkGraph, NodeId};

use super::{
    check_consistency, check_strongly_connected, endpoints, identifiable_links, impute_flows,
    IdentifyError, LinkStatus,
};

/// `[lower, upper]` on a link's hourly flow; `None` means unbounded above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowBound {
    pub lower: f64,
    pub upper: Option<f64>,
}

impl FlowBound {
    fn exact(value: f64) -> Self {
        FlowBound {
            lower: value,
            upper: Some(value),
        }
    }
}

/// Strongly connected components of the directed graph on `n` nodes given
/// by `edges`, as a component id per node; ids come out in topological
/// order of the condensation (sources first).
fn condensation_order(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut fwd = vec![Vec::new(); n];
    let mut rev = vec![Vec::new(); n];
    for &(a, b) in edges {
        fwd[a].push(b);
        rev[b].push(a);
    }
    // Kosaraju, both passes iterative.
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![(start, 0usize)];
        while let Some(top) = stack.last_mut() {
            let v = top.0;
            if top.1 < fwd[v].len() {
                let w = fwd[v][top.1];
                top.1 += 1;
                if !seen[w] {
                    seen[w] = true;
                    stack.push((w, 0));
                }
            } else {
                order.push(v);
                stack.pop();
            }
        }
    }
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for &start in order.iter().rev() {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = count;
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for &w in &rev[v] {
                if comp[w] == usize::MAX {
                    comp[w] = count;
                    stack.push(w);
                }
            }
        }
        count += 1;
    }
    // Reverse finish order on the reversed graph already yields the
    // condensation in topological order.
    comp
}

/// Interval per link: exact for measured and identified flows, `[0, cap]`
/// or `[0, ∞)` for the undetermined rest.
///
/// Caps come from an availability induction over the condensation of the
/// undetermined subgraph and are deliberately loose: each piece hands every
/// outgoing link the whole of its inflow bound.
pub fn flow_bounds(
    g: &NetworkGraph,
    measured_flows: &BTreeMap<LinkId, f64>,
) -> Result<BTreeMap<LinkId, FlowBound>, IdentifyError> {
    let measured: BTreeSet<LinkId> = measured_flows.keys().cloned().collect();
    let report = identifiable_links(g, &measured)?;
    let imputed = impute_flows(g, measured_flows)?;
    let exact = |id: &LinkId| measured_flows.get(id).or_else(|| imputed.get(id));

    let mut out = BTreeMap::new();
    for (id, st) in &report.status {
        if *st != LinkStatus::Undetermined {
            out.insert(id.clone(), FlowBound::exact(*exact(id).unwrap()));
        }
    }
    if report.undetermined_links.is_empty() {
        return Ok(out);
    }

    let index = check_strongly_connected(g)?;
    let directed: Vec<(usize, usize)> = report
        .undetermined_links
        .iter()
        .map(|id| {
            let (a, b) = endpoints(g.link(id).unwrap()).expect("checked");
            (index[a], index[b])
        })
        .collect();
    let comp = condensation_order(index.len(), &directed);
    let comp_of = |n: &NodeId| comp[index[n]];

    // Availability per component, filled in topological order: net exact
    // inflow magnitude plus whatever bounded undetermined links bring in.
    let num_comps = comp.iter().copied().max().unwrap_or(0) + 1;
    let mut net_exact = vec![0.0f64; num_comps];
    let mut inbound: Vec<Vec<&LinkId>> = vec![Vec::new(); num_comps];
    for l in g.links() {
        let (a, b) = endpoints(l).expect("checked");
        let (ca, cb) = (comp_of(a), comp_of(b));
        if ca == cb {
            continue;
        }
        if let Some(f) = exact(&l.id) {
            net_exact[ca] -= f;
            net_exact[cb] += f;
        } else {
            inbound[cb].push(&l.id);
        }
    }
    let mut upper: BTreeMap<&LinkId, f64> = BTreeMap::new();
    for c in 0..num_comps {
        let avail = net_exact[c].abs()
            + inbound[c]
                .iter()
                .map(|id| upper[*id])
                .sum::<f64>();
        for id in &report.undetermined_links {
            let (a, b) = endpoints(g.link(id).unwrap()).expect("checked");
            if comp_of(a) == c && comp_of(b) != c {
                upper.insert(id, avail);
            }
        }
    }
    for id in &report.undetermined_links {
        let (a, b) = endpoints(g.link(id).unwrap()).expect("checked");
        out.insert(
            id.clone(),
            FlowBound {
                lower: 0.0,
                // Same component ⇒ a directed undetermined cycle through
                // this link ⇒ no cap.
                upper: (comp_of(a) != comp_of(b)).then(|| upper[id]),
            },
        );
    }
    Ok(out)
}

/// Total vehicle-miles traveled per hour, bracketed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmtBounds {
    /// Contribution of the measured links alone.
    pub measured_term: f64,
    /// Least total consistent with the measurements (measured term
    /// included).
    pub lower: f64,
    /// Greatest such total; `None` when undetermined circulation can grow
    /// it forever.
    pub upper: Option<f64>,
}

impl VmtBounds {
    /// Midpoint estimate, when the bracket is finite.
    pub fn estimate(&self) -> Option<f64> {
        self.upper.map(|u| 0.5 * (self.lower + u))
    }

    /// Half the bracket width: the worst-case error of [`estimate`].
    ///
    /// [`estimate`]: VmtBounds::estimate
    pub fn half_width(&self) -> Option<f64> {
        self.upper.map(|u| 0.5 * (u - self.lower))
    }
}

/// Brackets Σ length·flow by minimizing and maximizing the unmeasured part
/// subject to conservation and nonnegativity.
pub fn vmt_bounds(
    g: &NetworkGraph,
    measured_flows: &BTreeMap<LinkId, f64>,
) -> Result<VmtBounds, IdentifyError> {
    for l in measured_flows.keys() {
        if g.link(l).is_none() {
            return Err(IdentifyError::UnknownLink(l.clone()));
        }
    }
    let index = check_strongly_connected(g)?;
    check_consistency(g, measured_flows, &index)?;

    let inc = g.incidence_matrix()?;
    let measured_term: f64 = measured_flows
        .iter()
        .map(|(l, f)| g.link(l).unwrap().length_miles * f)
        .sum();
    let unmeasured: Vec<&LinkId> = inc
        .links
        .iter()
        .filter(|l| !measured_flows.contains_key(l))
        .collect();
    if unmeasured.is_empty() {
        return Ok(VmtBounds {
            measured_term,
            lower: measured_term,
            upper: Some(measured_term),
        });
    }

    let lengths: Vec<f64> = unmeasured
        .iter()
        .map(|l| g.link(l).unwrap().length_miles)
        .collect();
    let mut rhs = vec![0.0; inc.a.nrows()];
    for (l, f) in measured_flows {
        let col = inc.link_column(l).unwrap();
        for (r, rv) in rhs.iter_mut().enumerate() {
            *rv -= inc.a[(r, col)] * f;
        }
    }
    let build = |sense: Sense| {
        let mut lp = LinearProgram::new(sense, lengths.clone());
        for (r, &b) in rhs.iter().enumerate() {
            let row: Vec<f64> = unmeasured
                .iter()
                .map(|l| inc.a[(r, inc.link_column(l).unwrap())])
                .collect();
            lp.eq.push((row, b));
        }
        lp
    };
    let run = |sense: Sense| -> Result<LpOutcome, IdentifyError> {
        solve_lp(&build(sense)).map_err(|e| IdentifyError::Lp(e.to_string()))
    };

    let lower = match run(Sense::Minimize)? {
        LpOutcome::Optimal { value, .. } => measured_term + value,
        LpOutcome::Infeasible { violation } => {
            return Err(IdentifyError::Lp(format!(
                "measurements admit no nonnegative completion (violation {violation:.6})"
            )))
        }
        LpOutcome::Unbounded { .. } => {
            return Err(IdentifyError::Lp(
                "minimum of a nonnegative objective came back unbounded".into(),
            ))
        }
    };
    let upper = match run(Sense::Maximize)? {
        LpOutcome::Optimal { value, .. } => Some(measured_term + value),
        LpOutcome::Unbounded { .. } => None,
        LpOutcome::Infeasible { violation } => {
            return Err(IdentifyError::Lp(format!(
                "measurements admit no nonnegative completion (violation {violation:.6})"
            )))
        }
    };
    Ok(VmtBounds {
        measured_term,
        lower,
        upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::testutil::{ten_link, ten_link_flow, link, movement, node};
    use crate::network::{LinkKind, NetworkData};
    use approx::assert_relative_eq;

    fn lid(s: &str) -> LinkId {
        LinkId::from(s)
    }

    /// Entry → X → two parallel unmeasured links of different length → Y →
    /// exit; the parallel pair is an undirected cycle.
    fn parallel_pair() -> NetworkGraph {
        let mut links = vec![
            link("in", None, Some("x"), LinkKind::Entry),
            link("u1", Some("x"), Some("y"), LinkKind::Internal),
            link("u2", Some("x"), Some("y"), LinkKind::Internal),
            link("out", Some("y"), None, LinkKind::Exit),
        ];
        links[0].length_miles = 0.1;
        links[1].length_miles = 2.0;
        links[2].length_miles = 3.0;
        links[3].length_miles = 0.1;
        let data = NetworkData {
            nodes: vec![node("x", 60.0, 0.0), node("y", 60.0, 0.0)],
            links,
            movements: vec![
                movement("in", "u1", 1800.0),
                movement("in", "u2", 1800.0),
                movement("u1", "out", 1800.0),
                movement("u2", "out", 1800.0),
            ],
            timing_plans: vec![],
            demands: vec![],
        };
        NetworkGraph::new(data)
            .unwrap()
            .augment_with_super_node()
            .graph
    }

    #[test]
    fn parallel_pair_is_capped_by_its_feed() {
        let g = parallel_pair();
        let flows = BTreeMap::from([(lid("in"), 100.0), (lid("out"), 100.0)]);
        let bounds = flow_bounds(&g, &flows).unwrap();
        assert_eq!(bounds[&lid("in")], FlowBound::exact(100.0));
        for l in ["u1", "u2"] {
            let b = bounds[&lid(l)];
            assert_eq!(b.lower, 0.0);
            assert_eq!(b.upper, Some(100.0), "{l}");
        }
    }

    #[test]
    fn directed_cycle_has_no_cap() {
        let g = ten_link().augment_with_super_node().graph;
        let truth = ten_link_flow();
        let flows: BTreeMap<LinkId, f64> = ["b", "e", "g"]
            .iter()
            .map(|l| (lid(l), truth[&lid(l)]))
            .collect();
        let bounds = flow_bounds(&g, &flows).unwrap();
        // a→f→c loops back to a's tail: circulation is invisible.
        for l in ["a", "c", "f"] {
            let b = bounds[&lid(l)];
            assert_eq!(b.lower, 0.0);
            assert_eq!(b.upper, None, "{l}");
        }
        for l in ["d", "h", "i", "j"] {
            assert_eq!(bounds[&lid(l)], FlowBound::exact(truth[&lid(l)]), "{l}");
        }
    }

    #[test]
    fn availability_compounds_down_a_chain_of_pieces() {
        // Two parallel pairs in series: the second pair's cap is the sum of
        // the first pair's caps — valid, and deliberately loose.
        let mut links = vec![
            link("in", None, Some("x"), LinkKind::Entry),
            link("u1", Some("x"), Some("y"), LinkKind::Internal),
            link("u2", Some("x"), Some("y"), LinkKind::Internal),
            link("u3", Some("y"), Some("z"), LinkKind::Internal),
            link("u4", Some("y"), Some("z"), LinkKind::Internal),
            link("out", Some("z"), None, LinkKind::Exit),
        ];
        for l in &mut links {
            l.length_miles = 1.0;
        }
        let data = NetworkData {
            nodes: vec![node("x", 60.0, 0.0), node("y", 60.0, 0.0), node("z", 60.0, 0.0)],
            links,
            movements: vec![
                movement("in", "u1", 1800.0),
                movement("in", "u2", 1800.0),
                movement("u1", "u3", 1800.0),
                movement("u1", "u4", 1800.0),
                movement("u2", "u3", 1800.0),
                movement("u2", "u4", 1800.0),
                movement("u3", "out", 1800.0),
                movement("u4", "out", 1800.0),
            ],
            timing_plans: vec![],
            demands: vec![],
        };
        let g = NetworkGraph::new(data)
            .unwrap()
            .augment_with_super_node()
            .graph;
        let flows = BTreeMap::from([(lid("in"), 100.0), (lid("out"), 100.0)]);
        let bounds = flow_bounds(&g, &flows).unwrap();
        assert_eq!(bounds[&lid("u1")].upper, Some(100.0));
        assert_eq!(bounds[&lid("u2")].upper, Some(100.0));
        assert_eq!(bounds[&lid("u3")].upper, Some(200.0));
        assert_eq!(bounds[&lid("u4")].upper, Some(200.0));
    }

    #[test]
    fn vmt_bracket_width_is_length_spread_times_shiftable_flow() {
        let g = parallel_pair();
        let flows = BTreeMap::from([(lid("in"), 100.0), (lid("out"), 100.0)]);
        let vmt = vmt_bounds(&g, &flows).unwrap();
        assert_relative_eq!(vmt.measured_term, 20.0, epsilon = 1e-9);
        // All 100 on the short link vs all on the long one.
        assert_relative_eq!(vmt.lower, 220.0, epsilon = 1e-9);
        assert_relative_eq!(vmt.upper.unwrap(), 320.0, epsilon = 1e-9);
        assert_relative_eq!(vmt.estimate().unwrap(), 270.0, epsilon = 1e-9);
        assert_relative_eq!(vmt.half_width().unwrap(), 50.0, epsilon = 1e-9);
    }

    #[test]
    fn fully_identified_network_has_a_zero_width_bracket() {
        let g = ten_link().augment_with_super_node().graph;
        let truth = ten_link_flow();
        let flows: BTreeMap<LinkId, f64> = ["b", "e", "f", "g"]
            .iter()
            .map(|l| (lid(l), truth[&lid(l)]))
            .collect();
        let vmt = vmt_bounds(&g, &flows).unwrap();
        let total: f64 = truth
            .iter()
            .map(|(l, f)| g.link(l).unwrap().length_miles * f)
            .sum();
        assert_relative_eq!(vmt.lower, total, epsilon = 1e-9);
        assert_relative_eq!(vmt.upper.unwrap(), total, epsilon = 1e-9);
        assert_relative_eq!(vmt.half_width().unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn free_directed_cycle_makes_the_upper_end_open() {
        let g = ten_link().augment_with_super_node().graph;
        let truth = ten_link_flow();
        let flows: BTreeMap<LinkId, f64> = ["b", "e", "g"]
            .iter()
            .map(|l| (lid(l), truth[&lid(l)]))
            .collect();
        let vmt = vmt_bounds(&g, &flows).unwrap();
        assert!(vmt.upper.is_none());
        assert!(vmt.lower.is_finite());
        assert!(vmt.lower >= vmt.measured_term - 1e-9);
        assert!(vmt.estimate().is_none());
    }

    #[test]
    fn conflicting_measurements_fail_before_any_lp_runs() {
        let g = crate::network::testutil::chain3()
            .augment_with_super_node()
            .graph;
        let flows = BTreeMap::from([(lid("e"), 500.0), (lid("m"), 400.0)]);
        assert!(matches!(
            vmt_bounds(&g, &flows),
            Err(IdentifyError::InconsistentCutset { .. })
        ));
    }

    #[test]
    fn report_csv_shows_bounds_once_computed() {
        let g = ten_link().augment_with_super_node().graph;
        let truth = ten_link_flow();
        let flows: BTreeMap<LinkId, f64> = ["b", "e", "g"]
            .iter()
            .map(|l| (lid(l), truth[&lid(l)]))
            .collect();
        let mut report =
            identifiable_links(&g, &flows.keys().cloned().collect()).unwrap();
        report.flow_bounds = flow_bounds(&g, &flows).unwrap();
        report.vmt = Some(vmt_bounds(&g, &flows).unwrap());
        let csv = report.to_csv_string();
        assert!(csv.lines().any(|l| l == "a,undetermined,0,inf"));
        assert!(csv.lines().any(|l| l == "b,measured,300,300"));
        assert!(csv.lines().any(|l| l == "d,identified,100,100"));
    }
}

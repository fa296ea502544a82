//! Graph surgeries that turn boundary flows and turn movements into ordinary
//! link flows, so conservation (`Af = 0`) covers them.

use super::*;

/// What to do with forbidden turns of an exploded link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForbiddenTurnPolicy {
    /// Keep them as explicit links whose flow is known to be zero.
    MeasuredZero,
    /// Remove them outright.
    Delete,
}

/// Result of tying all entry and exit links to one virtual node.
#[derive(Debug, Clone)]
pub struct SuperNodeAugmentation {
    pub graph: NetworkGraph,
    pub super_node: NodeId,
    /// Links lying on no entry→exit path; a nonempty list means the augmented
    /// graph cannot be strongly connected.
    pub off_path_links: Vec<LinkId>,
    pub is_strongly_connected: bool,
    /// True when the network had no entry or exit links at all.
    pub super_node_isolated: bool,
}

/// Result of making turn movements explicit links.
#[derive(Debug, Clone)]
pub struct TurnAugmentation {
    pub graph: NetworkGraph,
    /// Movement `(l, m)` → id of the link that now carries `f(l,m)`.
    pub movement_links: BTreeMap<(LinkId, LinkId), LinkId>,
    /// Movement links for forbidden turns; their flow is known to be zero.
    pub zero_flow_links: Vec<LinkId>,
    /// New node closing `f_l = Σ_m f(l,m)` at the tail side of each exploded
    /// link.
    pub split_tail_nodes: BTreeMap<LinkId, NodeId>,
    /// New node closing `f_m = Σ_l f(l,m)` for links all of whose inflow
    /// became explicit.
    pub head_nodes: BTreeMap<LinkId, NodeId>,
}

impl NetworkGraph {
    /// Adds a virtual node that every entry link starts at and every exit
    /// link ends at.  Afterwards each link has both endpoints, total inflow
    /// meets total outflow, and the graph is strongly connected exactly when
    /// every link lies on some entry→exit path (failures are reported, not
    /// fatal).
    pub fn augment_with_super_node(&self) -> SuperNodeAugmentation {
        let taken: BTreeSet<NodeId> = self.nodes.keys().cloned().collect();
        let super_id = fresh_node_id("0".to_owned(), &taken);
        let mut data = self.to_data();
        // Timing at the virtual node is never consulted.
        data.nodes.push(Node {
            id: super_id.clone(),
            cycle_time_s: 60.0,
            lost_time_s: 0.0,
        });
        let mut touched = false;
        for l in &mut data.links {
            match l.kind {
                LinkKind::Entry if l.from.is_none() => {
                    l.from = Some(super_id.clone());
                    touched = true;
                }
                LinkKind::Exit if l.to.is_none() => {
                    l.to = Some(super_id.clone());
                    touched = true;
                }
                _ => {}
            }
        }
        let graph = NetworkGraph::assemble(data, Some(super_id.clone()))
            .expect("augmenting a valid graph preserves validity");
        let forward = graph.reachable_from(&super_id);
        let backward = graph.reaching(&super_id);
        let off_path_links = graph
            .links
            .values()
            .filter(|l| {
                let tail = l.from.as_ref().unwrap();
                let head = l.to.as_ref().unwrap();
                !(forward.contains(tail) && backward.contains(head))
            })
            .map(|l| l.id.clone())
            .collect();
        let everything: BTreeSet<NodeId> = graph.nodes.keys().cloned().collect();
        let is_strongly_connected = forward == everything && backward == everything;
        SuperNodeAugmentation {
            graph,
            super_node: super_id,
            off_path_links,
            is_strongly_connected,
            super_node_isolated: !touched,
        }
    }

    /// Makes turn movements explicit links.
    ///
    /// Every link `l` named on the sending side of `requested` is *exploded*:
    /// it is cut just before its head node, and each of its movements `(l,m)`
    /// becomes a zero-length link from the cut, so `f_l = Σ_m f(l,m)` turns
    /// into plain conservation.  When all inflow of some receiving link `m`
    /// becomes explicit this way, `m` is likewise cut at its tail so
    /// `f_m = Σ_l f(l,m)` holds as conservation too; otherwise the movement
    /// links merge back at the original node.
    ///
    /// Forbidden turns of an exploded link follow `policy`; forbidden turns
    /// into a fully-covered receiving link carry no flow and are dropped.
    /// Timing-plan phases of exploded movements are dropped (the result is a
    /// flow-analysis graph, not a simulatable one); turn ratios and routes
    /// are rewritten to pass through the new links.
    pub fn augment_turn_movements(
        &self,
        requested: &[(LinkId, LinkId)],
        policy: ForbiddenTurnPolicy,
    ) -> Result<TurnAugmentation, NetworkError> {
        for (from, to) in requested {
            if !self.movements.contains_key(&(from.clone(), to.clone())) {
                return Err(NetworkError::UnknownMovement(from.clone(), to.clone()));
            }
        }
        let exploded: BTreeSet<LinkId> = requested.iter().map(|(f, _)| f.clone()).collect();
        if exploded.is_empty() {
            return Ok(TurnAugmentation {
                graph: self.clone(),
                movement_links: BTreeMap::new(),
                zero_flow_links: Vec::new(),
                split_tail_nodes: BTreeMap::new(),
                head_nodes: BTreeMap::new(),
            });
        }

        let mut receives: BTreeSet<LinkId> = BTreeSet::new();
        for ((from, to), mv) in &self.movements {
            if exploded.contains(from)
                && (mv.allowed || policy == ForbiddenTurnPolicy::MeasuredZero)
            {
                receives.insert(to.clone());
            }
        }
        let covered: BTreeSet<LinkId> = receives
            .into_iter()
            .filter(|m| self.in_movements(m).iter().all(|k| exploded.contains(k)))
            .collect();

        let mut taken_nodes: BTreeSet<NodeId> = self.nodes.keys().cloned().collect();
        let mut taken_links: BTreeSet<LinkId> = self.links.keys().cloned().collect();
        let mut data = self.to_data();
        let mut split_tail_nodes = BTreeMap::new();
        let mut head_nodes = BTreeMap::new();

        let dummy_node = |id: NodeId, like: &NodeId, data: &mut NetworkData| {
            let template = &self.nodes[like];
            data.nodes.push(Node {
                id,
                cycle_time_s: template.cycle_time_s,
                lost_time_s: template.lost_time_s,
            });
        };
        for l in &exploded {
            let at = self.links[l].to.clone().expect("exploded link has out-movements");
            let id = fresh_node_id(format!("{l}__tail"), &taken_nodes);
            taken_nodes.insert(id.clone());
            dummy_node(id.clone(), &at, &mut data);
            split_tail_nodes.insert(l.clone(), id);
        }
        for m in &covered {
            let at = self.links[m].from.clone().expect("covered link has in-movements");
            let id = fresh_node_id(format!("{m}__head"), &taken_nodes);
            taken_nodes.insert(id.clone());
            dummy_node(id.clone(), &at, &mut data);
            head_nodes.insert(m.clone(), id);
        }
        for link in &mut data.links {
            if let Some(t) = split_tail_nodes.get(&link.id) {
                link.to = Some(t.clone());
            }
            if let Some(h) = head_nodes.get(&link.id) {
                link.from = Some(h.clone());
            }
        }

        let mut movement_links = BTreeMap::new();
        let mut zero_flow_links = Vec::new();
        let originals = std::mem::take(&mut data.movements);
        for mv in originals {
            if !exploded.contains(&mv.from) {
                if !mv.allowed && covered.contains(&mv.to) {
                    continue; // carries no flow and its endpoint moved away
                }
                data.movements.push(mv);
                continue;
            }
            if !mv.allowed && policy == ForbiddenTurnPolicy::Delete {
                continue;
            }
            let tail = split_tail_nodes[&mv.from].clone();
            let head = head_nodes
                .get(&mv.to)
                .cloned()
                .unwrap_or_else(|| self.links[&mv.to].from.clone().unwrap());
            let id = fresh_link_id(format!("{}->{}", mv.from, mv.to), &taken_links);
            taken_links.insert(id.clone());
            data.links.push(Link {
                id: id.clone(),
                from: Some(tail),
                to: Some(head),
                kind: LinkKind::Internal,
                length_miles: 0.0,
                storage: 1,
                travel_time_s: 0.0,
                lanes: 1,
            });
            data.movements.push(Movement {
                from: mv.from.clone(),
                to: id.clone(),
                saturation_flow_vph: mv.saturation_flow_vph,
                allowed: true,
            });
            data.movements.push(Movement {
                from: id.clone(),
                to: mv.to.clone(),
                saturation_flow_vph: mv.saturation_flow_vph,
                allowed: true,
            });
            if !mv.allowed {
                zero_flow_links.push(id.clone());
            }
            movement_links.insert((mv.from, mv.to), id);
        }

        for plan in &mut data.timing_plans {
            for stage in &mut plan.stages {
                stage.phases.retain(|p| !exploded.contains(&p.from));
            }
        }
        for demand in &mut data.demands {
            let mut pass_through = Vec::new();
            for t in &mut demand.turn_ratios {
                if let Some(link) = movement_links.get(&(t.from.clone(), t.to.clone())) {
                    pass_through.push(TurnRatio {
                        from: link.clone(),
                        to: t.to.clone(),
                        ratio: 1.0,
                    });
                    t.to = link.clone();
                }
            }
            demand.turn_ratios.extend(pass_through);
            if let Some(route) = &mut demand.route {
                let mut walked = Vec::with_capacity(route.len() * 2);
                for (i, l) in route.iter().enumerate() {
                    walked.push(l.clone());
                    if let Some(next) = route.get(i + 1) {
                        if let Some(link) = movement_links.get(&(l.clone(), next.clone())) {
                            walked.push(link.clone());
                        }
                    }
                }
                *route = walked;
            }
        }

        let graph = NetworkGraph::assemble(data, self.super_node.clone())
            .expect("splitting movements preserves structural validity");
        Ok(TurnAugmentation {
            graph,
            movement_links,
            zero_flow_links,
            split_tail_nodes,
            head_nodes,
        })
    }
}

fn fresh_node_id(base: String, taken: &BTreeSet<NodeId>) -> NodeId {
    let mut id = NodeId(base);
    while taken.contains(&id) {
        id.0.push('_');
    }
    id
}

fn fresh_link_id(base: String, taken: &BTreeSet<LinkId>) -> LinkId {
    let mut id = LinkId(base);
    while taken.contains(&id) {
        id.0.push('_');
    }
    id
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn chain_super_node_forms_one_cycle() {
        let aug = chain3().augment_with_super_node();
        assert_eq!(aug.super_node, NodeId::from("0"));
        assert!(aug.is_strongly_connected);
        assert!(aug.off_path_links.is_empty());
        assert!(!aug.super_node_isolated);
        let g = &aug.graph;
        assert_eq!(g.link(&LinkId::from("e")).unwrap().from, Some(NodeId::from("0")));
        assert_eq!(g.link(&LinkId::from("x")).unwrap().to, Some(NodeId::from("0")));
        assert_eq!(g.num_nodes(), 3);
    }

    #[test]
    fn ten_link_example_becomes_strongly_connected() {
        let aug = ten_link().augment_with_super_node();
        assert!(aug.is_strongly_connected, "off-path: {:?}", aug.off_path_links);
        let inc = aug.graph.incidence_matrix().unwrap();
        assert_eq!((inc.a.nrows(), inc.a.ncols()), (7, 10));
        // One redundant conservation row per connected component.
        assert_eq!(inc.a.rank(1e-9), 6);
    }

    #[test]
    fn link_off_every_entry_exit_path_is_reported() {
        let mut data = ten_link().to_data();
        data.nodes.push(node("7", 60.0, 0.0));
        data.links
            .push(link("k", Some("4"), Some("7"), LinkKind::Internal));
        let aug = NetworkGraph::new(data).unwrap().augment_with_super_node();
        assert_eq!(aug.off_path_links, vec![LinkId::from("k")]);
        assert!(!aug.is_strongly_connected);
    }

    #[test]
    fn closed_network_leaves_super_node_isolated() {
        let data = NetworkData {
            nodes: vec![node("p", 60.0, 0.0), node("q", 60.0, 0.0)],
            links: vec![
                link("u", Some("p"), Some("q"), LinkKind::Internal),
                link("v", Some("q"), Some("p"), LinkKind::Internal),
            ],
            movements: vec![movement("u", "v", 1800.0), movement("v", "u", 1800.0)],
            timing_plans: vec![],
            demands: vec![],
        };
        let aug = NetworkGraph::new(data).unwrap().augment_with_super_node();
        assert!(aug.super_node_isolated);
        assert!(!aug.is_strongly_connected);
        assert_eq!(aug.graph.num_links(), 2);
    }

    #[test]
    fn super_node_id_dodges_collisions() {
        let mut data = chain3().to_data();
        data.nodes.push(node("0", 60.0, 0.0));
        let aug = NetworkGraph::new(data).unwrap().augment_with_super_node();
        assert_eq!(aug.super_node, NodeId::from("0_"));
    }

    /// Four-leg intersection: exploding all four movements of one approach
    /// adds exactly four links and one cut node.
    #[test]
    fn four_way_explosion_adds_four_links() {
        let mut links = vec![];
        let mut movements = vec![];
        for inl in ["a", "b", "c", "d"] {
            links.push(link(inl, None, Some("n"), LinkKind::Entry));
        }
        for outl in ["e", "f", "g", "h"] {
            links.push(link(outl, Some("n"), None, LinkKind::Exit));
            movements.push(movement("a", outl, 1800.0));
        }
        movements.push(movement("b", "e", 1800.0));
        let g = NetworkGraph::new(NetworkData {
            nodes: vec![node("n", 60.0, 0.0)],
            links,
            movements,
            timing_plans: vec![],
            demands: vec![],
        })
        .unwrap();
        let requested: Vec<(LinkId, LinkId)> = ["e", "f", "g", "h"]
            .iter()
            .map(|m| (LinkId::from("a"), LinkId::from(*m)))
            .collect();
        let aug = g
            .augment_turn_movements(&requested, ForbiddenTurnPolicy::MeasuredZero)
            .unwrap();
        assert_eq!(aug.movement_links.len(), 4);
        assert_eq!(aug.graph.num_links(), 12);
        assert_eq!(
            aug.split_tail_nodes.get(&LinkId::from("a")),
            Some(&NodeId::from("a__tail"))
        );
        // e still takes unexploded inflow from b, so it keeps its tail at n;
        // f, g, h receive only from a and get cut tails of their own.
        assert!(!aug.head_nodes.contains_key(&LinkId::from("e")));
        let keys: Vec<&LinkId> = aug.head_nodes.keys().collect();
        assert_eq!(keys, [&LinkId::from("f"), &LinkId::from("g"), &LinkId::from("h")]);
        let ae = aug.graph.link(&LinkId::from("a->e")).unwrap();
        assert_eq!(ae.to, Some(NodeId::from("n")));
        assert!(aug.graph.movement(&LinkId::from("a"), &LinkId::from("e")).is_none());
        assert!(aug
            .graph
            .movement(&LinkId::from("a"), &LinkId::from("a->e"))
            .is_some());
    }

    #[test]
    fn empty_request_changes_nothing() {
        let g = ten_link();
        let aug = g
            .augment_turn_movements(&[], ForbiddenTurnPolicy::Delete)
            .unwrap();
        assert!(aug.movement_links.is_empty());
        assert_eq!(aug.graph.num_links(), g.num_links());
    }

    #[test]
    fn unknown_movement_is_an_error() {
        let g = chain3();
        let err = g
            .augment_turn_movements(
                &[(LinkId::from("e"), LinkId::from("x"))],
                ForbiddenTurnPolicy::Delete,
            )
            .unwrap_err();
        assert!(matches!(err, NetworkError::UnknownMovement(..)));
    }

    fn with_forbidden_uturn() -> NetworkGraph {
        let data = NetworkData {
            nodes: vec![node("n", 60.0, 0.0)],
            links: vec![
                link("a", None, Some("n"), LinkKind::Entry),
                link("e", Some("n"), None, LinkKind::Exit),
                link("r", Some("n"), None, LinkKind::Exit),
            ],
            movements: vec![
                movement("a", "e", 1800.0),
                Movement {
                    from: LinkId::from("a"),
                    to: LinkId::from("r"),
                    saturation_flow_vph: 1800.0,
                    allowed: false,
                },
            ],
            timing_plans: vec![],
            demands: vec![],
        };
        NetworkGraph::new(data).unwrap()
    }

    #[test]
    fn forbidden_turn_becomes_measured_zero_link() {
        let g = with_forbidden_uturn();
        let req = [(LinkId::from("a"), LinkId::from("e"))];
        let aug = g
            .augment_turn_movements(&req, ForbiddenTurnPolicy::MeasuredZero)
            .unwrap();
        assert_eq!(aug.zero_flow_links, vec![LinkId::from("a->r")]);
        assert!(aug.graph.link(&LinkId::from("a->r")).is_some());
    }

    #[test]
    fn forbidden_turn_can_be_deleted() {
        let g = with_forbidden_uturn();
        let req = [(LinkId::from("a"), LinkId::from("e"))];
        let aug = g
            .augment_turn_movements(&req, ForbiddenTurnPolicy::Delete)
            .unwrap();
        assert!(aug.zero_flow_links.is_empty());
        assert!(aug.graph.link(&LinkId::from("a->r")).is_none());
        assert!(!aug
            .movement_links
            .contains_key(&(LinkId::from("a"), LinkId::from("r"))));
    }

    /// When every movement into a link is explicit, the link is cut at its
    /// tail and f_m = Σ_l f(l,m) becomes node conservation there.
    #[test]
    fn fully_covered_link_conserves_through_head_node() {
        let data = NetworkData {
            nodes: vec![node("n", 60.0, 0.0), node("n2", 60.0, 0.0)],
            links: vec![
                link("a", None, Some("n"), LinkKind::Entry),
                link("b", None, Some("n"), LinkKind::Entry),
                link("m", Some("n"), Some("n2"), LinkKind::Internal),
                link("x", Some("n2"), None, LinkKind::Exit),
            ],
            movements: vec![
                movement("a", "m", 1800.0),
                movement("b", "m", 1800.0),
                movement("m", "x", 1800.0),
            ],
            timing_plans: vec![],
            demands: vec![],
        };
        let g = NetworkGraph::new(data).unwrap();
        let req = [
            (LinkId::from("a"), LinkId::from("m")),
            (LinkId::from("b"), LinkId::from("m")),
        ];
        let aug = g
            .augment_turn_movements(&req, ForbiddenTurnPolicy::Delete)
            .unwrap();
        assert_eq!(
            aug.head_nodes.get(&LinkId::from("m")),
            Some(&NodeId::from("m__head"))
        );
        let full = aug.graph.augment_with_super_node().graph;
        let inc = full.incidence_matrix().unwrap();
        let flow: BTreeMap<LinkId, f64> = [
            ("a", 100.0),
            ("b", 200.0),
            ("a->m", 100.0),
            ("b->m", 200.0),
            ("m", 300.0),
            ("x", 300.0),
        ]
        .into_iter()
        .map(|(k, v)| (LinkId::from(k), v))
        .collect();
        let f = nalgebra::DVector::from_iterator(
            inc.links.len(),
            inc.links.iter().map(|l| flow[l]),
        );
        assert!((inc.a.clone() * f).amax() < 1e-12);
    }

    #[test]
    fn ratios_and_routes_are_rewritten_through_new_links() {
        let g = chain3();
        let req = [(LinkId::from("e"), LinkId::from("m"))];
        let aug = g
            .augment_turn_movements(&req, ForbiddenTurnPolicy::Delete)
            .unwrap();
        let demand = &aug.graph.demands()[0];
        let ratios = demand.ratio_map();
        assert_eq!(ratios[&(LinkId::from("e"), LinkId::from("e->m"))], 1.0);
        assert_eq!(ratios[&(LinkId::from("e->m"), LinkId::from("m"))], 1.0);
    }
}

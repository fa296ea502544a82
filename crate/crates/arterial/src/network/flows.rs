//! Steady-state flow propagation for commodity demands.
//!
//! A commodity routed by turn ratios satisfies `f_m = d_m + Σ_l r(l,m) f_l`,
//! i.e. `(I − Rᵀ) f = d`; a route-following commodity carries its entry flow
//! along every link of the route.  Several commodities aggregate into a
//! single-commodity routing with `r(l,m) = Σ_p f^p(l,m) / Σ_p f^p_l`.

use super::*;
use nalgebra::{DMatrix, DVector};

const FLOW_EPS: f64 = 1e-9;

/// Steady-state link and movement flows of one commodity.
#[derive(Debug, Clone)]
pub struct CommodityFlows {
    pub commodity: u32,
    /// `f^p_l` for every link (zero off the commodity's support).
    pub link_flows: BTreeMap<LinkId, f64>,
    /// `f^p(l,m)` for every allowed movement.
    pub movement_flows: BTreeMap<(LinkId, LinkId), f64>,
}

/// Single-commodity equivalent of a multi-commodity demand.
#[derive(Debug, Clone)]
pub struct AggregateRouting {
    /// Flow-weighted mean of the per-commodity ratios.
    pub turn_ratios: BTreeMap<(LinkId, LinkId), f64>,
    pub link_flows: BTreeMap<LinkId, f64>,
    pub movement_flows: BTreeMap<(LinkId, LinkId), f64>,
    /// Links with movements but no flow: their aggregate ratios default to 0
    /// and are not meaningful.
    pub zero_flow_links: Vec<LinkId>,
}

pub fn resolve_commodity_flows(
    g: &NetworkGraph,
    demand: &CommodityDemand,
) -> Result<CommodityFlows, NetworkError> {
    match &demand.route {
        Some(route) => resolve_route(g, demand, route),
        None => resolve_ratios(g, demand),
    }
}

fn resolve_ratios(
    g: &NetworkGraph,
    demand: &CommodityDemand,
) -> Result<CommodityFlows, NetworkError> {
    let links: Vec<LinkId> = g.links().map(|l| l.id.clone()).collect();
    let idx: BTreeMap<&LinkId, usize> = links.iter().enumerate().map(|(i, l)| (l, i)).collect();
    let ratios = demand.ratio_map();

    let mut system = DMatrix::<f64>::identity(links.len(), links.len());
    for ((from, to), r) in &ratios {
        let allowed = g.movement(from, to).map(|m| m.allowed).unwrap_or(false);
        if allowed {
            system[(idx[to], idx[from])] -= r;
        }
    }
    let mut d = DVector::zeros(links.len());
    for ef in &demand.entry_flows {
        if let Some(&j) = idx.get(&ef.link) {
            d[j] += ef.flow_vph;
        }
    }
    let f = system
        .lu()
        .solve(&d)
        .ok_or(NetworkError::SingularRouting)?;

    // Flow must not leak: wherever the commodity is present, its ratios have
    // to cover the link's movements.
    for (j, l) in links.iter().enumerate() {
        if g.link(l).unwrap().kind == LinkKind::Exit || f[j].abs() <= FLOW_EPS {
            continue;
        }
        let sum: f64 = g
            .out_movements(l)
            .iter()
            .map(|m| ratios.get(&(l.clone(), m.clone())).copied().unwrap_or(0.0))
            .sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(NetworkError::MissingRatios {
                commodity: demand.commodity,
                link: l.clone(),
                sum,
            });
        }
    }

    let mut movement_flows = BTreeMap::new();
    for mv in g.movements().filter(|m| m.allowed) {
        let key = (mv.from.clone(), mv.to.clone());
        let r = ratios.get(&key).copied().unwrap_or(0.0);
        movement_flows.insert(key, r * f[idx[&mv.from]]);
    }
    Ok(CommodityFlows {
        commodity: demand.commodity,
        link_flows: links.iter().cloned().zip(f.iter().copied()).collect(),
        movement_flows,
    })
}

fn resolve_route(
    g: &NetworkGraph,
    demand: &CommodityDemand,
    route: &[LinkId],
) -> Result<CommodityFlows, NetworkError> {
    if route.is_empty() {
        return Err(NetworkError::BadRoute {
            commodity: demand.commodity,
        });
    }
    let mut seen = BTreeSet::new();
    for l in route {
        if g.link(l).is_none() {
            return Err(NetworkError::UnknownLink(l.clone()));
        }
        if !seen.insert(l.clone()) {
            return Err(NetworkError::BadRoute {
                commodity: demand.commodity,
            });
        }
    }
    for pair in route.windows(2) {
        let ok = g
            .movement(&pair[0], &pair[1])
            .map(|m| m.allowed)
            .unwrap_or(false);
        if !ok {
            return Err(NetworkError::BadRoute {
                commodity: demand.commodity,
            });
        }
    }
    let total: f64 = demand.entry_flows.iter().map(|e| e.flow_vph).sum();
    let mut link_flows: BTreeMap<LinkId, f64> =
        g.links().map(|l| (l.id.clone(), 0.0)).collect();
    for l in route {
        link_flows.insert(l.clone(), total);
    }
    let mut movement_flows: BTreeMap<(LinkId, LinkId), f64> = g
        .movements()
        .filter(|m| m.allowed)
        .map(|m| ((m.from.clone(), m.to.clone()), 0.0))
        .collect();
    for pair in route.windows(2) {
        movement_flows.insert((pair[0].clone(), pair[1].clone()), total);
    }
    Ok(CommodityFlows {
        commodity: demand.commodity,
        link_flows,
        movement_flows,
    })
}

/// Collapses commodities into one flow-weighted routing (their per-link flows
/// and movement flows add; ratios follow).
pub fn aggregate_commodities(
    g: &NetworkGraph,
    demands: &[CommodityDemand],
) -> Result<AggregateRouting, NetworkError> {
    let mut link_flows: BTreeMap<LinkId, f64> =
        g.links().map(|l| (l.id.clone(), 0.0)).collect();
    let mut movement_flows: BTreeMap<(LinkId, LinkId), f64> = g
        .movements()
        .filter(|m| m.allowed)
        .map(|m| ((m.from.clone(), m.to.clone()), 0.0))
        .collect();
    for demand in demands {
        let flows = resolve_commodity_flows(g, demand)?;
        for (l, f) in flows.link_flows {
            *link_flows.get_mut(&l).unwrap() += f;
        }
        for (key, f) in flows.movement_flows {
            *movement_flows.get_mut(&key).unwrap() += f;
        }
    }
    let mut turn_ratios = BTreeMap::new();
    for (key, f) in &movement_flows {
        let total = link_flows[&key.0];
        let r = if total > FLOW_EPS { f / total } else { 0.0 };
        turn_ratios.insert(key.clone(), r);
    }
    let zero_flow_links = link_flows
        .iter()
        .filter(|(l, f)| f.abs() <= FLOW_EPS && !g.out_movements(l).is_empty())
        .map(|(l, _)| l.clone())
        .collect();
    Ok(AggregateRouting {
        turn_ratios,
        link_flows,
        movement_flows,
        zero_flow_links,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn chain_carries_demand_end_to_end() {
        let g = chain3();
        let flows = resolve_commodity_flows(&g, &g.demands()[0]).unwrap();
        for l in ["e", "m", "x"] {
            assert_relative_eq!(flows.link_flows[&LinkId::from(l)], 600.0);
        }
        assert_relative_eq!(
            flows.movement_flows[&(LinkId::from("e"), LinkId::from("m"))],
            600.0
        );
    }

    #[test]
    fn single_commodity_aggregates_to_itself() {
        let g = chain3();
        let agg = aggregate_commodities(&g, g.demands()).unwrap();
        assert_relative_eq!(
            agg.turn_ratios[&(LinkId::from("e"), LinkId::from("m"))],
            1.0
        );
        assert!(agg.zero_flow_links.is_empty());
    }

    fn two_way_split() -> NetworkData {
        NetworkData {
            nodes: vec![node("n", 60.0, 0.0)],
            links: vec![
                link("a", None, Some("n"), LinkKind::Entry),
                link("e1", Some("n"), None, LinkKind::Exit),
                link("e2", Some("n"), None, LinkKind::Exit),
            ],
            movements: vec![movement("a", "e1", 1800.0), movement("a", "e2", 1800.0)],
            timing_plans: vec![],
            demands: vec![],
        }
    }

    fn ratio_demand(commodity: u32, flow: f64, r1: f64, r2: f64) -> CommodityDemand {
        CommodityDemand {
            commodity,
            entry_flows: vec![EntryFlow {
                link: LinkId::from("a"),
                flow_vph: flow,
            }],
            turn_ratios: vec![
                TurnRatio {
                    from: LinkId::from("a"),
                    to: LinkId::from("e1"),
                    ratio: r1,
                },
                TurnRatio {
                    from: LinkId::from("a"),
                    to: LinkId::from("e2"),
                    ratio: r2,
                },
            ],
            route: None,
        }
    }

    #[test]
    fn opposite_commodities_average_by_flow() {
        let g = NetworkGraph::new(two_way_split()).unwrap();
        let demands = vec![ratio_demand(0, 300.0, 1.0, 0.0), ratio_demand(1, 300.0, 0.0, 1.0)];
        let agg = aggregate_commodities(&g, &demands).unwrap();
        assert_relative_eq!(agg.turn_ratios[&(LinkId::from("a"), LinkId::from("e1"))], 0.5);
        assert_relative_eq!(agg.turn_ratios[&(LinkId::from("a"), LinkId::from("e2"))], 0.5);
        assert_relative_eq!(agg.link_flows[&LinkId::from("a")], 600.0);
    }

    #[test]
    fn route_commodity_adds_onto_baseline() {
        let g = chain3();
        let mut demands = g.demands().to_vec();
        demands.push(CommodityDemand {
            commodity: 1,
            entry_flows: vec![EntryFlow {
                link: LinkId::from("e"),
                flow_vph: 200.0,
            }],
            turn_ratios: vec![],
            route: Some(vec![LinkId::from("e"), LinkId::from("m"), LinkId::from("x")]),
        });
        let by_commodity: Vec<CommodityFlows> = demands
            .iter()
            .map(|d| resolve_commodity_flows(&g, d).unwrap())
            .collect();
        let agg = aggregate_commodities(&g, &demands).unwrap();
        for l in ["e", "m", "x"] {
            let id = LinkId::from(l);
            let sum: f64 = by_commodity.iter().map(|c| c.link_flows[&id]).sum();
            assert_relative_eq!(agg.link_flows[&id], sum);
            assert_relative_eq!(agg.link_flows[&id], 800.0);
        }
    }

    /// Propagating the aggregate ratios from the summed entry flows must
    /// land back on the summed link flows.
    #[test]
    fn aggregate_routing_reproduces_summed_flows() {
        let g = NetworkGraph::new(two_way_split()).unwrap();
        let demands = vec![ratio_demand(0, 500.0, 0.8, 0.2), ratio_demand(1, 100.0, 0.25, 0.75)];
        let agg = aggregate_commodities(&g, &demands).unwrap();
        let merged = CommodityDemand {
            commodity: 0,
            entry_flows: vec![EntryFlow {
                link: LinkId::from("a"),
                flow_vph: 600.0,
            }],
            turn_ratios: agg
                .turn_ratios
                .iter()
                .map(|((from, to), r)| TurnRatio {
                    from: from.clone(),
                    to: to.clone(),
                    ratio: *r,
                })
                .collect(),
            route: None,
        };
        let replay = resolve_commodity_flows(&g, &merged).unwrap();
        for (l, f) in &agg.link_flows {
            assert_relative_eq!(replay.link_flows[l], *f, epsilon = 1e-9);
        }
    }

    #[test]
    fn leaking_ratios_are_an_error() {
        let g = chain3();
        let mut demand = g.demands()[0].clone();
        demand.turn_ratios[0].ratio = 0.9;
        let err = resolve_commodity_flows(&g, &demand).unwrap_err();
        assert!(
            matches!(err, NetworkError::MissingRatios { link, sum, .. }
                if link.0 == "e" && (sum - 0.9).abs() < 1e-12)
        );
    }

    #[test]
    fn closed_circulation_is_singular() {
        let data = NetworkData {
            nodes: vec![node("n1", 60.0, 0.0), node("n2", 60.0, 0.0)],
            links: vec![
                link("a", None, Some("n1"), LinkKind::Entry),
                link("m1", Some("n1"), Some("n2"), LinkKind::Internal),
                link("m2", Some("n2"), Some("n1"), LinkKind::Internal),
            ],
            movements: vec![
                movement("a", "m1", 1800.0),
                movement("m1", "m2", 1800.0),
                movement("m2", "m1", 1800.0),
            ],
            timing_plans: vec![],
            demands: vec![],
        };
        let g = NetworkGraph::new(data).unwrap();
        let demand = CommodityDemand {
            commodity: 0,
            entry_flows: vec![EntryFlow {
                link: LinkId::from("a"),
                flow_vph: 100.0,
            }],
            turn_ratios: vec![
                TurnRatio { from: LinkId::from("a"), to: LinkId::from("m1"), ratio: 1.0 },
                TurnRatio { from: LinkId::from("m1"), to: LinkId::from("m2"), ratio: 1.0 },
                TurnRatio { from: LinkId::from("m2"), to: LinkId::from("m1"), ratio: 1.0 },
            ],
            route: None,
        };
        assert!(matches!(
            resolve_commodity_flows(&g, &demand),
            Err(NetworkError::SingularRouting)
        ));
    }

    #[test]
    fn broken_route_is_rejected() {
        let g = chain3();
        let demand = CommodityDemand {
            commodity: 3,
            entry_flows: vec![EntryFlow {
                link: LinkId::from("e"),
                flow_vph: 100.0,
            }],
            turn_ratios: vec![],
            route: Some(vec![LinkId::from("e"), LinkId::from("x")]),
        };
        assert!(matches!(
            resolve_commodity_flows(&g, &demand),
            Err(NetworkError::BadRoute { commodity: 3 })
        ));
    }

    #[test]
    fn unused_links_are_flagged_when_aggregating() {
        let g = NetworkGraph::new(two_way_split()).unwrap();
        let demands = vec![ratio_demand(0, 0.0, 1.0, 0.0)];
        let agg = aggregate_commodities(&g, &demands).unwrap();
        assert_eq!(agg.zero_flow_links, vec![LinkId::from("a")]);
        assert_relative_eq!(agg.turn_ratios[&(LinkId::from("a"), LinkId::from("e1"))], 0.0);
    }
}

//! The event engine behind [`run`] and [`loading_sweep`].
//!
//! One binary heap drives everything.  Simultaneous events fire in a fixed
//! kind order (phase changes, then crossings, then queue joins, then exits,
//! then external arrivals), ties within a kind break on a context key
//! (vehicle, movement, node or arrival-process index) and finally on
//! insertion order, so a run is a pure function of its inputs.
//!
//! [`run`]: super::run
//! [`loading_sweep`]: super::loading_sweep

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::{
    aggregate_commodities, CommodityDemand, LinkId, LinkKind, NetworkError, NetworkGraph, NodeId,
};

use super::{ArrivalModel, Controller, EventKind, SimConfig, SimError, SimEvent, TravelTimeModel};

/// Slack when comparing event times to window boundaries.
const TIME_EPS: f64 = 1e-9;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit string hash (the std hasher may change between releases,
/// which would silently change every "same seed" log).
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn substream(parts: &[u64]) -> ChaCha8Rng {
    let mut z = 0;
    for p in parts {
        z = splitmix64(z ^ p);
    }
    ChaCha8Rng::seed_from_u64(z)
}

/// Unit-mean exponential draw; `1 − u` keeps the log argument positive.
fn exp1(rng: &mut ChaCha8Rng) -> f64 {
    -(1.0 - rng.random::<f64>()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    /// Controller boundary at a node.
    Phase { node: usize },
    /// Service opportunity at a movement's queue head.
    Attempt { movement: usize },
    /// Vehicle reaches the downstream end of its link.
    Join { vehicle: u32 },
    /// Vehicle clears its exit link.
    Exit { vehicle: u32 },
    /// Next arrival of one arrival process.
    Arrival { process: usize, generation: u32 },
}

impl Action {
    fn priority(self) -> u8 {
        match self {
            Action::Phase { .. } => 0,
            Action::Attempt { .. } => 1,
            Action::Join { .. } => 2,
            Action::Exit { .. } => 3,
            Action::Arrival { .. } => 4,
        }
    }

    fn key(self) -> u64 {
        match self {
            Action::Phase { node } => node as u64,
            Action::Attempt { movement } => movement as u64,
            Action::Join { vehicle } | Action::Exit { vehicle } => u64::from(vehicle),
            Action::Arrival { process, .. } => process as u64,
        }
    }
}

#[derive(Debug)]
struct Entry {
    time: f64,
    action: Action,
    seq: u64,
}

impl Entry {
    fn rank(&self) -> (f64, u8, u64, u64) {
        (self.time, self.action.priority(), self.action.key(), self.seq)
    }
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        let (ta, pa, ka, sa) = self.rank();
        let (tb, pb, kb, sb) = other.rank();
        // Reversed so the max-heap pops the earliest event first.
        tb.total_cmp(&ta)
            .then(pb.cmp(&pa))
            .then(kb.cmp(&ka))
            .then(sb.cmp(&sa))
    }
}

#[derive(Debug, Clone)]
enum Routing {
    /// Draw each turn from the vehicle's commodity ratios.
    Ratios,
    /// Follow a fixed link sequence; the index points at the current link.
    Route(usize),
}

#[derive(Debug)]
struct Vehicle {
    label: String,
    commodity: usize,
    routing: Routing,
    rng: ChaCha8Rng,
    current_link: usize,
    /// Movement chosen when the vehicle entered its current link.
    next_movement: Option<usize>,
}

#[derive(Debug)]
struct LinkRec {
    id: LinkId,
    kind: LinkKind,
    storage: u32,
    travel: f64,
    occupancy: u32,
    /// Movements leaving this link, by engine index.
    out: Vec<usize>,
    /// Vehicles that arrived while the link was full, oldest first.
    outside: VecDeque<u32>,
}

#[derive(Debug)]
struct MovementRec {
    from: usize,
    to: usize,
    node: usize,
    /// Minimum spacing between served vehicles, `3600 / c(l,m)`.
    headway: f64,
    saturation: f64,
    queue: VecDeque<u32>,
    green: bool,
    /// An `Attempt` event is already on the heap.
    pending: bool,
    /// No service before this time (headway bookkeeping).
    earliest: f64,
}

/// Stage windows of a fixed-time plan, flattened: stages run back to back
/// from the cycle start (plus offset), each lasting its longest phase, and
/// the cycle tail is all-red.
#[derive(Debug)]
struct FixedSchedule {
    cycle: f64,
    offset: f64,
    /// `(green start, green end, movement)` in local cycle time.
    windows: Vec<(f64, f64, usize)>,
    /// Local times at which some window opens or closes, sorted, deduped.
    boundaries: Vec<f64>,
    /// Position of the boundary the next phase event fires at.
    next: usize,
}

#[derive(Debug)]
struct MaxPressureSchedule {
    offset: f64,
    epoch: f64,
    /// Movement sets selectable at each decision, from the plan's stages.
    stages: Vec<Vec<usize>>,
}

#[derive(Debug)]
enum Control {
    /// No plan: every movement at the node is green forever.
    Open,
    Fixed(FixedSchedule),
    MaxPressure(MaxPressureSchedule),
}

#[derive(Debug)]
struct NodeRec {
    id: NodeId,
    movements: Vec<usize>,
    control: Control,
}

#[derive(Debug)]
struct ArrivalProc {
    entry: usize,
    commodity: usize,
    base_rate: f64,
    rate: f64,
    rng: ChaCha8Rng,
    ordinal: u64,
    generation: u32,
}

pub(super) struct Engine {
    cfg: SimConfig,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Entry>,
    pub(super) events: Vec<SimEvent>,
    vehicles: Vec<Vehicle>,
    links: Vec<LinkRec>,
    movements: Vec<MovementRec>,
    nodes: Vec<NodeRec>,
    procs: Vec<ArrivalProc>,
    /// Commodity tag of each demand, by demand index.
    tags: Vec<u32>,
    /// Per commodity, per link: normalized `(movement, ratio)` turn table.
    turn_tables: Vec<BTreeMap<usize, Vec<(usize, f64)>>>,
    /// Fixed routes per commodity, as engine link indices.
    routes: Vec<Option<Vec<usize>>>,
    /// Aggregate turn ratio per movement, for the pressure term.
    agg_ratio: Vec<f64>,
    pending_error: Option<SimError>,
}

impl Engine {
    pub(super) fn new(
        g: &NetworkGraph,
        demands: &[CommodityDemand],
        cfg: &SimConfig,
    ) -> Result<Self, SimError> {
        if cfg.horizon_s <= 0.0 || !cfg.horizon_s.is_finite() {
            return Err(SimError::BadHorizon(cfg.horizon_s));
        }
        if let Controller::MaxPressure { decisions_per_cycle } = cfg.controller {
            if decisions_per_cycle == 0 {
                return Err(SimError::BadController(
                    "max-pressure needs at least one decision per cycle".into(),
                ));
            }
        }

        let mut links = Vec::new();
        let mut link_idx = BTreeMap::new();
        for l in g.links() {
            link_idx.insert(l.id.clone(), links.len());
            links.push(LinkRec {
                id: l.id.clone(),
                kind: l.kind,
                storage: l.storage,
                travel: l.travel_time_s,
                occupancy: 0,
                out: Vec::new(),
                outside: VecDeque::new(),
            });
        }

        let mut nodes = Vec::new();
        let mut node_idx = BTreeMap::new();
        for n in g.nodes() {
            node_idx.insert(n.id.clone(), nodes.len());
            nodes.push(NodeRec {
                id: n.id.clone(),
                movements: Vec::new(),
                control: Control::Open,
            });
        }

        let mut movements = Vec::new();
        let mut mv_idx = BTreeMap::new();
        for m in g.movements().filter(|m| m.allowed) {
            let node = g
                .movement_node(&m.from, &m.to)
                .expect("allowed movement endpoints meet at a node");
            let idx = movements.len();
            let from = link_idx[&m.from];
            let to = link_idx[&m.to];
            let ni = node_idx[node];
            movements.push(MovementRec {
                from,
                to,
                node: ni,
                headway: 3600.0 / m.saturation_flow_vph,
                saturation: m.saturation_flow_vph,
                queue: VecDeque::new(),
                green: false,
                pending: false,
                earliest: f64::NEG_INFINITY,
            });
            mv_idx.insert((m.from.clone(), m.to.clone()), idx);
            links[from].out.push(idx);
            nodes[ni].movements.push(idx);
        }

        // Controllers: nodes with a timing plan follow it (or hand its stage
        // set to max-pressure); the rest are permanently green.
        for node in nodes.iter_mut() {
            let Some(plan) = g.timing_plan(&node.id) else {
                for &mi in &node.movements {
                    movements[mi].green = true;
                }
                continue;
            };
            let cycle = g.node(&node.id).expect("plan validates its node").cycle_time_s;
            match cfg.controller {
                Controller::FixedTime => {
                    let mut windows = Vec::new();
                    let mut boundaries = vec![0.0];
                    let mut start = 0.0;
                    for stage in &plan.stages {
                        let mut dur: f64 = 0.0;
                        for p in &stage.phases {
                            let Some(&mi) = mv_idx.get(&(p.from.clone(), p.to.clone())) else {
                                continue;
                            };
                            if p.green_s > 0.0 {
                                windows.push((start, start + p.green_s, mi));
                                boundaries.push(start + p.green_s);
                            }
                            dur = dur.max(p.green_s);
                        }
                        start += dur;
                        boundaries.push(start);
                    }
                    boundaries.retain(|b| *b < cycle - TIME_EPS);
                    boundaries.sort_by(f64::total_cmp);
                    boundaries.dedup_by(|a, b| (*a - *b).abs() <= TIME_EPS);
                    node.control = Control::Fixed(FixedSchedule {
                        cycle,
                        offset: plan.offset_s,
                        windows,
                        boundaries,
                        next: 0,
                    });
                }
                Controller::MaxPressure { decisions_per_cycle } => {
                    let stages: Vec<Vec<usize>> = plan
                        .stages
                        .iter()
                        .map(|s| {
                            s.phases
                                .iter()
                                .filter_map(|p| mv_idx.get(&(p.from.clone(), p.to.clone())).copied())
                                .collect()
                        })
                        .filter(|s: &Vec<usize>| !s.is_empty())
                        .collect();
                    if stages.is_empty() {
                        return Err(SimError::BadController(format!(
                            "node {} has a timing plan with no usable stages",
                            node.id
                        )));
                    }
                    node.control = Control::MaxPressure(MaxPressureSchedule {
                        offset: plan.offset_s,
                        epoch: cycle / f64::from(decisions_per_cycle),
                        stages,
                    });
                }
            }
        }

        // Routing tables and fixed routes, per commodity.
        let mut tags = Vec::new();
        let mut turn_tables = Vec::new();
        let mut routes = Vec::new();
        for d in demands {
            tags.push(d.commodity);
            let mut table: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
            for ((from, to), r) in d.ratio_map() {
                let Some(&mi) = mv_idx.get(&(from.clone(), to)) else {
                    continue;
                };
                if r > 0.0 {
                    table.entry(link_idx[&from]).or_default().push((mi, r));
                }
            }
            for list in table.values_mut() {
                let total: f64 = list.iter().map(|(_, r)| r).sum();
                for (_, r) in list.iter_mut() {
                    *r /= total;
                }
            }
            turn_tables.push(table);
            routes.push(match &d.route {
                Some(route) => {
                    let mut ids = Vec::with_capacity(route.len());
                    for l in route {
                        let Some(&li) = link_idx.get(l) else {
                            return Err(SimError::BrokenRoute {
                                commodity: d.commodity,
                                link: l.clone(),
                            });
                        };
                        ids.push(li);
                    }
                    // Every declared entry of a routed commodity must be the
                    // route's first link, or its vehicles could not follow it.
                    for ef in &d.entry_flows {
                        if ids.first() != link_idx.get(&ef.link) {
                            return Err(SimError::BrokenRoute {
                                commodity: d.commodity,
                                link: ef.link.clone(),
                            });
                        }
                    }
                    Some(ids)
                }
                None => None,
            });
        }

        // Aggregate ratios feed the downstream term of the pressure.  When
        // the demand does not pin them down (no ratios on single-movement
        // links, say) the term is simply dropped; the controller still works
        // off upstream queues alone.
        let mut agg_ratio = vec![0.0; movements.len()];
        if matches!(cfg.controller, Controller::MaxPressure { .. }) {
            if let Ok(agg) = aggregate_commodities(g, demands) {
                for (key, r) in &agg.turn_ratios {
                    if let Some(&mi) = mv_idx.get(key) {
                        agg_ratio[mi] = *r;
                    }
                }
            }
        }

        let mut procs = Vec::new();
        for (ci, d) in demands.iter().enumerate() {
            for ef in &d.entry_flows {
                let Some(&li) = link_idx.get(&ef.link) else {
                    return Err(SimError::Network(NetworkError::UnknownLink(ef.link.clone())));
                };
                if ef.flow_vph <= 0.0 {
                    continue;
                }
                procs.push(ArrivalProc {
                    entry: li,
                    commodity: ci,
                    base_rate: ef.flow_vph,
                    rate: ef.flow_vph,
                    rng: substream(&[
                        cfg.seed,
                        0xA1,
                        fnv1a(ef.link.0.as_str()),
                        d.commodity.into(),
                    ]),
                    ordinal: 0,
                    generation: 0,
                });
            }
        }

        let mut engine = Engine {
            cfg: cfg.clone(),
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            events: Vec::new(),
            vehicles: Vec::new(),
            links,
            movements,
            nodes,
            procs,
            tags,
            turn_tables,
            routes,
            agg_ratio,
            pending_error: None,
        };
        engine.init_controllers();
        for p in 0..engine.procs.len() {
            engine.schedule_arrival(p, 0.0);
        }
        Ok(engine)
    }

    fn push(&mut self, time: f64, action: Action) {
        self.heap.push(Entry { time, action, seq: self.seq });
        self.seq += 1;
    }

    fn log(
        &mut self,
        kind: EventKind,
        vehicle: Option<u32>,
        link_from: Option<usize>,
        link_to: Option<usize>,
        node: Option<usize>,
    ) {
        self.events.push(SimEvent {
            time: self.now,
            kind,
            vehicle: vehicle.map(|v| self.vehicles[v as usize].label.clone()),
            link_from: link_from.map(|l| self.links[l].id.clone()),
            link_to: link_to.map(|l| self.links[l].id.clone()),
            node: node.map(|n| self.nodes[n].id.clone()),
        });
    }

    /// Errors surfacing deep inside event handlers stop the run at the next
    /// loop iteration instead of unwinding through the heap.
    fn fail(&mut self, e: SimError) {
        self.pending_error.get_or_insert(e);
    }

    // ----- controllers ----------------------------------------------------

    fn init_controllers(&mut self) {
        for n in 0..self.nodes.len() {
            match &self.nodes[n].control {
                Control::Open => {}
                Control::Fixed(_) => {
                    self.apply_fixed(n, true);
                    self.schedule_next_boundary(n);
                }
                Control::MaxPressure(_) => {
                    self.apply_max_pressure(n, true);
                    self.schedule_next_epoch(n);
                }
            }
        }
    }

    /// Local cycle time of a plan at `t`.
    fn local_tau(cycle: f64, offset: f64, t: f64) -> f64 {
        (t - offset).rem_euclid(cycle)
    }

    fn apply_fixed(&mut self, n: usize, init: bool) {
        let Control::Fixed(sched) = &self.nodes[n].control else {
            unreachable!()
        };
        // At a boundary event the local time is the boundary value itself;
        // using it directly avoids float drift over long runs.
        let tau = if init {
            Self::local_tau(sched.cycle, sched.offset, self.now)
        } else {
            sched.boundaries[sched.next]
        };
        let mut state: BTreeMap<usize, bool> = BTreeMap::new();
        for &mi in &self.nodes[n].movements {
            state.insert(mi, false);
        }
        for &(ws, we, mi) in &sched.windows {
            if tau >= ws - TIME_EPS && tau < we - TIME_EPS {
                state.insert(mi, true);
            }
        }
        self.set_green(n, &state, init);
    }

    fn schedule_next_boundary(&mut self, n: usize) {
        let now = self.now;
        let Control::Fixed(sched) = &mut self.nodes[n].control else {
            unreachable!()
        };
        if sched.boundaries.is_empty() {
            return;
        }
        let tau = Self::local_tau(sched.cycle, sched.offset, now);
        let lap = ((now - sched.offset) / sched.cycle).floor();
        let ahead = sched.boundaries.iter().position(|b| *b > tau + TIME_EPS);
        let (lap, idx) = match ahead {
            Some(i) => (lap, i),
            None => (lap + 1.0, 0),
        };
        sched.next = idx;
        let t = sched.offset + lap * sched.cycle + sched.boundaries[idx];
        self.push(t, Action::Phase { node: n });
    }

    fn stage_pressure(&self, stage: &[usize]) -> f64 {
        let mut total = 0.0;
        for &mi in stage {
            let m = &self.movements[mi];
            let upstream = m.queue.len() as f64;
            let mut downstream = 0.0;
            for &di in &self.links[m.to].out {
                downstream += self.agg_ratio[di] * self.movements[di].queue.len() as f64;
            }
            total += m.saturation * (upstream - downstream);
        }
        total
    }

    fn apply_max_pressure(&mut self, n: usize, init: bool) {
        let Control::MaxPressure(sched) = &self.nodes[n].control else {
            unreachable!()
        };
        let mut best = 0;
        let mut best_p = f64::NEG_INFINITY;
        for (i, stage) in sched.stages.iter().enumerate() {
            let p = self.stage_pressure(stage);
            // Strict: equal pressures keep the lowest stage index.
            if p > best_p {
                best = i;
                best_p = p;
            }
        }
        let Control::MaxPressure(sched) = &self.nodes[n].control else {
            unreachable!()
        };
        let chosen = sched.stages[best].clone();
        let mut state: BTreeMap<usize, bool> = BTreeMap::new();
        for &mi in &self.nodes[n].movements {
            state.insert(mi, false);
        }
        for mi in chosen {
            state.insert(mi, true);
        }
        self.set_green(n, &state, init);
    }

    fn schedule_next_epoch(&mut self, n: usize) {
        let now = self.now;
        let Control::MaxPressure(sched) = &mut self.nodes[n].control else {
            unreachable!()
        };
        // Decisions sit on the grid `offset + j·epoch`; take the first one
        // strictly ahead of now.
        let j = ((now - sched.offset) / sched.epoch + TIME_EPS).floor() + 1.0;
        let t = sched.offset + j * sched.epoch;
        self.push(t, Action::Phase { node: n });
    }

    /// Applies a green assignment, logs the flips, and wakes served queues.
    ///
    /// Each changed movement gets its own `phase_change` row with the new
    /// state ("green"/"red") in the vehicle column, and the initial
    /// assignment is logged in full at t = 0, so the signal state at any
    /// time can be read back from the log alone.
    fn set_green(&mut self, n: usize, state: &BTreeMap<usize, bool>, init: bool) {
        let mut changed = false;
        for (&mi, &on) in state {
            let flip = self.movements[mi].green != on;
            if flip {
                self.movements[mi].green = on;
                changed = true;
            }
            if flip || init {
                self.events.push(SimEvent {
                    time: self.now,
                    kind: EventKind::PhaseChange,
                    vehicle: Some(if on { "green" } else { "red" }.to_string()),
                    link_from: Some(self.links[self.movements[mi].from].id.clone()),
                    link_to: Some(self.links[self.movements[mi].to].id.clone()),
                    node: Some(self.nodes[n].id.clone()),
                });
            }
        }
        if changed || init {
            let movements = self.nodes[n].movements.clone();
            for mi in movements {
                self.ensure_attempt(mi);
            }
        }
    }

    fn on_phase(&mut self, n: usize) {
        match &self.nodes[n].control {
            Control::Open => {}
            Control::Fixed(_) => {
                self.apply_fixed(n, false);
                self.schedule_next_boundary(n);
            }
            Control::MaxPressure(_) => {
                self.apply_max_pressure(n, false);
                self.schedule_next_epoch(n);
            }
        }
    }

    // ----- vehicle lifecycle ------------------------------------------------

    fn schedule_arrival(&mut self, p: usize, from: f64) {
        let rate = self.procs[p].rate;
        if rate <= 0.0 {
            return;
        }
        let gap = match self.cfg.arrivals {
            ArrivalModel::Deterministic => 3600.0 / rate,
            ArrivalModel::Poisson => exp1(&mut self.procs[p].rng) * 3600.0 / rate,
        };
        let generation = self.procs[p].generation;
        self.push(from + gap, Action::Arrival { process: p, generation });
    }

    fn on_arrival(&mut self, p: usize, generation: u32) {
        if self.procs[p].generation != generation {
            return; // canceled by a demand change
        }
        let entry = self.procs[p].entry;
        let commodity = self.procs[p].commodity;
        let ordinal = self.procs[p].ordinal;
        self.procs[p].ordinal += 1;
        let tag = self.tags[commodity];
        let label = format!("{tag}:{}#{ordinal:05}", self.links[entry].id);
        let routing = if self.routes[commodity].is_some() {
            Routing::Route(0)
        } else {
            Routing::Ratios
        };
        let rng = substream(&[
            self.cfg.seed,
            0xB2,
            fnv1a(self.links[entry].id.0.as_str()),
            tag.into(),
            ordinal,
        ]);
        let v = self.vehicles.len() as u32;
        self.vehicles.push(Vehicle {
            label,
            commodity,
            routing,
            rng,
            current_link: entry,
            next_movement: None,
        });
        self.log(EventKind::ExternalArrival, Some(v), None, Some(entry), None);
        if self.links[entry].occupancy < self.links[entry].storage {
            if let Err(e) = self.enter_link(v, entry, None, None) {
                self.fail(e);
            }
        } else {
            self.links[entry].outside.push_back(v);
        }
        let now = self.now;
        self.schedule_arrival(p, now);
    }

    fn enter_link(
        &mut self,
        v: u32,
        link: usize,
        from: Option<usize>,
        node: Option<usize>,
    ) -> Result<(), SimError> {
        self.links[link].occupancy += 1;
        self.vehicles[v as usize].current_link = link;
        self.log(EventKind::EnterLink, Some(v), from, Some(link), node);
        let next_movement = if self.links[link].kind == LinkKind::Exit {
            None
        } else {
            Some(self.choose_movement(v, link)?)
        };
        self.vehicles[v as usize].next_movement = next_movement;
        let travel = match self.cfg.travel_time {
            TravelTimeModel::Constant => self.links[link].travel,
            TravelTimeModel::Exponential => {
                self.links[link].travel * exp1(&mut self.vehicles[v as usize].rng)
            }
        };
        let t = self.now + travel;
        if next_movement.is_some() {
            self.push(t, Action::Join { vehicle: v });
        } else {
            self.push(t, Action::Exit { vehicle: v });
        }
        Ok(())
    }

    fn choose_movement(&mut self, v: u32, link: usize) -> Result<usize, SimError> {
        let commodity = self.vehicles[v as usize].commodity;
        let routing = self.vehicles[v as usize].routing.clone();
        match routing {
            Routing::Route(pos) => {
                let broken = |links: &[LinkRec], tags: &[u32]| SimError::BrokenRoute {
                    commodity: tags[commodity],
                    link: links[link].id.clone(),
                };
                let route = self.routes[commodity].as_ref().expect("routed commodity");
                let Some(next) = route.get(pos + 1).copied() else {
                    return Err(broken(&self.links, &self.tags));
                };
                self.vehicles[v as usize].routing = Routing::Route(pos + 1);
                self.movement_between(link, next)
                    .ok_or_else(|| broken(&self.links, &self.tags))
            }
            Routing::Ratios => {
                let out = &self.links[link].out;
                // A single outgoing movement needs no draw, so per-vehicle
                // streams stay aligned when unrelated forks change.
                if out.len() == 1 {
                    return Ok(out[0]);
                }
                let table = self.turn_tables[commodity]
                    .get(&link)
                    .cloned()
                    .ok_or_else(|| SimError::MissingRatio {
                        commodity: self.tags[commodity],
                        link: self.links[link].id.clone(),
                    })?;
                let u: f64 = self.vehicles[v as usize].rng.random();
                let mut acc = 0.0;
                for &(mi, r) in &table {
                    acc += r;
                    if u < acc {
                        return Ok(mi);
                    }
                }
                Ok(table.last().expect("normalized table is nonempty").0)
            }
        }
    }

    fn movement_between(&self, from: usize, to: usize) -> Option<usize> {
        self.links[from]
            .out
            .iter()
            .copied()
            .find(|&mi| self.movements[mi].to == to)
    }

    fn on_join(&mut self, v: u32) {
        let mi = self.vehicles[v as usize]
            .next_movement
            .expect("joining vehicles carry a movement");
        self.movements[mi].queue.push_back(v);
        let (from, to, node) = {
            let m = &self.movements[mi];
            (m.from, m.to, m.node)
        };
        self.log(EventKind::JoinQueue, Some(v), Some(from), Some(to), Some(node));
        self.ensure_attempt(mi);
    }

    fn ensure_attempt(&mut self, mi: usize) {
        let m = &self.movements[mi];
        if m.pending || !m.green || m.queue.is_empty() {
            return;
        }
        let t = self.now.max(m.earliest);
        self.movements[mi].pending = true;
        self.push(t, Action::Attempt { movement: mi });
    }

    fn on_attempt(&mut self, mi: usize) {
        self.movements[mi].pending = false;
        if !self.movements[mi].green || self.movements[mi].queue.is_empty() {
            return;
        }
        if self.now + TIME_EPS < self.movements[mi].earliest {
            // Stale early wake-up; come back once the headway has elapsed.
            self.ensure_attempt(mi);
            return;
        }
        let (from, to, node) = {
            let m = &self.movements[mi];
            (m.from, m.to, m.node)
        };
        let v = *self.movements[mi].queue.front().expect("nonempty queue");
        if self.links[to].occupancy >= self.links[to].storage {
            // Spillback: the opportunity is spent, the vehicle stays put.
            self.log(EventKind::Blocked, Some(v), Some(from), Some(to), Some(node));
            self.movements[mi].earliest = self.now + self.movements[mi].headway;
            self.ensure_attempt(mi);
            return;
        }
        self.movements[mi].queue.pop_front();
        self.log(EventKind::CrossIntersection, Some(v), Some(from), Some(to), Some(node));
        self.links[from].occupancy -= 1;
        self.movements[mi].earliest = self.now + self.movements[mi].headway;
        if let Err(e) = self.enter_link(v, to, Some(from), Some(node)) {
            self.fail(e);
            return;
        }
        // A freed entry slot admits the oldest vehicle waiting outside.
        if self.links[from].kind == LinkKind::Entry {
            if let Some(w) = self.links[from].outside.pop_front() {
                if let Err(e) = self.enter_link(w, from, None, None) {
                    self.fail(e);
                    return;
                }
            }
        }
        self.ensure_attempt(mi);
    }

    fn on_exit(&mut self, v: u32) {
        let link = self.vehicles[v as usize].current_link;
        self.links[link].occupancy -= 1;
        self.log(EventKind::ExitNetwork, Some(v), Some(link), None, None);
    }

    // ----- main loop --------------------------------------------------------

    /// Processes events up to and including `until`.
    pub(super) fn run_until(&mut self, until: f64) -> Result<(), SimError> {
        loop {
            if let Some(e) = self.pending_error.take() {
                return Err(e);
            }
            let Some(head) = self.heap.peek() else {
                break;
            };
            if head.time > until + TIME_EPS {
                break;
            }
            let Entry { time, action, .. } = self.heap.pop().expect("peeked");
            debug_assert!(time >= self.now - 1e-6, "time went backwards");
            self.now = time.max(self.now);
            match action {
                Action::Phase { node } => self.on_phase(node),
                Action::Attempt { movement } => self.on_attempt(movement),
                Action::Join { vehicle } => self.on_join(vehicle),
                Action::Exit { vehicle } => self.on_exit(vehicle),
                Action::Arrival { process, generation } => self.on_arrival(process, generation),
            }
        }
        if let Some(e) = self.pending_error.take() {
            return Err(e);
        }
        self.now = self.now.max(until);
        Ok(())
    }

    /// Rescales arrival processes for the next sweep step.  Streams restart
    /// at `t` only when the rate actually changes, so repeating a factor
    /// leaves them untouched.
    pub(super) fn set_load_factor(&mut self, gamma: f64, t: f64) {
        for p in 0..self.procs.len() {
            let rate = self.procs[p].base_rate * gamma;
            if (rate - self.procs[p].rate).abs() <= f64::EPSILON * rate.abs() {
                continue;
            }
            self.procs[p].generation += 1;
            self.procs[p].rate = rate;
            self.schedule_arrival(p, t);
        }
    }
}

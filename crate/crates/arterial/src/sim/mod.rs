//! Discrete-event simulation of point queues under signal control.
//!
//! Links hold vehicles in a free-flowing stretch followed by per-movement
//! FIFO queues at the downstream node.  A queue head crosses when its
//! movement is green, the saturation headway `3600/c(l,m)` has elapsed
//! since the movement last served (or was blocked), and the receiving link
//! has a storage slot free.  Full entry links stack arrivals outside the
//! network.  Two controllers share the plan data: fixed-time plays the
//! stage windows, max-pressure re-picks a stage several times per cycle.
//!
//! Everything observable comes out as an ordered event log; identical
//! inputs (including the seed) reproduce it bytewise.

mod engine;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::FlowSolution;
use crate::network::{CommodityDemand, LinkId, NetworkError, NetworkGraph, NodeId};

use engine::Engine;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("bad controller: {0}")]
    BadController(String),
    #[error("bad sweep: {0}")]
    BadSweep(String),
    #[error("commodity {commodity} has no turn ratios out of link {link}")]
    MissingRatio { commodity: u32, link: LinkId },
    #[error("commodity {commodity} cannot follow its route at link {link}")]
    BrokenRoute { commodity: u32, link: LinkId },
    #[error("bad event log: {0}")]
    BadLog(String),
    #[error("bad scenario: {0}")]
    BadScenario(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Signal control strategy, shared by every signalized node of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    #[default]
    FixedTime,
    MaxPressure {
        decisions_per_cycle: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalModel {
    /// Evenly spaced, `3600/d` seconds apart.
    #[default]
    Deterministic,
    /// Poisson process with rate `d/3600` per second.
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TravelTimeModel {
    /// Always the link's `travel_time_s`.
    #[default]
    Constant,
    /// Exponential with the link's `travel_time_s` as mean.
    Exponential,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default)]
    pub controller: Controller,
    #[serde(default)]
    pub arrivals: ArrivalModel,
    #[serde(default)]
    pub travel_time: TravelTimeModel,
    pub horizon_s: f64,
    #[serde(default)]
    pub seed: u64,
}

/// A simulation request as stored on disk: which network, what demand,
/// and how to drive it.  `demands: null` falls back to the network's own.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Path of the network JSON, relative to the scenario file.
    pub network: String,
    #[serde(default)]
    pub demands: Option<Vec<CommodityDemand>>,
    #[serde(default)]
    pub controller: Controller,
    #[serde(default)]
    pub arrivals: ArrivalModel,
    #[serde(default)]
    pub travel_time: TravelTimeModel,
    pub horizon_s: f64,
    #[serde(default)]
    pub seed: u64,
    /// Demand multipliers for a loading sweep; empty means a single run.
    #[serde(default)]
    pub load_factors: Vec<f64>,
    /// Duration of each sweep step.
    #[serde(default)]
    pub step_hours: f64,
}

impl Scenario {
    pub fn from_json_str(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::BadScenario(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self, SimError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| SimError::BadScenario(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&s)
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            controller: self.controller,
            arrivals: self.arrivals,
            travel_time: self.travel_time,
            horizon_s: self.horizon_s,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    ExternalArrival,
    EnterLink,
    JoinQueue,
    CrossIntersection,
    ExitNetwork,
    PhaseChange,
    Blocked,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ExternalArrival => "external_arrival",
            EventKind::EnterLink => "enter_link",
            EventKind::JoinQueue => "join_queue",
            EventKind::CrossIntersection => "cross_intersection",
            EventKind::ExitNetwork => "exit_network",
            EventKind::PhaseChange => "phase_change",
            EventKind::Blocked => "blocked",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "external_arrival" => EventKind::ExternalArrival,
            "enter_link" => EventKind::EnterLink,
            "join_queue" => EventKind::JoinQueue,
            "cross_intersection" => EventKind::CrossIntersection,
            "exit_network" => EventKind::ExitNetwork,
            "phase_change" => EventKind::PhaseChange,
            "blocked" => EventKind::Blocked,
            other => return Err(format!("unknown event kind {other:?}")),
        })
    }
}

/// One log row.  Which of the optional fields are set depends on the kind:
/// vehicle events carry the vehicle and the links involved, `phase_change`
/// only the node.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    pub vehicle: Option<String>,
    pub link_from: Option<LinkId>,
    pub link_to: Option<LinkId>,
    pub node: Option<NodeId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<SimEvent>,
}

impl EventLog {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SimEvent> {
        self.events.iter()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// `time,kind,vehicle,link_from,link_to,node`; empty cells for fields
    /// the event does not carry.  Times print in shortest round-trip form,
    /// so equal logs compare equal as strings.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["time", "kind", "vehicle", "link_from", "link_to", "node"])
            .expect("write to memory");
        for e in &self.events {
            w.write_record([
                format!("{}", e.time).as_str(),
                e.kind.as_str(),
                e.vehicle.as_deref().unwrap_or(""),
                e.link_from.as_ref().map(|l| l.0.as_str()).unwrap_or(""),
                e.link_to.as_ref().map(|l| l.0.as_str()).unwrap_or(""),
                e.node.as_ref().map(|n| n.0.as_str()).unwrap_or(""),
            ])
            .expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf8")
    }

    pub fn from_csv_str(s: &str) -> Result<Self, SimError> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(s.as_bytes());
        let mut events = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| SimError::BadLog(e.to_string()))?;
            let field = |j: usize| rec.get(j).unwrap_or("");
            if rec.len() != 6 {
                return Err(SimError::BadLog(format!("row {}: want 6 columns", i + 2)));
            }
            let opt = |v: &str| (!v.is_empty()).then(|| v.to_string());
            events.push(SimEvent {
                time: field(0)
                    .parse::<f64>()
                    .map_err(|e| SimError::BadLog(format!("row {}: time: {e}", i + 2)))?,
                kind: field(1)
                    .parse::<EventKind>()
                    .map_err(|e| SimError::BadLog(format!("row {}: {e}", i + 2)))?,
                vehicle: opt(field(2)),
                link_from: opt(field(3)).map(LinkId),
                link_to: opt(field(4)).map(LinkId),
                node: opt(field(5)).map(NodeId),
            });
        }
        Ok(EventLog { events })
    }
}

/// Simulates `demands` on `g` for `cfg.horizon_s` seconds.
pub fn run(
    g: &NetworkGraph,
    demands: &[CommodityDemand],
    cfg: &SimConfig,
) -> Result<EventLog, SimError> {
    let mut engine = Engine::new(g, demands, cfg)?;
    engine.run_until(cfg.horizon_s)?;
    Ok(EventLog { events: engine.events })
}

/// Runs `factors.len()` consecutive steps of `step_hours` each, scaling all
/// entry demand by `factors[i]` during step `i`, without resetting network
/// state in between.  Returns one log per step; `cfg.horizon_s` is ignored.
///
/// Arrival processes restart at a step boundary only when their rate
/// actually changes there.
pub fn loading_sweep(
    g: &NetworkGraph,
    demands: &[CommodityDemand],
    cfg: &SimConfig,
    factors: &[f64],
    step_hours: f64,
) -> Result<Vec<EventLog>, SimError> {
    if factors.is_empty() {
        return Err(SimError::BadSweep("need at least one load factor".into()));
    }
    if factors.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(SimError::BadSweep("load factors must be positive".into()));
    }
    if factors.windows(2).any(|w| w[1] < w[0]) {
        return Err(SimError::BadSweep("load factors must not decrease".into()));
    }
    if !(step_hours > 0.0 && step_hours.is_finite()) {
        return Err(SimError::BadSweep("step must be positive".into()));
    }
    let step_s = step_hours * 3600.0;
    let mut engine_cfg = cfg.clone();
    engine_cfg.horizon_s = step_s * factors.len() as f64;
    let mut engine = Engine::new(g, demands, &engine_cfg)?;
    let mut logs = Vec::with_capacity(factors.len());
    for (i, gamma) in factors.iter().enumerate() {
        let start = step_s * i as f64;
        engine.set_load_factor(*gamma, start);
        // Setup events (initial signal states) belong to the first step.
        let before = if i == 0 { 0 } else { engine.events.len() };
        engine.run_until(start + step_s)?;
        logs.push(EventLog { events: engine.events[before..].to_vec() });
    }
    Ok(logs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityEntry {
    pub flow_vph: f64,
    pub capacity_vph: f64,
    /// `capacity − flow`; the movement keeps up only if this is positive.
    pub margin_vph: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub movements: BTreeMap<(LinkId, LinkId), StabilityEntry>,
    pub stable: bool,
}

/// Compares each allowed movement's flow against its capacity
/// `s(l,m) = (Σ green / T) · c(l,m)`.  Movements at unsignalized nodes are
/// held to the raw saturation flow instead.
pub fn stability_check(g: &NetworkGraph, flows: &FlowSolution) -> StabilityReport {
    let mut movements = BTreeMap::new();
    let mut stable = true;
    for m in g.movements().filter(|m| m.allowed) {
        let key = (m.from.clone(), m.to.clone());
        let capacity = match g.saturation_capacity(&m.from, &m.to) {
            Ok(s) => s,
            Err(NetworkError::MissingTimingPlan(_)) => m.saturation_flow_vph,
            Err(_) => m.saturation_flow_vph,
        };
        let flow = flows.movement_flows.get(&key).copied().unwrap_or(0.0);
        let margin = capacity - flow;
        let ok = margin > 0.0;
        stable &= ok;
        movements.insert(key, StabilityEntry { flow_vph: flow, capacity_vph: capacity, margin_vph: margin, ok });
    }
    StabilityReport { movements, stable }
}

//! Measurement queries over a simulation event log.
//!
//! Everything here is a single linear pass over the ordered log; nothing
//! feeds back into the simulation.  Trips carry distance from the network
//! description, signal state is reconstructed from the `phase_change` rows
//! (which record each movement's flips plus the full assignment at t = 0),
//! and queue lengths are recovered from `join_queue`/`cross_intersection`
//! pairs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::network::{LinkId, NetworkGraph};
use crate::sim::{EventKind, EventLog};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no usable trips in the log")]
    NoTrips,
    #[error("empty analysis window: {0}")]
    EmptyWindow(String),
    #[error("bin width must be positive, got {0}")]
    BadBin(f64),
    #[error("horizon must cover the log, got {0}")]
    BadHorizon(f64),
    #[error("no links selected")]
    NoLinks,
    #[error("link {0} is not in the network")]
    UnknownLink(LinkId),
    #[error("malformed log: {0}")]
    BadLog(String),
}

/// One completed trip: a vehicle that entered the network and left it again.
#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub vehicle: String,
    pub entry: LinkId,
    pub exit: LinkId,
    /// Links in traversal order, entry through exit.
    pub links: Vec<LinkId>,
    pub distance_miles: f64,
    /// Network entry to network exit.
    pub duration_s: f64,
    pub speed_mph: f64,
    pub arrived_s: f64,
    pub entered_s: f64,
    pub exited_s: f64,
}

/// Completed trips in order of exit.  Vehicles still inside at the end of
/// the log are not trips yet and are skipped.
pub fn trips(g: &NetworkGraph, log: &EventLog) -> Result<Vec<TripRecord>, MetricsError> {
    struct Open {
        arrived: f64,
        entered: Option<f64>,
        links: Vec<LinkId>,
        miles: f64,
    }
    let mut open: BTreeMap<&str, Open> = BTreeMap::new();
    let mut done = Vec::new();
    for e in &log.events {
        match e.kind {
            EventKind::ExternalArrival => {
                let v = e.vehicle.as_deref().ok_or_else(|| bad("arrival without vehicle"))?;
                open.insert(v, Open { arrived: e.time, entered: None, links: Vec::new(), miles: 0.0 });
            }
            EventKind::EnterLink => {
                let v = e.vehicle.as_deref().ok_or_else(|| bad("enter without vehicle"))?;
                let l = e.link_to.as_ref().ok_or_else(|| bad("enter without link"))?;
                let link = g.link(l).ok_or_else(|| MetricsError::UnknownLink(l.clone()))?;
                let o = open.get_mut(v).ok_or_else(|| bad("enter before arrival"))?;
                o.entered.get_or_insert(e.time);
                o.links.push(l.clone());
                o.miles += link.length_miles;
            }
            EventKind::ExitNetwork => {
                let v = e.vehicle.as_deref().ok_or_else(|| bad("exit without vehicle"))?;
                let o = open.remove(v).ok_or_else(|| bad("exit before arrival"))?;
                let entered = o.entered.ok_or_else(|| bad("exit before entry"))?;
                let duration = e.time - entered;
                done.push(TripRecord {
                    vehicle: v.to_string(),
                    entry: o.links.first().cloned().ok_or_else(|| bad("exit without links"))?,
                    exit: o.links.last().cloned().expect("nonempty"),
                    distance_miles: o.miles,
                    duration_s: duration,
                    speed_mph: o.miles / duration * 3600.0,
                    arrived_s: o.arrived,
                    entered_s: entered,
                    exited_s: e.time,
                    links: o.links,
                });
            }
            _ => {}
        }
    }
    Ok(done)
}

fn bad(msg: &str) -> MetricsError {
    MetricsError::BadLog(msg.to_string())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation; at event-log sample sizes the n vs n−1
/// distinction is noise.
fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(xs), mean(ys));
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        return None; // zero variance: undefined, flagged upstream
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteTravelTimes {
    pub entry: LinkId,
    pub exit: LinkId,
    /// One duration per matching trip, in exit order.
    pub samples: Vec<f64>,
    pub mean_s: f64,
    pub std_s: f64,
    /// Every sample inside `[μ − 2σ, μ + 2σ]`.
    pub within_two_sigma: bool,
    /// Fewer than two samples: σ is reported as 0 and the band check is
    /// vacuous.
    pub degenerate: bool,
}

/// Travel-time statistics over all trips from `entry` to `exit`.
pub fn route_travel_times(
    g: &NetworkGraph,
    log: &EventLog,
    entry: &LinkId,
    exit: &LinkId,
) -> Result<RouteTravelTimes, MetricsError> {
    let samples: Vec<f64> = trips(g, log)?
        .into_iter()
        .filter(|t| &t.entry == entry && &t.exit == exit)
        .map(|t| t.duration_s)
        .collect();
    let degenerate = samples.len() < 2;
    let (mean_s, std_s) = if samples.is_empty() {
        (0.0, 0.0)
    } else if degenerate {
        (samples[0], 0.0)
    } else {
        (mean(&samples), pop_std(&samples))
    };
    let within_two_sigma = samples
        .iter()
        .all(|t| (t - mean_s).abs() <= 2.0 * std_s + 1e-9);
    Ok(RouteTravelTimes {
        entry: entry.clone(),
        exit: exit.clone(),
        samples,
        mean_s,
        std_s,
        within_two_sigma,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmtVht {
    pub vmt_per_hour: f64,
    pub vht_per_hour: f64,
    /// Flow-weighted network speed, VMT/VHT.
    pub network_speed_mph: f64,
    pub mean_distance_miles: f64,
    pub mean_duration_s: f64,
    pub mean_speed_mph: f64,
    /// Pearson correlation of per-trip speed and duration; `None` when one
    /// of them has zero variance.
    pub speed_duration_correlation: Option<f64>,
    pub trip_count: usize,
    /// Entry-to-exit hops that never touched an internal link.
    pub excluded_boundary_trips: usize,
}

/// Distance/time totals over completed trips.  Trips that cross no internal
/// link are excluded from all statistics.
pub fn vmt_vht_from_trips(all: &[TripRecord], horizon_s: f64) -> Result<VmtVht, MetricsError> {
    if horizon_s <= 0.0 {
        return Err(MetricsError::BadHorizon(horizon_s));
    }
    let kept: Vec<&TripRecord> = all.iter().filter(|t| t.links.len() > 2).collect();
    let excluded = all.len() - kept.len();
    if kept.is_empty() {
        return Err(MetricsError::NoTrips);
    }
    let hours = horizon_s / 3600.0;
    let d: Vec<f64> = kept.iter().map(|t| t.distance_miles).collect();
    let t: Vec<f64> = kept.iter().map(|t| t.duration_s).collect();
    let v: Vec<f64> = kept.iter().map(|t| t.speed_mph).collect();
    let vmt: f64 = d.iter().sum();
    let vht: f64 = t.iter().sum::<f64>() / 3600.0;
    Ok(VmtVht {
        vmt_per_hour: vmt / hours,
        vht_per_hour: vht / hours,
        network_speed_mph: vmt / vht,
        mean_distance_miles: mean(&d),
        mean_duration_s: mean(&t),
        mean_speed_mph: mean(&v),
        speed_duration_correlation: pearson(&v, &t),
        trip_count: kept.len(),
        excluded_boundary_trips: excluded,
    })
}

pub fn vmt_vht(g: &NetworkGraph, log: &EventLog, horizon_s: f64) -> Result<VmtVht, MetricsError> {
    vmt_vht_from_trips(&trips(g, log)?, horizon_s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcessGreenReport {
    /// Fraction of each phase's green time spent with an empty queue.
    pub per_phase: BTreeMap<(LinkId, LinkId), f64>,
    /// Phases that never turned green; excluded from the CDF.
    pub never_actuated: Vec<(LinkId, LinkId)>,
    /// Right-continuous step CDF over the defined phases: `(e, F(e))` at
    /// each distinct excess value.
    pub cdf: Vec<(f64, f64)>,
}

/// Share of actuated (green) time each signal phase spends serving nobody.
///
/// Only movements that appear in `phase_change` rows count as phases;
/// permanently green movements at unsignalized nodes are not reported.
pub fn excess_green(log: &EventLog, horizon_s: f64) -> Result<ExcessGreenReport, MetricsError> {
    #[derive(Default)]
    struct Phase {
        green: bool,
        queue: i64,
        since: f64,
        green_s: f64,
        empty_green_s: f64,
        signalized: bool,
    }
    let mut phases: BTreeMap<(LinkId, LinkId), Phase> = BTreeMap::new();
    let advance = |p: &mut Phase, now: f64| {
        let dt = now - p.since;
        if p.green {
            p.green_s += dt;
            if p.queue == 0 {
                p.empty_green_s += dt;
            }
        }
        p.since = now;
    };
    for e in &log.events {
        if e.time > horizon_s + 1e-9 {
            return Err(MetricsError::BadHorizon(horizon_s));
        }
        let key = match (&e.link_from, &e.link_to) {
            (Some(f), Some(t)) => (f.clone(), t.clone()),
            _ => continue,
        };
        match e.kind {
            EventKind::PhaseChange => {
                let on = e.vehicle.as_deref() == Some("green");
                let p = phases.entry(key).or_default();
                advance(p, e.time);
                p.green = on;
                p.signalized = true;
            }
            EventKind::JoinQueue => {
                let p = phases.entry(key).or_default();
                advance(p, e.time);
                p.queue += 1;
            }
            EventKind::CrossIntersection => {
                let p = phases.entry(key).or_default();
                advance(p, e.time);
                p.queue -= 1;
                if p.queue < 0 {
                    return Err(bad("crossing from an empty queue"));
                }
            }
            _ => {}
        }
    }
    let mut per_phase = BTreeMap::new();
    let mut never = Vec::new();
    for (key, mut p) in phases {
        if !p.signalized {
            continue;
        }
        advance(&mut p, horizon_s);
        if p.green_s > 0.0 {
            per_phase.insert(key, p.empty_green_s / p.green_s);
        } else {
            never.push(key);
        }
    }
    let mut values: Vec<f64> = per_phase.values().copied().collect();
    values.sort_by(f64::total_cmp);
    let mut cdf = Vec::new();
    let n = values.len() as f64;
    for (i, v) in values.iter().enumerate() {
        if i + 1 == values.len() || values[i + 1] > *v {
            cdf.push((*v, (i + 1) as f64 / n));
        }
    }
    Ok(ExcessGreenReport { per_phase, never_actuated: never, cdf })
}

/// Binned external-arrival (`e`), network-admission (`a`) and departure
/// (`d`) rates, with the outside (`w`) and inside (`n`) counts they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroSeries {
    pub bin_s: f64,
    /// Bin start times; all rate/count vectors share this length.
    pub t_s: Vec<f64>,
    pub entry_rate_vph: Vec<f64>,
    pub admission_rate_vph: Vec<f64>,
    pub departure_rate_vph: Vec<f64>,
    /// Waiting outside at each bin's end: cumulative e − a.
    pub waiting: Vec<f64>,
    /// Inside the network at each bin's end: cumulative a − d.
    pub inside: Vec<f64>,
}

pub fn macro_series(
    log: &EventLog,
    horizon_s: f64,
    bin_s: f64,
) -> Result<MacroSeries, MetricsError> {
    if bin_s <= 0.0 {
        return Err(MetricsError::BadBin(bin_s));
    }
    if horizon_s <= 0.0 {
        return Err(MetricsError::BadHorizon(horizon_s));
    }
    let bins = (horizon_s / bin_s).ceil() as usize;
    let mut e = vec![0u64; bins];
    let mut a = vec![0u64; bins];
    let mut d = vec![0u64; bins];
    for ev in &log.events {
        let b = ((ev.time / bin_s) as usize).min(bins - 1);
        match ev.kind {
            EventKind::ExternalArrival => e[b] += 1,
            EventKind::EnterLink if ev.link_from.is_none() => a[b] += 1,
            EventKind::ExitNetwork => d[b] += 1,
            _ => {}
        }
    }
    let rate = |c: &[u64]| c.iter().map(|&x| x as f64 * 3600.0 / bin_s).collect::<Vec<f64>>();
    let (mut ce, mut ca, mut cd) = (0i64, 0i64, 0i64);
    let mut waiting = Vec::with_capacity(bins);
    let mut inside = Vec::with_capacity(bins);
    for b in 0..bins {
        ce += e[b] as i64;
        ca += a[b] as i64;
        cd += d[b] as i64;
        debug_assert!(ce >= ca && ca >= cd);
        waiting.push((ce - ca) as f64);
        inside.push((ca - cd) as f64);
    }
    Ok(MacroSeries {
        bin_s,
        t_s: (0..bins).map(|b| b as f64 * bin_s).collect(),
        entry_rate_vph: rate(&e),
        admission_rate_vph: rate(&a),
        departure_rate_vph: rate(&d),
        waiting,
        inside,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LittlesReport {
    /// External arrival rate over the window.
    pub lambda_vph: f64,
    /// Mean outside wait of vehicles arriving in the window.
    pub mean_entry_wait_s: f64,
    /// Mean inside sojourn of vehicles admitted in the window.
    pub mean_sojourn_s: f64,
    /// Time-averaged outside count over the window.
    pub avg_waiting: f64,
    /// Time-averaged inside count over the window.
    pub avg_inside: f64,
    /// `|w̄ − Eλ|` relative to max(w̄, Eλ); 0 when both vanish.
    pub rel_err_waiting: f64,
    pub rel_err_inside: f64,
    pub rel_err_total: f64,
}

/// Checks the conservation-law identities `w̄ ≈ Eλ`, `n̄ ≈ Tλ` and
/// `w̄ + n̄ ≈ (E + T)λ` over `[window.0, window.1]`.
///
/// Vehicles are attributed by arrival (for E) or admission (for T) time;
/// waits that complete after the window still count, so a window ending in
/// a heavily congested transient can show larger discrepancies.
pub fn littles_check(log: &EventLog, window: (f64, f64)) -> Result<LittlesReport, MetricsError> {
    let (t0, t1) = window;
    if t1 <= t0 || !t1.is_finite() || !t0.is_finite() {
        return Err(MetricsError::EmptyWindow(format!("[{t0}, {t1}]")));
    }
    let hours = (t1 - t0) / 3600.0;

    let mut arrivals = 0usize;
    let mut arrived_at: BTreeMap<&str, f64> = BTreeMap::new();
    let mut entered_at: BTreeMap<&str, f64> = BTreeMap::new();
    let mut waits: Vec<f64> = Vec::new();
    let mut sojourns: Vec<f64> = Vec::new();

    // Time averages of w(t), n(t) clipped to the window.
    let (mut w, mut n) = (0i64, 0i64);
    let mut last = 0.0_f64;
    let (mut w_area, mut n_area) = (0.0, 0.0);
    let clip = |from: f64, to: f64, w: i64, n: i64, w_area: &mut f64, n_area: &mut f64| {
        let lo = from.max(t0);
        let hi = to.min(t1);
        if hi > lo {
            *w_area += w as f64 * (hi - lo);
            *n_area += n as f64 * (hi - lo);
        }
    };
    for e in &log.events {
        match e.kind {
            EventKind::ExternalArrival => {
                clip(last, e.time, w, n, &mut w_area, &mut n_area);
                last = e.time;
                w += 1;
                let v = e.vehicle.as_deref().ok_or_else(|| bad("arrival without vehicle"))?;
                if e.time >= t0 && e.time <= t1 {
                    arrivals += 1;
                    arrived_at.insert(v, e.time);
                }
            }
            EventKind::EnterLink if e.link_from.is_none() => {
                clip(last, e.time, w, n, &mut w_area, &mut n_area);
                last = e.time;
                w -= 1;
                n += 1;
                let v = e.vehicle.as_deref().ok_or_else(|| bad("enter without vehicle"))?;
                if let Some(t) = arrived_at.remove(v) {
                    waits.push(e.time - t);
                }
                if e.time >= t0 && e.time <= t1 {
                    entered_at.insert(v, e.time);
                }
            }
            EventKind::ExitNetwork => {
                clip(last, e.time, w, n, &mut w_area, &mut n_area);
                last = e.time;
                n -= 1;
                let v = e.vehicle.as_deref().ok_or_else(|| bad("exit without vehicle"))?;
                if let Some(t) = entered_at.remove(v) {
                    sojourns.push(e.time - t);
                }
            }
            _ => {}
        }
    }
    clip(last, t1.max(last), w, n, &mut w_area, &mut n_area);
    if arrivals == 0 {
        return Err(MetricsError::EmptyWindow("no arrivals".into()));
    }
    let lambda = arrivals as f64 / hours;
    let e_wait = if waits.is_empty() { 0.0 } else { mean(&waits) };
    let t_sojourn = if sojourns.is_empty() { 0.0 } else { mean(&sojourns) };
    let avg_w = w_area / (t1 - t0);
    let avg_n = n_area / (t1 - t0);
    let rel = |measured: f64, predicted: f64| {
        let scale = measured.abs().max(predicted.abs());
        if scale < 1e-12 {
            0.0
        } else {
            (measured - predicted).abs() / scale
        }
    };
    Ok(LittlesReport {
        lambda_vph: lambda,
        mean_entry_wait_s: e_wait,
        mean_sojourn_s: t_sojourn,
        avg_waiting: avg_w,
        avg_inside: avg_n,
        rel_err_waiting: rel(avg_w, e_wait / 3600.0 * lambda),
        rel_err_inside: rel(avg_n, t_sojourn / 3600.0 * lambda),
        rel_err_total: rel(avg_w + avg_n, (e_wait + t_sojourn) / 3600.0 * lambda),
    })
}

/// One time bin of the flow/occupancy aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfdPoint {
    pub t_s: f64,
    /// Length-and-lane-weighted mean of per-link departure rates.
    pub flow_vph: f64,
    /// Length-and-lane-weighted mean occupancy fraction (vehicles/storage).
    pub occupancy: f64,
}

/// Aggregates the sampled links into one (flow, occupancy) point per bin.
pub fn mfd_aggregate(
    g: &NetworkGraph,
    log: &EventLog,
    links: &[LinkId],
    bin_s: f64,
    horizon_s: f64,
) -> Result<Vec<MfdPoint>, MetricsError> {
    if links.is_empty() {
        return Err(MetricsError::NoLinks);
    }
    if bin_s <= 0.0 {
        return Err(MetricsError::BadBin(bin_s));
    }
    if horizon_s <= 0.0 {
        return Err(MetricsError::BadHorizon(horizon_s));
    }
    let bins = (horizon_s / bin_s).ceil() as usize;
    struct Tracked {
        weight: f64,
        storage: f64,
        occupancy: i64,
        since: f64,
        departures: Vec<u64>,
        occ_area: Vec<f64>,
    }
    let mut tracked: BTreeMap<&LinkId, Tracked> = BTreeMap::new();
    for id in links {
        let l = g.link(id).ok_or_else(|| MetricsError::UnknownLink(id.clone()))?;
        tracked.insert(
            id,
            Tracked {
                weight: l.length_miles * f64::from(l.lanes),
                storage: f64::from(l.storage),
                occupancy: 0,
                since: 0.0,
                departures: vec![0; bins],
                occ_area: vec![0.0; bins],
            },
        );
    }
    // Distributes a constant occupancy over the bins a time span covers.
    let spread = |area: &mut [f64], occ: i64, from: f64, to: f64| {
        if occ == 0 || to <= from {
            return;
        }
        let mut t = from;
        while t < to - 1e-12 {
            let b = ((t / bin_s) as usize).min(bins - 1);
            let end = ((b + 1) as f64 * bin_s).min(to);
            area[b] += occ as f64 * (end - t);
            t = end;
        }
    };
    for e in &log.events {
        let (arrive, depart): (Option<&LinkId>, Option<&LinkId>) = match e.kind {
            EventKind::EnterLink => (e.link_to.as_ref(), None),
            EventKind::CrossIntersection => (None, e.link_from.as_ref()),
            EventKind::ExitNetwork => (None, e.link_from.as_ref()),
            _ => (None, None),
        };
        for (l, delta) in [(arrive, 1i64), (depart, -1i64)] {
            let Some(rec) = l.and_then(|l| tracked.get_mut(l)) else {
                continue;
            };
            spread(&mut rec.occ_area, rec.occupancy, rec.since, e.time);
            rec.since = e.time;
            rec.occupancy += delta;
            if delta < 0 {
                let b = ((e.time / bin_s) as usize).min(bins - 1);
                rec.departures[b] += 1;
            }
        }
    }
    for rec in tracked.values_mut() {
        spread(&mut rec.occ_area, rec.occupancy, rec.since, horizon_s);
    }
    let total_weight: f64 = tracked.values().map(|r| r.weight).sum();
    let mut points = Vec::with_capacity(bins);
    for b in 0..bins {
        let mut flow = 0.0;
        let mut occ = 0.0;
        for rec in tracked.values() {
            flow += rec.weight * rec.departures[b] as f64 * 3600.0 / bin_s;
            occ += rec.weight * rec.occ_area[b] / bin_s / rec.storage;
        }
        points.push(MfdPoint {
            t_s: b as f64 * bin_s,
            flow_vph: flow / total_weight,
            occupancy: occ / total_weight,
        });
    }
    Ok(points)
}

//! One binary, subcommand per pipeline stage.  All configuration lives in
//! files (network JSON, measurement CSV, scenario JSON); flags point at the
//! files and override the seed.  Outputs carry no timestamps, so a re-run
//! with the same inputs writes byte-identical files.
//!
//! Exit codes: 0 success, 1 computational failure, 2 input error.
//! Set `ARTERIAL_LOG=debug` (or `info`) for progress chatter on stderr.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use arterial::calibrate::{calibrate, CalibrateError, MeasurementSet};
use arterial::identify::{flow_bounds, identifiable_links, impute_flows, vmt_bounds, LinkStatus};
use arterial::lpsolve::{max_retimed_diversion, max_simple_diversion, DiversionError, DiversionResult};
use arterial::metrics;
use arterial::network::{validate, LinkId, LinkKind, NetworkData, NetworkGraph};
use arterial::sim::{loading_sweep, run, EventKind, EventLog, Scenario};

#[derive(Parser)]
#[command(name = "arterial", version, about = "Arterial network calibration, identifiability and simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a network file against the schema and structural rules.
    Validate {
        #[arg(long)]
        network: PathBuf,
    },
    /// Fit link and movement flows to measurements by constrained least squares.
    Calibrate {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Solver KKT tolerance.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Classify links as measured / identified / undetermined and bound the rest.
    Identify {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Maximum diversion along a route, with fixed and with re-split signal timing.
    Divert {
        #[arg(long)]
        network: PathBuf,
        /// JSON with `route` and `baseline_movement_flows`.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one scenario and write the event log.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Chain the scenario's demand factors into one run and tabulate the loading curve.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Post-process an event log into trips, rates, signal idle shares and MFD points.
    Metrics {
        #[arg(long)]
        network: PathBuf,
        /// Event log CSV, as written by `simulate` or `sweep`.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Analysis horizon; defaults to the last event time.
        #[arg(long)]
        horizon_s: Option<f64>,
        /// Bin width for the aggregate series.
        #[arg(long, default_value_t = 300.0)]
        bin_s: f64,
        /// Restrict travel-time stats to one `entry:exit` pair.
        #[arg(long)]
        route: Option<String>,
        /// Conservation-law window `start:end`; defaults to the whole horizon.
        #[arg(long)]
        window: Option<String>,
        /// Comma-separated links for the MFD aggregate; defaults to all internal links.
        #[arg(long)]
        mfd_links: Option<String>,
    },
}

enum Failure {
    /// Bad or missing input: exit 2.
    Input(String),
    /// Valid input the algorithms could not handle: exit 1.
    Compute(String),
}

trait IntoFailure<T> {
    fn input(self) -> Result<T, Failure>;
    fn compute(self) -> Result<T, Failure>;
}

impl<T, E: std::fmt::Display> IntoFailure<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.to_string()))
    }
    fn compute(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Compute(e.to_string()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ARTERIAL_LOG"))
        .format_timestamp(None)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Compute(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Validate { network } => cmd_validate(&network),
        Cmd::Calibrate { network, measurements, out, tol } => {
            cmd_calibrate(&network, &measurements, &out, tol)
        }
        Cmd::Identify { network, measurements, out } => cmd_identify(&network, &measurements, &out),
        Cmd::Divert { network, scenario, out } => cmd_divert(&network, &scenario, &out),
        Cmd::Simulate { scenario, out, seed } => cmd_simulate(&scenario, &out, seed),
        Cmd::Sweep { scenario, out, seed } => cmd_sweep(&scenario, &out, seed),
        Cmd::Metrics { network, log, out, horizon_s, bin_s, route, window, mfd_links } => {
            cmd_metrics(&network, &log, &out, horizon_s, bin_s, route, window, mfd_links)
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).input()?;
    fs::write(dir.join(name), contents).input()?;
    log::debug!("wrote {}", dir.join(name).display());
    Ok(())
}

fn cmd_validate(network: &Path) -> Result<(), Failure> {
    let data = NetworkData::from_path(network).input()?;
    let report = validate(&data);
    if !report.is_valid() {
        return Err(Failure::Input(format!(
            "{} is invalid:\n{report}",
            network.display()
        )));
    }
    let g = NetworkGraph::new(data).input()?;
    println!(
        "ok: {} nodes, {} links, {} movements, {} commodities",
        g.num_nodes(),
        g.num_links(),
        g.movements().count(),
        g.demands().len()
    );
    Ok(())
}

fn cmd_calibrate(network: &Path, measurements: &Path, out: &Path, tol: f64) -> Result<(), Failure> {
    let g = NetworkGraph::from_path(network).input()?;
    let meas = MeasurementSet::from_csv_path(measurements).input()?;
    meas.check(&g).input()?;
    log::info!("calibrating {} measurements", meas.len());
    let sol = match calibrate(&g, &meas, tol) {
        Ok(sol) => sol,
        Err(CalibrateError::IterationLimit { kkt_residual, .. }) => {
            return Err(Failure::Compute(format!(
                "solver hit its iteration limit at KKT residual {kkt_residual:.3e}"
            )))
        }
        Err(e @ CalibrateError::Solver(_)) => return Err(Failure::Compute(e.to_string())),
        Err(e) => return Err(Failure::Input(e.to_string())),
    };

    write_file(out, "solution.csv", &sol.to_csv_string(&meas))?;

    let mut residuals = String::from("kind,id_from,id_to,measured,calibrated,error\n");
    for r in &sol.residuals {
        let to = r.to.as_ref().map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(
            residuals,
            "{},{},{},{},{},{}",
            r.kind, r.from, to, r.measured, r.calibrated, r.error
        );
    }
    write_file(out, "residuals.csv", &residuals)?;

    let mut ratios = String::from("from,to,ratio,from_flow_undetermined\n");
    for ((l, m), r) in &sol.split_ratios {
        let undetermined = sol.undetermined_ratio_links.contains(l);
        let _ = writeln!(ratios, "{l},{m},{r},{undetermined}");
    }
    write_file(out, "split_ratios.csv", &ratios)?;

    let max_residual = sol
        .residuals
        .iter()
        .map(|r| r.error.abs())
        .fold(0.0, f64::max);
    println!(
        "objective {:.6}, kkt residual {:.3e}, max measurement residual {:.6}",
        sol.objective_value, sol.kkt_residual, max_residual
    );
    if sol.non_unique {
        println!("data underdetermine the flows; wrote the minimum-norm solution");
    }
    Ok(())
}

fn cmd_identify(network: &Path, measurements: &Path, out: &Path) -> Result<(), Failure> {
    let g = NetworkGraph::from_path(network).input()?;
    let meas = MeasurementSet::from_csv_path(measurements).input()?;
    meas.check(&g).input()?;
    let values: BTreeMap<LinkId, f64> = meas
        .link_flows
        .iter()
        .map(|(l, m)| (l.clone(), m.value))
        .collect();
    let measured: BTreeSet<LinkId> = values.keys().cloned().collect();

    // Identifiability is a property of the boundary-closed graph.
    let aug = g.augment_with_super_node();
    if !aug.is_strongly_connected {
        return Err(Failure::Input(
            "network is not strongly connected even after closing entries and exits".into(),
        ));
    }
    let ag = &aug.graph;
    let mut report = identifiable_links(ag, &measured).input()?;
    let count = |st: LinkStatus| report.status.values().filter(|s| **s == st).count();
    println!(
        "measured {}, identified {}, undetermined {}",
        count(LinkStatus::Measured),
        count(LinkStatus::Identified),
        count(LinkStatus::Undetermined)
    );
    println!(
        "additional sensors for full identifiability: {}",
        report.required_additional_count
    );

    let imputed = impute_flows(ag, &values).compute()?;
    report.flow_bounds = flow_bounds(ag, &values).compute()?;
    let vmt = vmt_bounds(ag, &values).compute()?;
    println!(
        "vmt lower {:.3}, upper {}",
        vmt.lower,
        vmt.upper.map(|u| format!("{u:.3}")).unwrap_or("unbounded".into())
    );
    report.vmt = Some(vmt);

    write_file(out, "status.csv", &report.to_csv_string())?;
    write_file(out, "annotations.json", &report.to_annotation_json())?;
    let mut imputed_csv = String::from("link,flow_vph\n");
    for (l, f) in &imputed {
        let _ = writeln!(imputed_csv, "{l},{f}");
    }
    write_file(out, "imputed.csv", &imputed_csv)?;
    let mut suggested = String::from("link\n");
    for l in report.minimal_additional_measurements() {
        let _ = writeln!(suggested, "{l}");
    }
    write_file(out, "suggested_measurements.csv", &suggested)?;
    let summary = json!({
        "measured": count(LinkStatus::Measured),
        "identified": count(LinkStatus::Identified),
        "undetermined": count(LinkStatus::Undetermined),
        "required_additional": report.required_additional_count,
        "vmt_lower": vmt.lower,
        "vmt_upper": vmt.upper,
        "vmt_measured_term": vmt.measured_term,
    });
    write_file(out, "summary.json", &pretty(&summary))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DivertRequest {
    route: Vec<String>,
    baseline_movement_flows: Vec<BaselineFlow>,
}

#[derive(Deserialize)]
struct BaselineFlow {
    from: String,
    to: String,
    flow_vph: f64,
}

fn cmd_divert(network: &Path, scenario: &Path, out: &Path) -> Result<(), Failure> {
    let g = NetworkGraph::from_path(network).input()?;
    let text = fs::read_to_string(scenario)
        .map_err(|e| Failure::Input(format!("{}: {e}", scenario.display())))?;
    let req: DivertRequest =
        serde_json::from_str(&text).map_err(|e| Failure::Input(format!("divert request: {e}")))?;
    let route: Vec<LinkId> = req.route.iter().map(|s| LinkId::from(s.as_str())).collect();
    let baseline: BTreeMap<(LinkId, LinkId), f64> = req
        .baseline_movement_flows
        .iter()
        .map(|b| ((LinkId::from(b.from.as_str()), LinkId::from(b.to.as_str())), b.flow_vph))
        .collect();

    let classify = |e: DiversionError| match e {
        DiversionError::Lp(_) | DiversionError::Unservable { .. } => {
            Failure::Compute(e.to_string())
        }
        other => Failure::Input(other.to_string()),
    };
    let simple = max_simple_diversion(&g, &baseline, &route).map_err(classify)?;
    let retimed = max_retimed_diversion(&g, &baseline, &route).map_err(classify)?;

    let binding = |r: &DiversionResult| {
        r.binding_movements
            .iter()
            .map(|(l, m)| format!("{l}->{m}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!(
        "D*  = {:.3} vph with fixed timing (binding: {})",
        simple.optimal_diversion_vph,
        binding(&simple)
    );
    println!(
        "D+* = {:.3} vph with re-split timing (binding: {})",
        retimed.optimal_diversion_vph,
        binding(&retimed)
    );

    let as_json = |r: &DiversionResult| {
        json!({
            "optimal_diversion_vph": r.optimal_diversion_vph,
            "binding_movements": r.binding_movements,
            "new_plans": r.new_plans,
        })
    };
    let doc = json!({ "fixed_timing": as_json(&simple), "resplit_timing": as_json(&retimed) });
    write_file(out, "diversion.json", &pretty(&doc))
}

/// Loads a scenario plus the network it points at (relative to its own dir).
fn load_scenario(path: &Path, seed: Option<u64>) -> Result<(Scenario, NetworkGraph), Failure> {
    let mut sc = Scenario::from_path(path).input()?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let g = NetworkGraph::from_path(&base.join(&sc.network)).input()?;
    Ok((sc, g))
}

fn sim_summary(log: &EventLog, sc: &Scenario) -> serde_json::Value {
    json!({
        "horizon_s": sc.horizon_s,
        "seed": sc.seed,
        "events": log.len(),
        "arrivals": log.count(EventKind::ExternalArrival),
        "admissions": log.iter().filter(|e| e.kind == EventKind::EnterLink && e.link_from.is_none()).count(),
        "exits": log.count(EventKind::ExitNetwork),
        "blocked": log.count(EventKind::Blocked),
        "phase_changes": log.count(EventKind::PhaseChange),
    })
}

fn cmd_simulate(scenario: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let (sc, g) = load_scenario(scenario, seed)?;
    let demands = sc.demands.clone().unwrap_or_else(|| g.demands().to_vec());
    let log = run(&g, &demands, &sc.sim_config()).input()?;
    write_file(out, "events.csv", &log.to_csv_string())?;
    write_file(out, "summary.json", &pretty(&sim_summary(&log, &sc)))?;
    println!(
        "{} events over {} s: {} arrivals, {} exits",
        log.len(),
        sc.horizon_s,
        log.count(EventKind::ExternalArrival),
        log.count(EventKind::ExitNetwork)
    );
    Ok(())
}

fn cmd_sweep(scenario: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let (sc, g) = load_scenario(scenario, seed)?;
    if sc.load_factors.is_empty() {
        return Err(Failure::Input("scenario has no load_factors to sweep".into()));
    }
    let demands = sc.demands.clone().unwrap_or_else(|| g.demands().to_vec());
    let segments = loading_sweep(&g, &demands, &sc.sim_config(), &sc.load_factors, sc.step_hours)
        .input()?;

    let step_s = sc.step_hours * 3600.0;
    let base_vph: f64 = demands
        .iter()
        .flat_map(|d| &d.entry_flows)
        .map(|e| e.flow_vph)
        .sum();
    let mut curve = String::from(
        "gamma,start_s,demand_vph,arrival_vph,departure_vph,mean_inside,final_inside,final_waiting\n",
    );
    let mut inside = 0i64;
    let mut waiting = 0i64;
    let mut steps = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        let gamma = sc.load_factors[i];
        let (t0, t1) = (i as f64 * step_s, (i + 1) as f64 * step_s);
        let (mut arrivals, mut exits) = (0u64, 0u64);
        let mut area = 0.0;
        let mut last = t0;
        for e in &seg.events {
            match e.kind {
                EventKind::ExternalArrival => {
                    arrivals += 1;
                    waiting += 1;
                }
                EventKind::EnterLink if e.link_from.is_none() => {
                    area += inside as f64 * (e.time - last);
                    last = e.time;
                    inside += 1;
                    waiting -= 1;
                }
                EventKind::ExitNetwork => {
                    area += inside as f64 * (e.time - last);
                    last = e.time;
                    inside -= 1;
                    exits += 1;
                }
                _ => {}
            }
        }
        area += inside as f64 * (t1 - last);
        let row = json!({
            "gamma": gamma,
            "start_s": t0,
            "demand_vph": gamma * base_vph,
            "arrival_vph": arrivals as f64 / sc.step_hours,
            "departure_vph": exits as f64 / sc.step_hours,
            "mean_inside": area / step_s,
            "final_inside": inside,
            "final_waiting": waiting,
        });
        let _ = writeln!(
            curve,
            "{gamma},{t0},{},{},{},{},{inside},{waiting}",
            gamma * base_vph,
            arrivals as f64 / sc.step_hours,
            exits as f64 / sc.step_hours,
            area / step_s
        );
        println!(
            "gamma {gamma}: demand {} vph, departures {} vph, {} inside at step end",
            gamma * base_vph,
            exits as f64 / sc.step_hours,
            inside
        );
        steps.push(row);
    }

    let full = EventLog {
        events: segments.into_iter().flat_map(|s| s.events).collect(),
    };
    write_file(out, "events.csv", &full.to_csv_string())?;
    write_file(out, "loading_curve.csv", &curve)?;
    let doc = json!({ "step_hours": sc.step_hours, "seed": sc.seed, "steps": steps });
    write_file(out, "summary.json", &pretty(&doc))
}

fn parse_pair(flag: &str, text: &str) -> Result<(String, String), Failure> {
    match text.split_once(':') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
        _ => Err(Failure::Input(format!("--{flag} wants `A:B`, got `{text}`"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_metrics(
    network: &Path,
    log_path: &Path,
    out: &Path,
    horizon_s: Option<f64>,
    bin_s: f64,
    route: Option<String>,
    window: Option<String>,
    mfd_links: Option<String>,
) -> Result<(), Failure> {
    let g = NetworkGraph::from_path(network).input()?;
    let text = fs::read_to_string(log_path)
        .map_err(|e| Failure::Input(format!("{}: {e}", log_path.display())))?;
    let log = EventLog::from_csv_str(&text).input()?;
    let horizon = match horizon_s {
        Some(h) => h,
        None => log.events.last().map(|e| e.time).unwrap_or(0.0),
    };
    if horizon <= 0.0 || !horizon.is_finite() {
        return Err(Failure::Input(format!("horizon {horizon} is empty")));
    }

    let trips = metrics::trips(&g, &log).input()?;
    let mut trips_csv = String::from(
        "vehicle,entry,exit,links,distance_miles,duration_s,speed_mph,arrived_s,entered_s,exited_s\n",
    );
    for t in &trips {
        let path = t.links.iter().map(|l| l.0.as_str()).collect::<Vec<_>>().join("|");
        let _ = writeln!(
            trips_csv,
            "{},{},{},{path},{},{},{},{},{},{}",
            t.vehicle,
            t.entry,
            t.exit,
            t.distance_miles,
            t.duration_s,
            t.speed_mph,
            t.arrived_s,
            t.entered_s,
            t.exited_s
        );
    }
    write_file(out, "trips.csv", &trips_csv)?;

    // Travel-time statistics, one row per entry→exit pair (or the one asked for).
    let pairs: Vec<(LinkId, LinkId)> = match &route {
        Some(arg) => {
            let (a, b) = parse_pair("route", arg)?;
            vec![(LinkId(a), LinkId(b))]
        }
        None => trips
            .iter()
            .map(|t| (t.entry.clone(), t.exit.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let mut route_csv =
        String::from("entry,exit,samples,mean_s,std_s,within_two_sigma,degenerate\n");
    let mut samples_csv = String::from("entry,exit,duration_s\n");
    let mut route_rows = Vec::new();
    for (entry, exit) in &pairs {
        let s = metrics::route_travel_times(&g, &log, entry, exit).input()?;
        let _ = writeln!(
            route_csv,
            "{entry},{exit},{},{},{},{},{}",
            s.samples.len(),
            s.mean_s,
            s.std_s,
            s.within_two_sigma,
            s.degenerate
        );
        for d in &s.samples {
            let _ = writeln!(samples_csv, "{entry},{exit},{d}");
        }
        route_rows.push(json!({
            "entry": entry, "exit": exit, "samples": s.samples.len(),
            "mean_s": s.mean_s, "std_s": s.std_s,
            "within_two_sigma": s.within_two_sigma, "degenerate": s.degenerate,
        }));
    }
    write_file(out, "route_times.csv", &route_csv)?;
    write_file(out, "route_samples.csv", &samples_csv)?;

    let vmt = metrics::vmt_vht_from_trips(&trips, horizon).compute()?;

    let excess = metrics::excess_green(&log, horizon).compute()?;
    let mut eg_csv = String::from("from,to,excess_green\n");
    for ((l, m), e) in &excess.per_phase {
        let _ = writeln!(eg_csv, "{l},{m},{e}");
    }
    write_file(out, "excess_green.csv", &eg_csv)?;
    let mut cdf_csv = String::from("excess_green,cum_probability\n");
    for (e, p) in &excess.cdf {
        let _ = writeln!(cdf_csv, "{e},{p}");
    }
    write_file(out, "excess_green_cdf.csv", &cdf_csv)?;

    let series = metrics::macro_series(&log, horizon, bin_s).compute()?;
    let mut macro_csv =
        String::from("t_s,entry_vph,admission_vph,departure_vph,waiting,inside\n");
    for (b, t) in series.t_s.iter().enumerate() {
        let _ = writeln!(
            macro_csv,
            "{t},{},{},{},{},{}",
            series.entry_rate_vph[b],
            series.admission_rate_vph[b],
            series.departure_rate_vph[b],
            series.waiting[b],
            series.inside[b]
        );
    }
    write_file(out, "macro.csv", &macro_csv)?;

    let (w0, w1) = match &window {
        Some(arg) => {
            let (a, b) = parse_pair("window", arg)?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Failure::Input(format!("--window wants numbers, got `{s}`")))
            };
            (parse(&a)?, parse(&b)?)
        }
        None => (0.0, horizon),
    };
    let littles = metrics::littles_check(&log, (w0, w1)).compute()?;

    let links: Vec<LinkId> = match &mfd_links {
        Some(list) => list.split(',').map(LinkId::from).collect(),
        None => g
            .links()
            .filter(|l| l.kind == LinkKind::Internal)
            .map(|l| l.id.clone())
            .collect(),
    };
    let mfd = metrics::mfd_aggregate(&g, &log, &links, bin_s, horizon).compute()?;
    let mut mfd_csv = String::from("t_s,flow_vph,occupancy\n");
    for p in &mfd {
        let _ = writeln!(mfd_csv, "{},{},{}", p.t_s, p.flow_vph, p.occupancy);
    }
    write_file(out, "mfd.csv", &mfd_csv)?;

    let summary = json!({
        "horizon_s": horizon,
        "bin_s": bin_s,
        "trips": vmt.trip_count,
        "excluded_boundary_trips": vmt.excluded_boundary_trips,
        "vmt_vht": {
            "vmt_per_hour": vmt.vmt_per_hour,
            "vht_per_hour": vmt.vht_per_hour,
            "network_speed_mph": vmt.network_speed_mph,
            "mean_distance_miles": vmt.mean_distance_miles,
            "mean_duration_s": vmt.mean_duration_s,
            "mean_speed_mph": vmt.mean_speed_mph,
            "speed_duration_correlation": vmt.speed_duration_correlation,
        },
        "littles": {
            "window": [w0, w1],
            "lambda_vph": littles.lambda_vph,
            "mean_entry_wait_s": littles.mean_entry_wait_s,
            "mean_sojourn_s": littles.mean_sojourn_s,
            "avg_waiting": littles.avg_waiting,
            "avg_inside": littles.avg_inside,
            "rel_err_waiting": littles.rel_err_waiting,
            "rel_err_inside": littles.rel_err_inside,
            "rel_err_total": littles.rel_err_total,
        },
        "excess_green": {
            "phases": excess.per_phase.len(),
            "never_actuated": excess.never_actuated,
        },
        "routes": route_rows,
    });
    write_file(out, "summary.json", &pretty(&summary))?;
    println!(
        "{} trips, {:.3} mph network speed, Little residuals {:.4}/{:.4}",
        vmt.trip_count, vmt.network_speed_mph, littles.rel_err_waiting, littles.rel_err_inside
    );
    Ok(())
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

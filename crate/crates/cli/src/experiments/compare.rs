//! Paired comparisons: edge against cloud execution, serverless against
//! serverful deployment, and microservices against a monolith recovering
//! from the same hotspot.

use microsim::management::{cost_report, serverless_run_windowed, CostReport, ServerlessConfig, StateStore};
use microsim::metrics::{ExportKind, RunResult};
use microsim::workload::{ArrivalProcess, WorkloadPlan};
use rayon::prelude::*;
use serde::Serialize;

use super::{
    aggregate_qos, best_point, run_one, search, set_protocol, topology, window_violates, RunRecord, Writer,
};
use crate::scenario::{parse_hotspot, Scenario};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeCloudSummary {
    pub tail_us: u64,
    pub loads_rps: Vec<f64>,
    pub edge_p99_us: Vec<u64>,
    pub cloud_p99_us: Vec<u64>,
    /// Highest rate at which the edge meets the tail target.
    pub edge_saturation_rps: f64,
    /// Highest rate at which the cloud meets the same target.
    pub cloud_max_rps: f64,
    pub throughput_ratio: f64,
}

pub(super) fn edge_vs_cloud(s: &Scenario, w: &mut Writer, runs: &mut Vec<RunRecord>) -> Result<EdgeCloudSummary, CliError> {
    let edge = topology(s)?;
    let mut cloud = s.param_topology("compare")?;
    if let Some(p) = s.protocol {
        set_protocol(&mut cloud, p);
    }
    let mut loads: Vec<f64> = s.params.list("loads")?;
    loads.sort_by(f64::total_cmp);
    let tail: u64 = s.params.get("tail_us")?;
    let bounds = s.params.search()?;
    let plan = s.workload.plan()?;
    let mut policy = s.policy.clone();
    policy.retain_traces = false;

    let cells: Vec<(bool, f64)> = [false, true]
        .iter()
        .flat_map(|&c| loads.iter().map(move |&l| (c, l)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(is_cloud, rate)| {
            let (t, name) = if is_cloud { (&cloud, "cloud") } else { (&edge, "edge") };
            let (r, rec) = run_one(&format!("{name}/r{rate}"), t, &plan.with_rate(rate), &policy, s.seed, s)?;
            Ok((r.p99().unwrap_or(u64::MAX), rec))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut edge_p99 = Vec::new();
    let mut cloud_p99 = Vec::new();
    for (&(is_cloud, _), (p99, rec)) in cells.iter().zip(results) {
        runs.push(rec);
        if is_cloud { &mut cloud_p99 } else { &mut edge_p99 }.push(p99);
    }
    let rows: Vec<Vec<String>> = loads
        .iter()
        .zip(edge_p99.iter().zip(&cloud_p99))
        .map(|(l, (e, c))| vec![l.to_string(), e.to_string(), c.to_string()])
        .collect();
    w.table("load_latency.csv", &["offered_rps", "edge_p99_us", "cloud_p99_us"], &rows)?;

    let searches = [(&edge, "edge"), (&cloud, "cloud")]
        .par_iter()
        .map(|&(t, name)| search(&format!("{name}/max"), t, &plan, &policy, tail, s.seed, bounds, s))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut maxima = Vec::new();
    for (o, recs) in searches {
        runs.extend(recs);
        maxima.push(best_point(&o).map_or(0.0, |p| p.offered_load));
    }
    w.table(
        "saturation.csv",
        &["deployment", "max_rps_under_tail"],
        &[
            vec!["edge".into(), maxima[0].to_string()],
            vec!["cloud".into(), maxima[1].to_string()],
        ],
    )?;
    Ok(EdgeCloudSummary {
        tail_us: tail,
        loads_rps: loads,
        edge_p99_us: edge_p99,
        cloud_p99_us: cloud_p99,
        edge_saturation_rps: maxima[0],
        cloud_max_rps: maxima[1],
        throughput_ratio: if maxima[0] > 0.0 { maxima[1] / maxima[0] } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepUp {
    pub at_us: u64,
    pub from_rps: f64,
    pub to_rps: f64,
    /// Violated window time before the next segment boundary.
    pub serverful_above_qos_us: u64,
    pub serverless_above_qos_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServerlessSummary {
    pub qos_p99_us: u64,
    pub s3_median_us: u64,
    pub memory_median_us: u64,
    pub step_ups: Vec<StepUp>,
    pub low_duty_rate_rps: f64,
    pub low_duty_cost: CostReport,
}

fn median(r: &RunResult) -> u64 {
    r.latency_percentile(50.0).unwrap_or(0)
}

/// Violated-window time inside `[from, to)`.
fn above_qos(r: &RunResult, qos: u64, from: u64, to: u64) -> u64 {
    r.e2e
        .iter()
        .filter(|e| e.t_us > from && e.t_us <= to && window_violates(e, qos))
        .count() as u64
        * r.window_us
}

pub(super) fn serverless(s: &Scenario, w: &mut Writer, runs: &mut Vec<RunRecord>) -> Result<ServerlessSummary, CliError> {
    let t = topology(s)?;
    let qos: u64 = s.params.get("qos_us")?;
    let low_rate: f64 = s.params.get("low_duty_rate")?;
    let steady: f64 = s.params.get_or("steady_rate", 100.0)?;
    let cfg = s.policy.serverless.clone().unwrap_or_default();
    let window = s.policy.window();
    let plan = s.workload.plan()?;
    let ArrivalProcess::Diurnal { segments } = &plan.arrivals else {
        return Err(CliError::Scenario("serverless_compare needs `arrivals = diurnal ...`".into()));
    };
    let segments = segments.clone();

    let store = |store: StateStore| ServerlessConfig {
        state_store: store,
        ..cfg.clone()
    };
    let steady_plan = plan.with_rate(steady);
    let low_plan = WorkloadPlan {
        arrivals: ArrivalProcess::Poisson { rate: low_rate },
        ..plan.clone()
    };
    let mut serverful = s.policy.clone();
    serverful.serverless = None;
    serverful.retain_traces = false;
    let mut fixed = serverful.clone();
    fixed.autoscaler = None;

    type Job<'a> = Box<dyn Fn() -> Result<RunResult, CliError> + Send + Sync + 'a>;
    let d = s.duration_us;
    let jobs: Vec<(&str, Job)> = vec![
        ("s3", Box::new(|| Ok(serverless_run_windowed(&t, &steady_plan, &store(StateStore::S3Like), s.seed, d, window)?))),
        ("memory", Box::new(|| Ok(serverless_run_windowed(&t, &steady_plan, &store(StateStore::RemoteMemory), s.seed, d, window)?))),
        ("diurnal_serverless", Box::new(|| Ok(serverless_run_windowed(&t, &plan, &cfg, s.seed, d, window)?))),
        ("diurnal_serverful", Box::new(|| Ok(microsim::run(&t, &plan, &serverful, s.seed, d, s.warmup_us)?))),
        ("low_duty_serverless", Box::new(|| Ok(serverless_run_windowed(&t, &low_plan, &cfg, s.seed, d, window)?))),
        ("low_duty_serverful", Box::new(|| Ok(microsim::run(&t, &low_plan, &fixed, s.seed, d, s.warmup_us)?))),
    ];
    let results = jobs.par_iter().map(|(_, j)| j()).collect::<Result<Vec<_>, CliError>>()?;
    for ((label, _), r) in jobs.iter().zip(&results) {
        runs.push(RunRecord::of(*label, r));
    }
    let [s3, memory, sl, sf, low_sl, low_sf] = <[RunResult; 6]>::try_from(results).expect("six jobs");

    w.export(&s3, ExportKind::Latency, "latency_s3.csv")?;
    w.export(&memory, ExportKind::Latency, "latency_memory.csv")?;
    w.e2e(&sl, "diurnal_serverless_e2e.csv")?;
    w.e2e(&sf, "diurnal_serverful_e2e.csv")?;
    w.export(&sf, ExportKind::ScaleTimeline, "diurnal_serverful_scale.csv")?;

    let mut step_ups = Vec::new();
    let mut start = 0;
    let mut k = 0;
    while start < d {
        let (len, rate) = segments[k % segments.len()];
        let prev = segments[(k + segments.len() - 1) % segments.len()].1;
        let end = (start + len).min(d);
        if rate > prev && start > 0 {
            step_ups.push(StepUp {
                at_us: start,
                from_rps: prev,
                to_rps: rate,
                serverful_above_qos_us: above_qos(&sf, qos, start, end),
                serverless_above_qos_us: above_qos(&sl, qos, start, end),
            });
        }
        start += len;
        k += 1;
    }
    let cost = cost_report(&low_sf, &low_sl, &cfg)?;
    Ok(ServerlessSummary {
        qos_p99_us: qos,
        s3_median_us: median(&s3),
        memory_median_us: median(&memory),
        step_ups,
        low_duty_rate_rps: low_rate,
        low_duty_cost: cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recovery {
    pub topology: String,
    pub qos_p99_us: u64,
    pub first_violation_us: Option<u64>,
    /// First window from which QoS holds for the rest of the run.
    pub restored_us: Option<u64>,
    pub recovery_us: Option<u64>,
    pub instances_added: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoverySummary {
    pub hotspot_service: String,
    pub hotspot_start_us: u64,
    pub hotspot_end_us: u64,
    pub runs: Vec<Recovery>,
}

pub(super) fn recovery(s: &Scenario, w: &mut Writer, runs: &mut Vec<RunRecord>) -> Result<RecoverySummary, CliError> {
    let hotspot = parse_hotspot(0, s.params.raw("hotspot")?)?;
    let main = topology(s)?;
    let mut other = s.param_topology("compare")?;
    if let Some(p) = s.protocol {
        set_protocol(&mut other, p);
    }
    let names = ["microservices", "monolith"];
    for t in [&main, &other] {
        if t.service(&hotspot.service).is_none() {
            return Err(CliError::Scenario(format!("hotspot service `{}` missing from a topology", hotspot.service)));
        }
    }
    let mut p = s.policy.clone();
    p.faults.hotspots.push(hotspot.clone());
    p.retain_traces = false;
    let plan = s.workload.plan()?;
    let results = [&main, &other]
        .par_iter()
        .zip(names.par_iter())
        .map(|(t, name)| run_one(name, t, &plan, &p, s.seed, s))
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut out = Vec::new();
    for ((t, name), (r, rec)) in [&main, &other].into_iter().zip(names).zip(results) {
        runs.push(rec);
        w.e2e(&r, &format!("{name}_e2e.csv"))?;
        w.export(&r, ExportKind::HeatmapLatency, &format!("{name}_latency.csv"))?;
        w.export(&r, ExportKind::ScaleTimeline, &format!("{name}_scale.csv"))?;
        let qos = aggregate_qos(t);
        let first = r
            .e2e
            .iter()
            .find(|e| e.t_us > hotspot.start && window_violates(e, qos))
            .map(|e| e.t_us);
        let restored = match r.e2e.iter().rposition(|e| window_violates(e, qos)) {
            Some(i) if i + 1 < r.e2e.len() => Some(r.e2e[i + 1].t_us),
            Some(_) => None,
            None => first,
        };
        let initial: u32 = t.services.values().map(|s| s.initial_instances).sum();
        let finals: u32 = r.series.values().filter_map(|x| x.last()).map(|x| x.instances).sum();
        out.push(Recovery {
            topology: name.to_string(),
            qos_p99_us: qos,
            first_violation_us: first,
            restored_us: restored,
            recovery_us: match (first, restored) {
                (Some(a), Some(b)) => Some(b.saturating_sub(a)),
                (None, _) => Some(0),
                _ => None,
            },
            instances_added: finals - initial,
        });
    }
    Ok(RecoverySummary {
        hotspot_service: hotspot.service,
        hotspot_start_us: hotspot.start,
        hotspot_end_us: hotspot.end,
        runs: out,
    })
}

use std::collections::BTreeMap;

use microsim::metrics::{goodput, CurvePoint, ExportKind};
use microsim::tracing::{per_tier_breakdown, write_jsonl};
use serde::Serialize;

use super::{aggregate_qos, best_point, run_one, search as search_rate, topology, RunRecord, Writer};
use crate::scenario::Scenario;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleRunSummary {
    pub qos_p99_us: u64,
    pub p50_us: u64,
    pub p99_us: u64,
    pub completion_rps: f64,
    pub goodput_rps: f64,
    /// Share of request time spent in each service, from the traces.
    pub breakdown: BTreeMap<String, f64>,
}

pub(super) fn single_run(s: &Scenario, w: &mut Writer, runs: &mut Vec<RunRecord>) -> Result<SingleRunSummary, CliError> {
    let t = topology(s)?;
    let (r, rec) = run_one("run", &t, &s.workload.plan()?, &s.policy, s.seed, s)?;
    runs.push(rec);
    w.export(&r, ExportKind::Latency, "latency.csv")?;
    w.export(&r, ExportKind::HeatmapLatency, "heatmap_latency.csv")?;
    w.export(&r, ExportKind::HeatmapUtil, "heatmap_util.csv")?;
    w.export(&r, ExportKind::ScaleTimeline, "scale_timeline.csv")?;
    w.e2e(&r, "e2e.csv")?;
    if !r.traces.is_empty() {
        let mut buf = Vec::new();
        write_jsonl(&r.traces, &mut buf).map_err(|e| CliError::Scenario(e.to_string()))?;
        w.text("traces.jsonl", &String::from_utf8(buf).expect("json is utf-8"))?;
    }
    let breakdown = if r.traces.is_empty() {
        BTreeMap::new()
    } else {
        per_tier_breakdown(&r.traces).map_err(|e| CliError::Scenario(e.to_string()))?
    };
    let qos = r.aggregate_qos();
    Ok(SingleRunSummary {
        qos_p99_us: qos,
        p50_us: r.latency_percentile(50.0).unwrap_or(0),
        p99_us: r.p99().unwrap_or(0),
        completion_rps: r.completion_rate(),
        goodput_rps: goodput(&r, qos),
        breakdown,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchSummary {
    pub qos_p99_us: u64,
    /// Highest offered rate that met QoS, 0 if none did.
    pub max_rate_rps: f64,
    pub probes: usize,
}

pub(super) fn search(s: &Scenario, w: &mut Writer, runs: &mut Vec<RunRecord>) -> Result<SearchSummary, CliError> {
    let t = topology(s)?;
    let qos = s.params.get_or("qos_us", aggregate_qos(&t))?;
    let (outcome, records) = search_rate("search", &t, &s.workload.plan()?, &s.policy, qos, s.seed, s.params.search()?, s)?;
    runs.extend(records);
    let points: Vec<CurvePoint> = outcome
        .probes
        .iter()
        .enumerate()
        .map(|(i, p)| CurvePoint {
            x: i as f64,
            offered_rps: p.offered_load,
            goodput_rps: p.goodput,
            p99_us: p.p99_us,
        })
        .collect();
    w.curve(&points, "goodput_curve.csv")?;
    Ok(SearchSummary {
        qos_p99_us: qos,
        max_rate_rps: best_point(&outcome).map_or(0.0, |p| p.offered_load),
        probes: outcome.probes.len(),
    })
}

//! Case A: a genuinely saturated front-end behind pipelined RPCs. Case B:
//! the same tiers over HTTP/1.1 with a one-connection pool to the cache, so
//! front-end cores sit blocked on a lightly loaded downstream. A third run
//! widens that pool.

use microsim::metrics::ExportKind;
use microsim::topology::Protocol;
use rayon::prelude::*;
use serde::Serialize;

use super::{first_scale_out, mean_util, run_one, set_protocol, topology, window_violates, windows_to_recover, RunRecord, Writer};
use crate::scenario::Scenario;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseSummary {
    pub label: String,
    pub protocol: Protocol,
    pub downstream_pool: u32,
    pub rate_rps: f64,
    pub qos_p99_us: u64,
    pub p99_us: u64,
    /// When the first added front-end instance came online.
    pub first_scale_us: Option<u64>,
    pub frontend_instances_final: u32,
    /// Mean utilizations after warmup and before the first scale-out.
    pub frontend_util: f64,
    pub downstream_util: f64,
    pub violated_windows_after_scale: usize,
    /// See [`windows_to_recover`]; `None` if QoS never settles.
    pub windows_to_recover: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackpressureSummary {
    pub frontend: String,
    pub downstream: String,
    pub window_us: u64,
    pub case_a: CaseSummary,
    pub case_b: CaseSummary,
    pub case_b_wide_pool: CaseSummary,
}

pub(super) fn run(s: &Scenario, w: &mut Writer, runs: &mut Vec<RunRecord>) -> Result<BackpressureSummary, CliError> {
    let base = topology(s)?;
    let downstream: String = s.params.get("downstream")?;
    if base.service(&downstream).is_none() {
        return Err(CliError::Scenario(format!("downstream `{downstream}` is not in the topology")));
    }
    let frontend = base.classes[0].root.target.clone();
    let blocked: u32 = s.params.get("blocked_pool")?;
    let healthy: u32 = s.params.get("healthy_pool")?;
    let cases = [
        ("case_a", Protocol::RpcPipelined, healthy, s.params.get::<f64>("case_a_rate")?),
        ("case_b", Protocol::Http1Blocking, blocked, s.params.get("case_b_rate")?),
        ("case_b_wide_pool", Protocol::Http1Blocking, healthy, s.params.get("case_b_rate")?),
    ];
    let plan = s.workload.plan()?;
    let results = cases
        .par_iter()
        .map(|&(label, protocol, pool, rate)| {
            let mut t = base.clone();
            set_protocol(&mut t, protocol);
            let mut p = s.policy.clone();
            p.pool_overrides.insert(downstream.clone(), pool);
            p.retain_traces = false;
            run_one(label, &t, &plan.with_rate(rate), &p, s.seed, s)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut summaries = Vec::new();
    for ((label, protocol, pool, rate), (r, rec)) in cases.into_iter().zip(results) {
        runs.push(rec);
        w.export(&r, ExportKind::HeatmapUtil, &format!("{label}_util.csv"))?;
        w.export(&r, ExportKind::HeatmapLatency, &format!("{label}_latency.csv"))?;
        w.export(&r, ExportKind::ScaleTimeline, &format!("{label}_scale.csv"))?;
        w.e2e(&r, &format!("{label}_e2e.csv"))?;
        let qos = r.aggregate_qos();
        let scaled = first_scale_out(&r, &frontend);
        let until = scaled.unwrap_or(r.duration_us);
        let after = scaled.unwrap_or(u64::MAX);
        summaries.push(CaseSummary {
            label: label.to_string(),
            protocol,
            downstream_pool: pool,
            rate_rps: rate,
            qos_p99_us: qos,
            p99_us: r.p99().unwrap_or(0),
            first_scale_us: scaled,
            frontend_instances_final: r.series[&frontend].last().map_or(0, |t| t.instances),
            frontend_util: mean_util(&r, &frontend, r.warmup_us, until),
            downstream_util: mean_util(&r, &downstream, r.warmup_us, until),
            violated_windows_after_scale: r.e2e.iter().filter(|e| e.t_us > after && window_violates(e, qos)).count(),
            windows_to_recover: windows_to_recover(&r, qos, scaled.unwrap_or(0)),
        });
    }
    let mut it = summaries.into_iter();
    Ok(BackpressureSummary {
        frontend,
        downstream,
        window_us: s.policy.window(),
        case_a: it.next().expect("three cases"),
        case_b: it.next().expect("three cases"),
        case_b_wide_pool: it.next().expect("three cases"),
    })
}

//! A back-end hotspot and the order in which tiers above it start missing
//! their per-service latency targets.

use microsim::metrics::ExportKind;
use serde::Serialize;

use super::{run_one, topology, RunRecord, Writer};
use crate::scenario::Scenario;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TierOnset {
    pub service: String,
    /// Mean per-window span p99 before the hotspot.
    pub baseline_p99_us: u64,
    /// First window after the hotspot whose p99 exceeds the threshold.
    pub first_violation_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadingSummary {
    pub hotspot_service: String,
    pub hotspot_start_us: u64,
    pub threshold_factor: f64,
    /// Back-end first.
    pub chain: Vec<TierOnset>,
    /// Every tier violated and onsets never go backwards up the chain.
    pub non_decreasing: bool,
    pub distinct_onsets: usize,
}

pub(super) fn run(s: &Scenario, w: &mut Writer, runs: &mut Vec<RunRecord>) -> Result<CascadingSummary, CliError> {
    let t = topology(s)?;
    let hotspot = s
        .policy
        .faults
        .hotspots
        .first()
        .ok_or_else(|| CliError::Scenario("cascading needs a `fault.hotspot` policy".into()))?
        .clone();
    let chain: Vec<String> = s.params.list("chain")?;
    if let Some(bad) = chain.iter().find(|c| t.service(c).is_none()) {
        return Err(CliError::Scenario(format!("chain service `{bad}` is not in the topology")));
    }
    let factor: f64 = s.params.get("threshold_factor")?;

    let (r, rec) = run_one("hotspot", &t, &s.workload.plan()?, &s.policy, s.seed, s)?;
    runs.push(rec);
    w.export(&r, ExportKind::HeatmapLatency, "heatmap_latency.csv")?;
    w.export(&r, ExportKind::HeatmapUtil, "heatmap_util.csv")?;
    w.e2e(&r, "e2e.csv")?;

    let t0 = hotspot.start;
    let onsets: Vec<TierOnset> = chain
        .iter()
        .map(|svc| {
            let series = &r.series[svc];
            let before: Vec<u64> = series
                .iter()
                .filter(|x| x.t_us > r.warmup_us && x.t_us <= t0 && x.p99_us > 0)
                .map(|x| x.p99_us)
                .collect();
            let baseline = if before.is_empty() {
                0
            } else {
                before.iter().sum::<u64>() / before.len() as u64
            };
            let limit = factor * baseline as f64;
            TierOnset {
                service: svc.clone(),
                baseline_p99_us: baseline,
                first_violation_us: series
                    .iter()
                    .find(|x| x.t_us > t0 && x.p99_us as f64 > limit)
                    .map(|x| x.t_us),
            }
        })
        .collect();
    let times: Option<Vec<u64>> = onsets.iter().map(|o| o.first_violation_us).collect();
    let (non_decreasing, distinct) = match &times {
        Some(ts) => {
            let mut d = ts.clone();
            d.dedup();
            (ts.windows(2).all(|p| p[0] <= p[1]), d.len())
        }
        None => (false, 0),
    };
    Ok(CascadingSummary {
        hotspot_service: hotspot.service,
        hotspot_start_us: t0,
        threshold_factor: factor,
        chain: onsets,
        non_decreasing,
        distinct_onsets: distinct,
    })
}

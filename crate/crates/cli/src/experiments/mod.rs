//! The experiments a scenario can name. Each writes its artifacts into the
//! output directory and returns a [`Report`] whose summary is also written
//! as `summary.json`.

mod backpressure;
mod cascading;
mod compare;
mod single;
mod sweeps;

use std::fs;
use std::path::{Path, PathBuf};

use microsim::management::PolicySet;
use microsim::metrics::{
    export_csv, goodput, goodput_search_with, probe_seed, write_goodput_curve, Counters, CurvePoint, ExportKind,
    GoodputPoint, MetricsError, SearchOutcome,
};
use microsim::topology::{CallNode, Protocol, Topology};
use microsim::tracing::{critical_path_length, per_tier_breakdown};
use microsim::workload::WorkloadPlan;
use microsim::{run, RunResult};
use serde::Serialize;

pub use backpressure::{BackpressureSummary, CaseSummary};
pub use cascading::{CascadingSummary, TierOnset};
pub use compare::{EdgeCloudSummary, Recovery, RecoverySummary, ServerlessSummary, StepUp};
pub use single::{SearchSummary, SingleRunSummary};
pub use sweeps::{FreqSweepSummary, FreqTopologySummary, SkewSummary, SlowCurve, SlowServerSummary, SweepPoint};

use crate::scenario::{Experiment, Scenario};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum Summary {
    SingleRun(SingleRunSummary),
    Backpressure(BackpressureSummary),
    Cascading(CascadingSummary),
    FreqSweep(FreqSweepSummary),
    SkewSweep(SkewSummary),
    SlowServerSweep(SlowServerSummary),
    EdgeVsCloud(EdgeCloudSummary),
    ServerlessCompare(ServerlessSummary),
    RecoveryCompare(RecoverySummary),
    GoodputSearch(SearchSummary),
}

/// Bookkeeping for one engine run inside an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub config_digest: String,
    pub counters: Counters,
    pub traces: usize,
    /// Traces whose critical path differs from their root span.
    pub critical_path_mismatches: usize,
    /// Sum of the per-tier breakdown fractions, when traces were kept.
    pub breakdown_sum: Option<f64>,
}

impl RunRecord {
    pub fn of(label: impl Into<String>, r: &RunResult) -> Self {
        let mismatches = r
            .traces
            .iter()
            .filter(|t| match (critical_path_length(t), t.latency()) {
                (Ok(cp), Some(root)) => cp != root,
                _ => true,
            })
            .count();
        let breakdown_sum = if r.traces.is_empty() {
            None
        } else {
            per_tier_breakdown(&r.traces).ok().map(|m| m.values().sum())
        };
        RunRecord {
            label: label.into(),
            seed: r.seed,
            config_digest: r.config_digest.clone(),
            counters: r.counters,
            traces: r.traces.len(),
            critical_path_mismatches: mismatches,
            breakdown_sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub experiment: Experiment,
    pub out_dir: PathBuf,
    /// Files written, in write order.
    pub artifacts: Vec<PathBuf>,
    pub runs: Vec<RunRecord>,
    pub summary: Summary,
}

/// Runs the scenario's experiment, writing artifacts under `out`.
pub fn run_experiment(s: &Scenario, out: &Path) -> Result<Report, CliError> {
    s.check()?;
    let mut w = Writer::new(out)?;
    let mut runs = Vec::new();
    let summary = match s.experiment {
        Experiment::SingleRun => Summary::SingleRun(single::single_run(s, &mut w, &mut runs)?),
        Experiment::GoodputSearch => Summary::GoodputSearch(single::search(s, &mut w, &mut runs)?),
        Experiment::Backpressure => Summary::Backpressure(backpressure::run(s, &mut w, &mut runs)?),
        Experiment::Cascading => Summary::Cascading(cascading::run(s, &mut w, &mut runs)?),
        Experiment::FreqSweep => Summary::FreqSweep(sweeps::freq(s, &mut w, &mut runs)?),
        Experiment::SkewSweep => Summary::SkewSweep(sweeps::skew(s, &mut w, &mut runs)?),
        Experiment::SlowServerSweep => Summary::SlowServerSweep(sweeps::slow_servers(s, &mut w, &mut runs)?),
        Experiment::EdgeVsCloud => Summary::EdgeVsCloud(compare::edge_vs_cloud(s, &mut w, &mut runs)?),
        Experiment::ServerlessCompare => Summary::ServerlessCompare(compare::serverless(s, &mut w, &mut runs)?),
        Experiment::RecoveryCompare => Summary::RecoveryCompare(compare::recovery(s, &mut w, &mut runs)?),
    };
    let body = serde_json::to_string_pretty(&SummaryFile {
        experiment: s.experiment,
        seed: s.seed,
        duration_us: s.duration_us,
        summary: &summary,
        runs: &runs,
    })
    .expect("summaries always serialize");
    w.text("summary.json", &(body + "\n"))?;
    Ok(Report {
        experiment: s.experiment,
        out_dir: out.to_path_buf(),
        artifacts: w.files,
        runs,
        summary,
    })
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    experiment: Experiment,
    seed: u64,
    duration_us: u64,
    summary: &'a Summary,
    runs: &'a [RunRecord],
}

/// Artifact writer for one output directory.
pub(crate) struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    pub(crate) fn export(&mut self, r: &RunResult, kind: ExportKind, name: &str) -> Result<(), CliError> {
        let p = self.path(name);
        export_csv(r, kind, &p).map_err(|e| metrics_io(&p, e))
    }

    pub(crate) fn curve(&mut self, points: &[CurvePoint], name: &str) -> Result<(), CliError> {
        let p = self.path(name);
        write_goodput_curve(points, &p).map_err(|e| metrics_io(&p, e))
    }

    pub(crate) fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))
    }

    /// Plain CSV with a header row.
    pub(crate) fn table<S: AsRef<str>>(&mut self, name: &str, header: &[S], rows: &[Vec<String>]) -> Result<(), CliError> {
        let p = self.path(name);
        let mut out = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
        out.write_record(header.iter().map(AsRef::as_ref)).map_err(|e| csv_err(&p, e))?;
        for row in rows {
            out.write_record(row).map_err(|e| csv_err(&p, e))?;
        }
        out.flush().map_err(|e| io_err(&p, e))
    }

    /// Per-window end-to-end series of a run.
    pub(crate) fn e2e(&mut self, r: &RunResult, name: &str) -> Result<(), CliError> {
        let rows: Vec<Vec<String>> = r
            .e2e
            .iter()
            .map(|e| {
                vec![
                    e.t_us.to_string(),
                    e.arrivals.to_string(),
                    e.completions.to_string(),
                    e.drops.to_string(),
                    e.p99_us.to_string(),
                ]
            })
            .collect();
        self.table(name, &["t_us", "arrivals", "completions", "drops", "p99_us"], &rows)
    }
}

fn io_err(p: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: p.display().to_string(),
        source,
    }
}

fn csv_err(p: &Path, e: csv::Error) -> CliError {
    io_err(p, std::io::Error::other(e))
}

fn metrics_io(p: &Path, e: MetricsError) -> CliError {
    match e {
        MetricsError::Io(source) => io_err(p, source),
        MetricsError::Csv(e) => csv_err(p, e),
        other => other.into(),
    }
}

/// The scenario's topology with any protocol override applied.
pub(crate) fn topology(s: &Scenario) -> Result<Topology, CliError> {
    let mut t = s.topology.load()?;
    if let Some(p) = s.protocol {
        set_protocol(&mut t, p);
    }
    Ok(t)
}

/// Rewrites every call edge (not the client's entry call) to `p`.
pub(crate) fn set_protocol(t: &mut Topology, p: Protocol) {
    fn walk(n: &mut CallNode, p: Protocol) {
        for c in &mut n.children {
            c.protocol = p;
            walk(c, p);
        }
    }
    for class in &mut t.classes {
        walk(&mut class.root, p);
    }
}

/// Multiplies every service's instance counts.
pub(crate) fn scale_out(t: &mut Topology, factor: u32) {
    for s in t.services.values_mut() {
        s.initial_instances *= factor;
        s.max_instances *= factor;
    }
}

/// Aggregate p99 target of a topology: class targets weighted by class mix.
pub(crate) fn aggregate_qos(t: &Topology) -> u64 {
    let total: f64 = t.classes.iter().map(|c| c.weight).sum();
    (t.classes
        .iter()
        .map(|c| c.qos_target_p99 as f64 * c.weight)
        .sum::<f64>()
        / total)
        .round() as u64
}

/// One deterministic run plus its record.
pub(crate) fn run_one(
    label: &str,
    t: &Topology,
    w: &WorkloadPlan,
    p: &PolicySet,
    seed: u64,
    s: &Scenario,
) -> Result<(RunResult, RunRecord), CliError> {
    let r = run(t, w, p, seed, s.duration_us, s.warmup_us)?;
    let rec = RunRecord::of(label, &r);
    Ok((r, rec))
}

/// Bisection over Poisson rate; a search that finds nothing feasible
/// reports rate 0 rather than failing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn search(
    label: &str,
    t: &Topology,
    w: &WorkloadPlan,
    p: &PolicySet,
    qos: u64,
    seed: u64,
    bounds: (f64, f64, f64),
    s: &Scenario,
) -> Result<(SearchOutcome, Vec<RunRecord>), CliError> {
    let mut records = Vec::new();
    let mut p = p.clone();
    p.retain_traces = false;
    let outcome = goodput_search_with(bounds.0, bounds.1, bounds.2, |i, rate| {
        let r = run(t, &w.with_rate(rate), &p, probe_seed(seed, i), s.duration_us, s.warmup_us)?;
        records.push(RunRecord::of(format!("{label}/probe{i}"), &r));
        let g = goodput(&r, qos);
        Ok(GoodputPoint {
            offered_load: rate,
            goodput: g,
            qos_met: g > 0.0,
            p99_us: r.p99().unwrap_or(0),
        })
    });
    match outcome {
        Ok(o) => Ok((o, records)),
        Err(MetricsError::NoFeasibleRate { .. }) => Ok((
            SearchOutcome {
                rate: 0.0,
                probes: Vec::new(),
            },
            records,
        )),
        Err(e) => Err(e.into()),
    }
}

/// Goodput of the best probe of a search (0 when nothing was feasible).
pub(crate) fn best_point(o: &SearchOutcome) -> Option<&GoodputPoint> {
    o.probes.iter().filter(|p| p.qos_met).max_by(|a, b| a.offered_load.total_cmp(&b.offered_load))
}

/// Whether a window misses `qos`: its p99 is over target, or requests
/// arrived and none completed.
pub(crate) fn window_violates(e: &microsim::metrics::EndToEndTick, qos: u64) -> bool {
    e.p99_us > qos || (e.completions == 0 && e.arrivals > 0)
}

/// Windows after `from` until QoS holds for good: the count of ticks in
/// `(from, t]` where `t` is the first tick from which every later tick meets
/// `qos`. `None` if QoS is still violated in the last window.
pub(crate) fn windows_to_recover(r: &RunResult, qos: u64, from: u64) -> Option<usize> {
    let settled = match r.e2e.iter().rposition(|e| window_violates(e, qos)) {
        None => 0,
        Some(i) if i + 1 == r.e2e.len() => return None,
        Some(i) => i + 1,
    };
    Some(r.e2e.iter().take(settled + 1).filter(|e| e.t_us > from).count())
}

/// First service instance-count change after time zero.
pub(crate) fn first_scale_out(r: &RunResult, service: &str) -> Option<u64> {
    r.scale_timeline
        .iter()
        .find(|e| e.t_us > 0 && e.service == service)
        .map(|e| e.t_us)
}

/// Mean utilization of `service` over ticks in `(from, to]`.
pub(crate) fn mean_util(r: &RunResult, service: &str, from: u64, to: u64) -> f64 {
    let ticks: Vec<f64> = r.series[service]
        .iter()
        .filter(|t| t.t_us > from && t.t_us <= to)
        .map(|t| t.utilization)
        .collect();
    if ticks.is_empty() {
        0.0
    } else {
        ticks.iter().sum::<f64>() / ticks.len() as f64
    }
}

pub(crate) fn fmt_f(x: f64) -> String {
    format!("{x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use microsim::metrics::EndToEndTick;

    fn with_ticks(p99s: &[u64]) -> RunResult {
        let mut r = microsim::run(
            &microsim::preset("two_tier").unwrap(),
            &WorkloadPlan::poisson(1.0),
            &PolicySet::default(),
            1,
            1_000_000,
            0,
        )
        .unwrap();
        r.e2e = p99s
            .iter()
            .enumerate()
            .map(|(k, &p99_us)| EndToEndTick {
                t_us: (k as u64 + 1) * 10,
                arrivals: 1,
                completions: 1,
                drops: 0,
                p99_us,
            })
            .collect();
        r
    }

    #[test]
    fn recovery_counts_windows_after_the_trigger() {
        let r = with_ticks(&[1, 9, 9, 9, 1, 1]);
        // last violation at t=40; first settled tick is t=50
        assert_eq!(windows_to_recover(&r, 5, 20), Some(3));
        assert_eq!(windows_to_recover(&r, 5, 60), Some(0));
        assert_eq!(windows_to_recover(&with_ticks(&[1, 1]), 5, 0), Some(1));
        assert_eq!(windows_to_recover(&with_ticks(&[1, 9]), 5, 0), None);
    }

    #[test]
    fn protocol_override_leaves_entry_call() {
        let mut t = microsim::preset("social_network").unwrap();
        set_protocol(&mut t, Protocol::RpcPipelined);
        for c in &t.classes {
            assert_eq!(c.root.protocol, Protocol::RpcPipelined);
            for child in &c.root.children {
                child.walk(&mut |n| assert_eq!(n.protocol, Protocol::RpcPipelined));
            }
        }
    }
}

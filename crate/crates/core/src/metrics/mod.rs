//! Run results, goodput and deterministic CSV/JSON output.

mod export;
mod goodput;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use export::{export_csv, read_matrix_csv, write_goodput_curve, CurvePoint, ExportKind};
pub use goodput::{goodput, goodput_search, goodput_search_with, probe_seed, GoodputPoint, SearchOutcome};

use crate::tracing::{percentile_in_place, Trace};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no probed rate met QoS; even {lo} req/s violated it")]
    NoFeasibleRate { lo: f64 },
    #[error("search bounds must satisfy 0 < lo < hi and tol > 0 (lo {lo}, hi {hi}, tol {tol})")]
    BadBounds { lo: f64, hi: f64, tol: f64 },
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One service at one monitor tick. Values cover the window ending at `t_us`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickSample {
    pub t_us: u64,
    pub utilization: f64,
    /// p99 of span durations finishing in the window, 0 if none did.
    pub p99_us: u64,
    pub queue_len: u64,
    pub instances: u32,
}

/// End-to-end view of one monitor window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndToEndTick {
    pub t_us: u64,
    pub arrivals: u64,
    pub completions: u64,
    pub drops: u64,
    /// p99 of requests completing in the window, 0 if none did.
    pub p99_us: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub arrivals: u64,
    pub completions: u64,
    pub drops: u64,
    pub in_flight_at_end: u64,
}

impl Counters {
    pub fn conserved(&self) -> bool {
        self.arrivals == self.completions + self.drops + self.in_flight_at_end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleEvent {
    pub t_us: u64,
    pub service: String,
    pub instances: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    /// Instance-µs each service kept online.
    pub instance_us: BTreeMap<String, u64>,
    /// Memory-weighted function execution time.
    pub function_gb_s: f64,
    pub function_invocations: u64,
    pub cold_starts: u64,
}

impl CostLedger {
    pub fn instance_hours(&self) -> f64 {
        self.instance_us.values().sum::<u64>() as f64 / 3.6e9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub config_digest: String,
    pub duration_us: u64,
    pub warmup_us: u64,
    pub window_us: u64,
    /// Class name → p99 target.
    pub qos_p99_us: BTreeMap<String, u64>,
    /// Class name → weight.
    pub class_weights: BTreeMap<String, f64>,
    /// End-to-end latencies of requests arriving at or after warmup, in
    /// completion order.
    pub latencies: BTreeMap<String, Vec<u64>>,
    /// Age at the end of the run of each post-warmup request still in
    /// flight. Percentiles count these as lower bounds on their latency, so
    /// a backlog that never drains cannot hide from the tail.
    #[serde(default)]
    pub unfinished_us: BTreeMap<String, Vec<u64>>,
    /// Service names, back-end first.
    pub services: Vec<String>,
    pub series: BTreeMap<String, Vec<TickSample>>,
    pub e2e: Vec<EndToEndTick>,
    pub counters: Counters,
    pub scale_timeline: Vec<ScaleEvent>,
    pub cost: CostLedger,
    pub traces: Vec<Trace>,
}

impl RunResult {
    /// Every latency sample across classes.
    pub fn all_latencies(&self) -> Vec<u64> {
        self.latencies.values().flatten().copied().collect()
    }

    pub fn sample_count(&self) -> usize {
        self.latencies.values().map(Vec::len).sum()
    }

    /// Aggregate percentile over every class, unfinished requests included,
    /// `None` without samples.
    pub fn latency_percentile(&self, p: f64) -> Option<u64> {
        let mut all = self.all_latencies();
        all.extend(self.unfinished_us.values().flatten());
        percentile_in_place(&mut all, p).ok()
    }

    pub fn p99(&self) -> Option<u64> {
        self.latency_percentile(99.0)
    }

    pub fn class_p99(&self, class: &str) -> Option<u64> {
        let mut v = self.latencies.get(class)?.clone();
        v.extend(self.unfinished_us.get(class).into_iter().flatten());
        percentile_in_place(&mut v, 99.0).ok()
    }

    /// Every class with samples is at or under its own p99 target. Stricter
    /// than the aggregate test when classes differ widely in latency.
    pub fn meets_class_qos(&self) -> bool {
        self.sample_count() > 0
            && self
                .qos_p99_us
                .iter()
                .all(|(c, &q)| self.class_p99(c).is_none_or(|p| p <= q))
    }

    pub fn mean_latency(&self) -> Option<f64> {
        let n = self.sample_count();
        (n > 0).then(|| self.latencies.values().flatten().map(|&v| v as f64).sum::<f64>() / n as f64)
    }

    /// Weight-averaged class targets: the single p99 target used for
    /// aggregate goodput.
    pub fn aggregate_qos(&self) -> u64 {
        let total: f64 = self.class_weights.values().sum();
        if total <= 0.0 {
            return self.qos_p99_us.values().copied().min().unwrap_or(0);
        }
        (self
            .qos_p99_us
            .iter()
            .map(|(c, &q)| q as f64 * self.class_weights.get(c).copied().unwrap_or(0.0))
            .sum::<f64>()
            / total)
            .round() as u64
    }

    pub fn completion_rate(&self) -> f64 {
        self.counters.completions as f64 / (self.duration_us as f64 / 1e6)
    }

    /// Ticks whose end-to-end p99 exceeds `qos`, in time order.
    pub fn violated_ticks(&self, qos: u64) -> Vec<u64> {
        self.e2e.iter().filter(|e| e.p99_us > qos).map(|e| e.t_us).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run results always serialize")
    }
}

use serde::{Deserialize, Serialize};

use super::{MetricsError, RunResult};
use crate::engine::{run, splitmix64};
use crate::management::PolicySet;
use crate::topology::Topology;
use crate::workload::WorkloadPlan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodputPoint {
    pub offered_load: f64,
    pub goodput: f64,
    pub qos_met: bool,
    pub p99_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Largest probed rate that met QoS.
    pub rate: f64,
    /// Every probe in the order it ran.
    pub probes: Vec<GoodputPoint>,
}

/// Completion rate over the whole run if the aggregate p99 meets `qos_p99`,
/// otherwise 0. A run without latency samples has no goodput.
pub fn goodput(r: &RunResult, qos_p99: u64) -> f64 {
    match r.p99() {
        Some(p99) if p99 <= qos_p99 => r.completion_rate(),
        _ => 0.0,
    }
}

/// Seed of the `index`-th probe of a search seeded with `seed`.
pub fn probe_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 + 1))
}

/// Bisection over offered load. `lo` is presumed feasible and `hi`
/// infeasible; probes stop once the bracket is within `tol` of `lo`. If no
/// probe meets QoS, `lo` itself is probed last and must.
pub fn goodput_search_with<F>(lo: f64, hi: f64, tol: f64, mut probe: F) -> Result<SearchOutcome, MetricsError>
where
    F: FnMut(usize, f64) -> Result<GoodputPoint, MetricsError>,
{
    if !(lo > 0.0 && lo < hi && tol > 0.0 && hi.is_finite()) {
        return Err(MetricsError::BadBounds { lo, hi, tol });
    }
    let (mut a, mut b) = (lo, hi);
    let mut probes = Vec::new();
    let mut best: Option<f64> = None;
    while b - a > tol * a {
        let mid = 0.5 * (a + b);
        let pt = probe(probes.len(), mid)?;
        probes.push(pt);
        if pt.qos_met {
            a = mid;
            best = Some(mid);
        } else {
            b = mid;
        }
    }
    if best.is_none() {
        let pt = probe(probes.len(), lo)?;
        probes.push(pt);
        if !pt.qos_met {
            return Err(MetricsError::NoFeasibleRate { lo });
        }
        best = Some(lo);
    }
    Ok(SearchOutcome {
        rate: best.expect("set above"),
        probes,
    })
}

/// [`goodput_search_with`] where each probe is a fresh Poisson run of the
/// workload template at the probed rate.
#[allow(clippy::too_many_arguments)]
pub fn goodput_search(
    t: &Topology,
    template: &WorkloadPlan,
    p: &PolicySet,
    qos_p99: u64,
    seed: u64,
    (lo, hi, tol): (f64, f64, f64),
    duration: u64,
    warmup: u64,
) -> Result<SearchOutcome, MetricsError> {
    goodput_search_with(lo, hi, tol, |i, rate| {
        let r = run(t, &template.with_rate(rate), p, probe_seed(seed, i), duration, warmup)?;
        let g = goodput(&r, qos_p99);
        Ok(GoodputPoint {
            offered_load: rate,
            goodput: g,
            qos_met: g > 0.0,
            p99_us: r.p99().unwrap_or(0),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Counters;
    use std::collections::BTreeMap;

    fn result(samples: Vec<u64>, completions: u64, duration_us: u64) -> RunResult {
        RunResult {
            seed: 0,
            config_digest: String::new(),
            duration_us,
            warmup_us: 0,
            window_us: duration_us,
            qos_p99_us: BTreeMap::new(),
            class_weights: BTreeMap::new(),
            latencies: BTreeMap::from([("c".to_string(), samples)]),
            unfinished_us: BTreeMap::new(),
            services: vec![],
            series: BTreeMap::new(),
            e2e: vec![],
            counters: Counters {
                arrivals: completions,
                completions,
                drops: 0,
                in_flight_at_end: 0,
            },
            scale_timeline: vec![],
            cost: Default::default(),
            traces: vec![],
        }
    }

    #[test]
    fn binary_goodput() {
        let r = result(vec![100; 10_000], 10_000, 10_000_000);
        assert_eq!(goodput(&r, 200), 1000.0);
        assert_eq!(goodput(&r, 99), 0.0);
        assert_eq!(goodput(&r, 100), 1000.0);
        assert_eq!(goodput(&result(vec![], 0, 1_000_000), 100), 0.0);
    }

    #[test]
    fn class_qos_checks_each_class() {
        let mut r = result(vec![100; 100], 200, 1_000_000);
        r.latencies.insert("d".into(), vec![300; 100]);
        r.qos_p99_us = BTreeMap::from([("c".into(), 150), ("d".into(), 400)]);
        assert!(r.meets_class_qos());
        r.qos_p99_us.insert("c".into(), 99);
        assert!(!r.meets_class_qos());
        assert_eq!(r.class_p99("d"), Some(300));
        assert_eq!(r.class_p99("e"), None);
        assert!(!result(vec![], 0, 1_000_000).meets_class_qos());
    }

    fn threshold_probe(limit: f64) -> impl FnMut(usize, f64) -> Result<GoodputPoint, MetricsError> {
        move |_, rate| {
            Ok(GoodputPoint {
                offered_load: rate,
                goodput: if rate <= limit { rate } else { 0.0 },
                qos_met: rate <= limit,
                p99_us: 0,
            })
        }
    }

    #[test]
    fn probe_budget_and_consistency() {
        let (lo, hi, tol) = (100.0, 2000.0, 0.05);
        let out = goodput_search_with(lo, hi, tol, threshold_probe(777.0)).unwrap();
        let bound = ((hi - lo) / (tol * lo)).log2().ceil() as usize;
        assert!(out.probes.len() <= bound, "{} > {bound}", out.probes.len());
        assert!(out.rate <= 777.0 && out.rate >= 777.0 / (1.0 + tol) - 1e-9);
        for p in &out.probes {
            assert_eq!(p.qos_met, p.offered_load <= out.rate);
        }
    }

    #[test]
    fn infeasible_lo_is_reported() {
        let err = goodput_search_with(100.0, 200.0, 0.05, threshold_probe(50.0)).unwrap_err();
        assert!(matches!(err, MetricsError::NoFeasibleRate { .. }));
        let out = goodput_search_with(100.0, 200.0, 0.05, threshold_probe(100.0)).unwrap();
        assert_eq!(out.rate, 100.0);
        assert!(goodput_search_with(5.0, 1.0, 0.1, threshold_probe(1.0)).is_err());
    }

    #[test]
    fn probe_seeds_differ() {
        assert_ne!(probe_seed(1, 0), probe_seed(1, 1));
        assert_eq!(probe_seed(1, 3), probe_seed(1, 3));
    }
}

//! Goodput and tail-latency sweeps: core frequency, request skew and slow
//! servers.

use microsim::management::SlowServers;
use microsim::metrics::CurvePoint;
use microsim::topology::Topology;
use microsim::workload::{build_skewed_population, WorkloadPlan};
use rayon::prelude::*;
use serde::Serialize;

use super::{aggregate_qos, best_point, fmt_f, run_one, scale_out, search, set_protocol, topology, RunRecord, Writer};
use crate::scenario::{Scenario, TopologyRef};
use crate::CliError;

/// One point of a goodput curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub x: f64,
    /// Highest offered rate that met QoS, 0 if none did.
    pub max_rate_rps: f64,
    pub goodput_rps: f64,
    pub p99_us: u64,
    /// Goodput relative to the first point of the sweep.
    pub relative: f64,
}

fn curve(xs: &[f64], outcomes: &[microsim::metrics::SearchOutcome]) -> Vec<SweepPoint> {
    let pts: Vec<(f64, f64, f64, u64)> = xs
        .iter()
        .zip(outcomes)
        .map(|(&x, o)| match best_point(o) {
            Some(p) => (x, p.offered_load, p.goodput, p.p99_us),
            None => (x, 0.0, 0.0, 0),
        })
        .collect();
    let first = pts.first().map_or(0.0, |p| p.2);
    pts.into_iter()
        .map(|(x, max_rate_rps, goodput_rps, p99_us)| SweepPoint {
            x,
            max_rate_rps,
            goodput_rps,
            p99_us,
            relative: if first > 0.0 { goodput_rps / first } else { 0.0 },
        })
        .collect()
}

fn curve_rows(points: &[SweepPoint]) -> Vec<CurvePoint> {
    points
        .iter()
        .map(|p| CurvePoint {
            x: p.x,
            offered_rps: p.max_rate_rps,
            goodput_rps: p.goodput_rps,
            p99_us: p.p99_us,
        })
        .collect()
}

fn label(r: &TopologyRef) -> String {
    match r {
        TopologyRef::Preset(n) => n.clone(),
        TopologyRef::File(p) => p.file_stem().map_or("topology".into(), |s| s.to_string_lossy().into_owned()),
    }
}

/// The scenario topology and the one named by `compare`, labelled.
fn pair(s: &Scenario) -> Result<Vec<(String, Topology)>, CliError> {
    let mut other = s.param_topology("compare")?;
    if let Some(p) = s.protocol {
        set_protocol(&mut other, p);
    }
    let other_label = label(&TopologyRef::parse(s.params.raw("compare")?, &s.base));
    Ok(vec![(label(&s.topology), topology(s)?), (other_label, other)])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreqTopologySummary {
    pub topology: String,
    pub qos_p99_us: u64,
    /// Goodput-search maximum at nominal frequency.
    pub max_load_rps: f64,
    pub loads_rps: Vec<f64>,
    pub freqs: Vec<f64>,
    /// p99 per frequency (rows) and load (columns).
    pub p99_us: Vec<Vec<u64>>,
    /// p99 per frequency at the shared half load.
    pub half_load_p99_us: Vec<u64>,
    /// Every class met its own target at the shared half load.
    pub half_load_qos_met: Vec<bool>,
    /// Lowest frequency, stepping down from the highest, that still meets
    /// every class target at the shared half load.
    pub min_freq_at_half_load: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreqSweepSummary {
    /// Half the smaller nominal maximum, so every topology carries the same
    /// total demand when frequencies are compared.
    pub half_load_rps: f64,
    pub topologies: Vec<FreqTopologySummary>,
}

pub(super) fn freq(s: &Scenario, w: &mut Writer, runs: &mut Vec<RunRecord>) -> Result<FreqSweepSummary, CliError> {
    let mut freqs: Vec<f64> = s.params.list("freqs")?;
    freqs.sort_by(|a, b| b.total_cmp(a));
    let loads: usize = s.params.get("loads")?;
    if loads == 0 || freqs.is_empty() {
        return Err(CliError::Scenario("freq_sweep needs at least one frequency and one load".into()));
    }
    let bounds = s.params.search()?;
    let plan = s.workload.plan()?;
    let mut policy = s.policy.clone();
    policy.retain_traces = false;

    let mut nominal = policy.clone();
    nominal.frequency = 1.0;
    let mut tops = Vec::new();
    for (name, t) in pair(s)? {
        let qos = s.params.get_or("qos_us", aggregate_qos(&t))?;
        let (o, recs) = search(&format!("{name}/max"), &t, &plan, &nominal, qos, s.seed, bounds, s)?;
        runs.extend(recs);
        let max = best_point(&o).map_or(0.0, |p| p.offered_load);
        if max <= 0.0 {
            return Err(CliError::Scenario(format!("{name}: no load meets QoS at nominal frequency")));
        }
        tops.push((name, t, qos, max));
    }
    let half_load = 0.5 * tops.iter().map(|t| t.3).fold(f64::INFINITY, f64::min);

    let mut out = Vec::new();
    for (name, t, qos, max) in tops {
        let loads_rps: Vec<f64> = (1..=loads).map(|k| max * k as f64 / loads as f64).collect();
        let mut cells: Vec<(usize, f64, f64)> = Vec::new();
        for (i, &f) in freqs.iter().enumerate() {
            for &rate in loads_rps.iter().chain([half_load].iter()) {
                cells.push((i, f, rate));
            }
        }
        let results = cells
            .par_iter()
            .map(|&(_, f, rate)| {
                let mut p = policy.clone();
                p.frequency = f;
                let (r, rec) = run_one(&format!("{name}/f{f}/r{rate:.1}"), &t, &plan.with_rate(rate), &p, s.seed, s)?;
                Ok((r.p99().unwrap_or(u64::MAX), r.meets_class_qos(), rec))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let mut grid = vec![Vec::with_capacity(loads); freqs.len()];
        let mut half = vec![0; freqs.len()];
        let mut met = vec![false; freqs.len()];
        for (&(i, _, _), (p99, ok, rec)) in cells.iter().zip(results) {
            runs.push(rec);
            if grid[i].len() < loads {
                grid[i].push(p99);
            } else {
                half[i] = p99;
                met[i] = ok;
            }
        }
        let min_freq = freqs.iter().zip(&met).take_while(|(_, &ok)| ok).last().map(|(&f, _)| f);

        let mut header = vec!["freq".to_string()];
        header.extend(loads_rps.iter().map(|r| format!("{r:.1}")));
        let rows: Vec<Vec<String>> = freqs
            .iter()
            .zip(&grid)
            .map(|(f, row)| std::iter::once(fmt_f(*f)).chain(row.iter().map(u64::to_string)).collect())
            .collect();
        w.table(&format!("heatmap_{name}.csv"), &header, &rows)?;
        out.push(FreqTopologySummary {
            topology: name,
            qos_p99_us: qos,
            max_load_rps: max,
            loads_rps,
            freqs: freqs.clone(),
            p99_us: grid,
            half_load_p99_us: half,
            half_load_qos_met: met,
            min_freq_at_half_load: min_freq,
        });
    }
    Ok(FreqSweepSummary {
        half_load_rps: half_load,
        topologies: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkewSummary {
    pub topology: String,
    pub users: u32,
    pub qos_p99_us: u64,
    pub points: Vec<SweepPoint>,
    pub monotone_non_increasing: bool,
}

pub(super) fn skew(s: &Scenario, w: &mut Writer, runs: &mut Vec<RunRecord>) -> Result<SkewSummary, CliError> {
    let t = topology(s)?;
    let skews: Vec<i32> = s.params.list("skews")?;
    let qos = s.params.get_or("qos_us", aggregate_qos(&t))?;
    let bounds = s.params.search()?;
    let users = s.workload.users;
    let results = skews
        .par_iter()
        .map(|&k| {
            let plan = WorkloadPlan {
                arrivals: s.workload.arrivals.clone(),
                population: build_skewed_population(users, k)?,
            };
            search(&format!("skew{k}"), &t, &plan, &s.policy, qos, s.seed, bounds, s)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut outcomes = Vec::new();
    for (o, recs) in results {
        runs.extend(recs);
        outcomes.push(o);
    }
    let xs: Vec<f64> = skews.iter().map(|&k| k as f64).collect();
    let points = curve(&xs, &outcomes);
    w.curve(&curve_rows(&points), "goodput_curve.csv")?;
    Ok(SkewSummary {
        topology: label(&s.topology),
        users,
        qos_p99_us: qos,
        monotone_non_increasing: points.windows(2).all(|p| p[1].goodput_rps <= p[0].goodput_rps),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlowCurve {
    pub topology: String,
    pub qos_p99_us: u64,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlowServerSummary {
    pub slow_frequency: f64,
    pub replicas: u32,
    pub curves: Vec<SlowCurve>,
}

pub(super) fn slow_servers(s: &Scenario, w: &mut Writer, runs: &mut Vec<RunRecord>) -> Result<SlowServerSummary, CliError> {
    let fractions: Vec<f64> = s.params.list("fractions")?;
    let slow: f64 = s.params.get("slow_frequency")?;
    let replicas: u32 = s.params.get_or("replicas", 1)?;
    let bounds = s.params.search()?;
    let plan = s.workload.plan()?;
    let mut curves = Vec::new();
    for (name, mut t) in pair(s)? {
        scale_out(&mut t, replicas);
        let qos = s.params.get_or("qos_us", aggregate_qos(&t))?;
        let results = fractions
            .par_iter()
            .map(|&frac| {
                let mut p = s.policy.clone();
                if frac > 0.0 {
                    p.faults.slow_servers.push(SlowServers {
                        fraction: frac,
                        frequency: slow,
                        start: 0,
                        end: None,
                    });
                }
                search(&format!("{name}/slow{frac}"), &t, &plan, &p, qos, s.seed, bounds, s)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let mut outcomes = Vec::new();
        for (o, recs) in results {
            runs.extend(recs);
            outcomes.push(o);
        }
        let points = curve(&fractions, &outcomes);
        w.curve(&curve_rows(&points), &format!("goodput_{name}.csv"))?;
        curves.push(SlowCurve {
            topology: name,
            qos_p99_us: qos,
            points,
        });
    }
    Ok(SlowServerSummary {
        slow_frequency: slow,
        replicas,
        curves,
    })
}

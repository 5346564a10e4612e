use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{goodput, MetricsError, RunResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    Latency,
    HeatmapLatency,
    HeatmapUtil,
    /// A single-row curve for this run at its aggregate target.
    GoodputCurve,
    ScaleTimeline,
}

/// One row of a goodput curve; `x` is the swept parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub offered_rps: f64,
    pub goodput_rps: f64,
    pub p99_us: u64,
}

pub fn export_csv(r: &RunResult, kind: ExportKind, path: &Path) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    match kind {
        ExportKind::Latency => {
            w.write_record(["class", "latency_us"])?;
            for (class, samples) in &r.latencies {
                for v in samples {
                    w.write_record([class.as_str(), &v.to_string()])?;
                }
            }
        }
        ExportKind::HeatmapLatency | ExportKind::HeatmapUtil => {
            let ticks: BTreeSet<u64> = r.series.values().flatten().map(|s| s.t_us).collect();
            let mut header = vec!["service".to_string()];
            header.extend(ticks.iter().map(u64::to_string));
            w.write_record(&header)?;
            for svc in &r.services {
                let Some(series) = r.series.get(svc) else { continue };
                let mut row = vec![svc.clone()];
                row.extend(series.iter().map(|s| match kind {
                    ExportKind::HeatmapLatency => s.p99_us.to_string(),
                    _ => s.utilization.to_string(),
                }));
                w.write_record(&row)?;
            }
        }
        ExportKind::GoodputCurve => {
            drop(w);
            let offered = r.counters.arrivals as f64 / (r.duration_us as f64 / 1e6);
            let point = CurvePoint {
                x: 0.0,
                offered_rps: offered,
                goodput_rps: goodput(r, r.aggregate_qos()),
                p99_us: r.p99().unwrap_or(0),
            };
            return write_goodput_curve(&[point], path);
        }
        ExportKind::ScaleTimeline => {
            w.write_record(["t_us", "service", "instances"])?;
            for e in &r.scale_timeline {
                w.write_record([e.t_us.to_string(), e.service.clone(), e.instances.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_goodput_curve(points: &[CurvePoint], path: &Path) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "offered_rps", "goodput_rps", "p99_us"])?;
    for p in points {
        w.write_record([
            p.x.to_string(),
            p.offered_rps.to_string(),
            p.goodput_rps.to_string(),
            p.p99_us.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a heatmap file back into (tick times, rows of (service, values)).
pub fn read_matrix_csv<R: Read>(input: R) -> Result<(Vec<u64>, Vec<(String, Vec<f64>)>), MetricsError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let ticks = header
        .iter()
        .skip(1)
        .map(|h| h.parse::<u64>().map_err(|e| csv_error(&e.to_string())))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let name = rec.get(0).unwrap_or_default().to_string();
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| csv_error(&e.to_string())))
            .collect::<Result<_, _>>()?;
        rows.push((name, vals));
    }
    Ok((ticks, rows))
}

fn csv_error(msg: &str) -> MetricsError {
    MetricsError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Counters, TickSample};
    use std::collections::BTreeMap;

    fn empty() -> RunResult {
        RunResult {
            seed: 0,
            config_digest: String::new(),
            duration_us: 1_000_000,
            warmup_us: 0,
            window_us: 1_000_000,
            qos_p99_us: BTreeMap::new(),
            class_weights: BTreeMap::new(),
            latencies: BTreeMap::new(),
            unfinished_us: BTreeMap::new(),
            services: vec![],
            series: BTreeMap::new(),
            e2e: vec![],
            counters: Counters::default(),
            scale_timeline: vec![],
            cost: Default::default(),
            traces: vec![],
        }
    }

    fn tick(t_us: u64, utilization: f64, p99_us: u64) -> TickSample {
        TickSample {
            t_us,
            utilization,
            p99_us,
            queue_len: 0,
            instances: 1,
        }
    }

    #[test]
    fn empty_run_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lat.csv");
        export_csv(&empty(), ExportKind::Latency, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "class,latency_us\n");
        export_csv(&empty(), ExportKind::HeatmapUtil, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "service\n");
    }

    #[test]
    fn heatmap_shape_order_and_round_trip() {
        let mut r = empty();
        r.services = vec!["db".into(), "fe".into()];
        let util = [[0.1, 0.25, 1.0 / 3.0], [0.7, 0.95, 0.123456789]];
        for (svc, u) in r.services.clone().iter().zip(util) {
            r.series.insert(
                svc.clone(),
                (0..3).map(|k| tick((k + 1) * 1000, u[k as usize], 10 * k)).collect(),
            );
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        export_csv(&r, ExportKind::HeatmapUtil, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
        assert!(lines[1].starts_with("db,"));
        let (ticks, rows) = read_matrix_csv(text.as_bytes()).unwrap();
        assert_eq!(ticks, vec![1000, 2000, 3000]);
        for ((_, vals), u) in rows.iter().zip(util) {
            assert_eq!(vals, &u.to_vec());
        }
        let q = dir.path().join("h2.csv");
        export_csv(&r, ExportKind::HeatmapUtil, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn curve_and_timeline_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        write_goodput_curve(
            &[CurvePoint {
                x: 80.0,
                offered_rps: 100.5,
                goodput_rps: 0.0,
                p99_us: 12,
            }],
            &p,
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "x,offered_rps,goodput_rps,p99_us\n80,100.5,0,12\n"
        );
        export_csv(&empty(), ExportKind::ScaleTimeline, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "t_us,service,instances\n");
    }
}

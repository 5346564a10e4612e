//! Open-loop request generation.
//!
//! Arrival instants, class tags and user tags each come from their own RNG
//! stream, so the arrival times for a given process and seed do not depend on
//! the topology's class weights or on anything the system does.

use rand::distributions::{Distribution, WeightedIndex};
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Streams;

/// Share of requests carried by the heavy user class of a skewed population.
pub const HEAVY_SHARE: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("{0}")]
    Domain(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalProcess {
    Poisson { rate: f64 },
    Deterministic { rate: f64 },
    /// Piecewise-constant Poisson rates; the pattern repeats if the run is
    /// longer than the sum of the segments.
    Diurnal { segments: Vec<(u64, f64)> },
}

impl ArrivalProcess {
    pub fn check(&self) -> Result<(), WorkloadError> {
        let bad = |r: f64| !(r.is_finite() && r > 0.0);
        match self {
            ArrivalProcess::Poisson { rate } | ArrivalProcess::Deterministic { rate } if bad(*rate) => {
                Err(WorkloadError::Domain(format!("arrival rate must be positive, got {rate}")))
            }
            ArrivalProcess::Diurnal { segments } if segments.is_empty() => {
                Err(WorkloadError::Domain("diurnal pattern has no segments".into()))
            }
            ArrivalProcess::Diurnal { segments } => {
                for &(dur, rate) in segments {
                    if dur == 0 || bad(rate) {
                        return Err(WorkloadError::Domain(format!(
                            "diurnal segment ({dur}µs, {rate}/s) must have positive length and rate"
                        )));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Long-run mean rate in requests per second.
    pub fn mean_rate(&self) -> f64 {
        match self {
            ArrivalProcess::Poisson { rate } | ArrivalProcess::Deterministic { rate } => *rate,
            ArrivalProcess::Diurnal { segments } => {
                let total: u64 = segments.iter().map(|s| s.0).sum();
                segments.iter().map(|&(d, r)| d as f64 * r).sum::<f64>() / total as f64
            }
        }
    }

    /// Compressed day used by the serverless scenario: low, rise, peak, fall,
    /// low, then a short spike. `peak` is the highest rate.
    pub fn diurnal_day(segment_us: u64, peak: f64) -> Self {
        let shape = [0.15, 0.5, 1.0, 0.5, 0.15, 0.9];
        ArrivalProcess::Diurnal {
            segments: shape.iter().map(|f| (segment_us, f * peak)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPopulation {
    pub n_users: u32,
    pub skew: u8,
    pub weights: Vec<f64>,
}

impl UserPopulation {
    pub fn uniform(n_users: u32) -> Self {
        let n = n_users.max(1);
        Self {
            n_users: n,
            skew: 0,
            weights: vec![1.0 / n as f64; n as usize],
        }
    }

    /// Number of users in the heavy class.
    pub fn heavy_users(&self) -> u32 {
        heavy_count(self.n_users, self.skew)
    }
}

fn heavy_count(n_users: u32, skew: u8) -> u32 {
    (n_users as f64 * (100 - skew as u32) as f64 / 100.0).round() as u32
}

/// Two-class population: the top `round(n·(100−skew)/100)` users share 90%
/// of requests equally and the rest share the remaining 10%. Skew 0 leaves no
/// light class, which makes the weights uniform.
pub fn build_skewed_population(n_users: u32, skew: i32) -> Result<UserPopulation, WorkloadError> {
    if !(0..=99).contains(&skew) {
        return Err(WorkloadError::Domain(format!("skew must be in [0, 99], got {skew}")));
    }
    if n_users < 100 {
        return Err(WorkloadError::Domain(format!(
            "skewed populations need at least 100 users, got {n_users}"
        )));
    }
    let skew = skew as u8;
    let heavy = heavy_count(n_users, skew);
    let light = n_users - heavy;
    if light == 0 {
        return Ok(UserPopulation {
            skew,
            ..UserPopulation::uniform(n_users)
        });
    }
    let mut weights = vec![HEAVY_SHARE / heavy as f64; heavy as usize];
    weights.extend(std::iter::repeat_n((1.0 - HEAVY_SHARE) / light as f64, light as usize));
    Ok(UserPopulation {
        n_users,
        skew,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadPlan {
    pub arrivals: ArrivalProcess,
    pub population: UserPopulation,
}

impl WorkloadPlan {
    pub fn poisson(rate: f64) -> Self {
        Self {
            arrivals: ArrivalProcess::Poisson { rate },
            population: UserPopulation::uniform(1),
        }
    }

    pub fn with_rate(&self, rate: f64) -> Self {
        let arrivals = match &self.arrivals {
            ArrivalProcess::Deterministic { .. } => ArrivalProcess::Deterministic { rate },
            _ => ArrivalProcess::Poisson { rate },
        };
        Self {
            arrivals,
            population: self.population.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrival {
    pub time: u64,
    pub class: u16,
    pub user: u32,
}

/// Generates every arrival in `(0, duration]`, in strictly increasing µs.
///
/// Continuous-time instants are rounded to the nearest µs; a rounded instant
/// that collides with its predecessor is pushed one µs later.
pub fn gen_arrivals(
    process: &ArrivalProcess,
    class_weights: &[f64],
    population: &UserPopulation,
    duration: u64,
    streams: &Streams,
) -> Result<Vec<Arrival>, WorkloadError> {
    process.check()?;
    if duration == 0 {
        return Err(WorkloadError::Domain("duration must be positive".into()));
    }
    let class_index = WeightedIndex::new(class_weights)
        .map_err(|e| WorkloadError::Domain(format!("class weights: {e}")))?;
    let user_index = WeightedIndex::new(&population.weights)
        .map_err(|e| WorkloadError::Domain(format!("user weights: {e}")))?;

    let times = arrival_times(process, duration, streams);
    let mut class_rng = streams.get("workload/class");
    let mut user_rng = streams.get("workload/user");
    Ok(times
        .into_iter()
        .map(|time| Arrival {
            time,
            class: class_index.sample(&mut class_rng) as u16,
            user: user_index.sample(&mut user_rng) as u32,
        })
        .collect())
}

fn arrival_times(process: &ArrivalProcess, duration: u64, streams: &Streams) -> Vec<u64> {
    let mut rng = streams.get("workload/time");
    let mut out: Vec<u64> = Vec::new();
    let push = |t: f64, out: &mut Vec<u64>| {
        let mut us = t.round() as u64;
        if let Some(&last) = out.last() {
            if us <= last {
                us = last + 1;
            }
        }
        if us <= duration {
            out.push(us);
        }
    };
    let horizon = duration as f64;
    match process {
        ArrivalProcess::Deterministic { rate } => {
            let gap = 1e6 / rate;
            let mut k = 1u64;
            loop {
                let t = k as f64 * gap;
                if t.round() > horizon {
                    break;
                }
                push(t, &mut out);
                k += 1;
            }
        }
        ArrivalProcess::Poisson { rate } => {
            let exp = Exp::new(*rate / 1e6).expect("rate checked");
            let mut t = 0.0;
            loop {
                t += exp.sample(&mut rng);
                if t.round() > horizon {
                    break;
                }
                push(t, &mut out);
            }
        }
        ArrivalProcess::Diurnal { segments } => {
            let mut start = 0.0;
            'outer: loop {
                for &(len, rate) in segments {
                    let end = start + len as f64;
                    let exp = Exp::new(rate / 1e6).expect("rate checked");
                    let mut t = start;
                    loop {
                        t += exp.sample(&mut rng);
                        if t >= end {
                            break;
                        }
                        if t.round() > horizon {
                            break 'outer;
                        }
                        push(t, &mut out);
                    }
                    start = end;
                    if start > horizon {
                        break 'outer;
                    }
                }
            }
        }
    }
    out
}

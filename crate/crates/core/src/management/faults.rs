use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::engine::Streams;

/// Slows a fraction of hosts to `frequency` of nominal from `start` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowServers {
    pub fraction: f64,
    pub frequency: f64,
    pub start: u64,
    /// `None` keeps the hosts slow until the end of the run.
    pub end: Option<u64>,
}

/// Sends every request for `service` to one instance during the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misroute {
    pub service: String,
    pub instance: usize,
    pub start: u64,
    pub end: u64,
}

/// Inflates the service time of every draw at `service` during the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub service: String,
    pub factor: f64,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub slow_servers: Vec<SlowServers>,
    pub misroutes: Vec<Misroute>,
    pub hotspots: Vec<Hotspot>,
}

impl FaultPlan {
    pub fn is_empty(&self) -> bool {
        self.slow_servers.is_empty() && self.misroutes.is_empty() && self.hotspots.is_empty()
    }

    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.slow_servers {
            if !(0.0..=1.0).contains(&s.fraction) {
                out.push(format!("slow-server fraction must be in [0, 1], got {}", s.fraction));
            }
            if !(s.frequency > 0.0 && s.frequency <= 1.0) {
                out.push(format!("slow-server frequency must be in (0, 1], got {}", s.frequency));
            }
            if s.end.is_some_and(|e| e < s.start) {
                out.push("slow-server window ends before it starts".into());
            }
        }
        for m in &self.misroutes {
            if m.end < m.start {
                out.push(format!("misroute on {} ends before it starts", m.service));
            }
        }
        for h in &self.hotspots {
            if !(h.factor.is_finite() && h.factor > 0.0) {
                out.push(format!("hotspot factor must be positive, got {}", h.factor));
            }
            if h.end < h.start {
                out.push(format!("hotspot on {} ends before it starts", h.service));
            }
        }
        out
    }

    /// Every instant at which some fault starts or ends, ascending.
    pub fn trigger_times(&self) -> Vec<u64> {
        let mut t: Vec<u64> = self
            .slow_servers
            .iter()
            .flat_map(|s| std::iter::once(s.start).chain(s.end))
            .chain(self.misroutes.iter().flat_map(|m| [m.start, m.end]))
            .chain(self.hotspots.iter().flat_map(|h| [h.start, h.end]))
            .collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// `round(fraction · n)` hosts out of `candidates`, chosen by a seeded shuffle.
pub fn choose_slow_hosts(candidates: &[usize], fraction: f64, streams: &Streams, index: usize) -> Vec<usize> {
    let k = (fraction * candidates.len() as f64).round() as usize;
    let mut pool = candidates.to_vec();
    let mut rng = streams.get(&format!("faults/slow/{index}"));
    pool.shuffle(&mut rng);
    pool.truncate(k);
    pool.sort_unstable();
    pool
}

/// Fault-dependent engine state. Derived from the plan and the clock alone,
/// so leaving every window restores the fault-free values exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultState {
    nominal: f64,
    pub host_frequency: Vec<f64>,
    /// Service → forced instance index.
    pub misroute: BTreeMap<String, usize>,
    /// Service → service-time inflation.
    pub hotspot: BTreeMap<String, f64>,
    slow_sets: Vec<Vec<usize>>,
}

impl FaultState {
    /// `slowable` lists the hosts eligible for slow-server faults.
    pub fn new(plan: &FaultPlan, nominal: f64, n_hosts: usize, slowable: &[usize], streams: &Streams) -> Self {
        Self {
            nominal,
            host_frequency: vec![nominal; n_hosts],
            misroute: BTreeMap::new(),
            hotspot: BTreeMap::new(),
            slow_sets: plan
                .slow_servers
                .iter()
                .enumerate()
                .map(|(i, s)| choose_slow_hosts(slowable, s.fraction, streams, i))
                .collect(),
        }
    }

    /// Registers a host created after construction; it is never slowed.
    pub fn add_host(&mut self) -> usize {
        self.host_frequency.push(self.nominal);
        self.host_frequency.len() - 1
    }

    pub fn slow_hosts(&self) -> impl Iterator<Item = &usize> {
        self.slow_sets.iter().flatten()
    }

    pub fn hotspot_factor(&self, service: &str) -> f64 {
        self.hotspot.get(service).copied().unwrap_or(1.0)
    }
}

/// Recomputes the fault state as of `now`. Windows are half-open: a fault
/// is active on `[start, end)`.
pub fn apply_faults(plan: &FaultPlan, state: &mut FaultState, now: u64) {
    let active = |start: u64, end: Option<u64>| start <= now && end.is_none_or(|e| now < e);
    state.host_frequency.iter_mut().for_each(|f| *f = state.nominal);
    for (s, hosts) in plan.slow_servers.iter().zip(&state.slow_sets) {
        if active(s.start, s.end) {
            for &h in hosts {
                let f = &mut state.host_frequency[h];
                *f = f.min(state.nominal * s.frequency);
            }
        }
    }
    state.misroute.clear();
    for m in &plan.misroutes {
        if active(m.start, Some(m.end)) {
            state.misroute.insert(m.service.clone(), m.instance);
        }
    }
    state.hotspot.clear();
    for h in &plan.hotspots {
        if active(h.start, Some(h.end)) {
            *state.hotspot.entry(h.service.clone()).or_insert(1.0) *= h.factor;
        }
    }
}

//! Cluster-management levers applied to a run: autoscaling, admission
//! control, fault injection and the serverless execution model.

mod autoscale;
mod cost;
mod faults;
mod ratelimit;
mod serverless;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use autoscale::{autoscale_tick, AutoscalerPolicy, ScaleAction, ScaleView};
pub use cost::{cost_report, CostError, CostReport};
pub use faults::{apply_faults, choose_slow_hosts, FaultPlan, FaultState, Hotspot, Misroute, SlowServers};
pub use ratelimit::{RateLimiterConfig, TokenBucket};
pub use serverless::{serverless_run, serverless_run_windowed, ServerlessConfig, StateStore};

use crate::engine::{HostLayout, LoadBalancePolicy, NetworkProfile};

/// Connection pool size per (caller instance, downstream service) pair.
pub const DEFAULT_POOL_SIZE: u32 = 8;

/// Monitor window used when no autoscaler sets one.
pub const DEFAULT_MONITOR_WINDOW_US: u64 = 1_000_000;

/// Every policy knob of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    pub network: NetworkProfile,
    pub autoscaler: Option<AutoscalerPolicy>,
    /// Applied at the entry tier only.
    pub rate_limiter: Option<RateLimiterConfig>,
    pub faults: FaultPlan,
    pub serverless: Option<ServerlessConfig>,
    pub pool_size: u32,
    /// Pool size by downstream service name.
    pub pool_overrides: BTreeMap<String, u32>,
    pub load_balance: LoadBalancePolicy,
    pub lb_overrides: BTreeMap<String, LoadBalancePolicy>,
    /// Nominal core frequency for every host, in (0, 1].
    pub frequency: f64,
    pub hosts: HostLayout,
    /// Tick spacing of the time series. When an autoscaler is set, its window
    /// is used instead.
    pub monitor_window_us: u64,
    /// Keep one trace per completed request.
    pub retain_traces: bool,
}

impl Default for PolicySet {
    fn default() -> Self {
        Self {
            network: NetworkProfile::default(),
            autoscaler: None,
            rate_limiter: None,
            faults: FaultPlan::default(),
            serverless: None,
            pool_size: DEFAULT_POOL_SIZE,
            pool_overrides: BTreeMap::new(),
            load_balance: LoadBalancePolicy::RoundRobin,
            lb_overrides: BTreeMap::new(),
            frequency: 1.0,
            hosts: HostLayout::Dedicated,
            monitor_window_us: DEFAULT_MONITOR_WINDOW_US,
            retain_traces: true,
        }
    }
}

impl PolicySet {
    pub fn window(&self) -> u64 {
        self.autoscaler.as_ref().map_or(self.monitor_window_us, |a| a.window)
    }

    pub fn pool_size_for(&self, downstream: &str) -> u32 {
        self.pool_overrides.get(downstream).copied().unwrap_or(self.pool_size)
    }

    pub fn lb_for(&self, service: &str) -> LoadBalancePolicy {
        self.lb_overrides.get(service).copied().unwrap_or(self.load_balance)
    }

    /// Human-readable problems with the policy values, if any.
    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.network.stack_factor < 1.0 || !self.network.stack_factor.is_finite() {
            out.push(format!("stack_factor must be >= 1, got {}", self.network.stack_factor));
        }
        if !(self.frequency > 0.0 && self.frequency <= 1.0) {
            out.push(format!("frequency must be in (0, 1], got {}", self.frequency));
        }
        if self.pool_size == 0 || self.pool_overrides.values().any(|&k| k == 0) {
            out.push("connection pools need at least one connection".into());
        }
        if self.window() == 0 {
            out.push("monitor window must be positive".into());
        }
        if let Some(a) = &self.autoscaler {
            out.extend(a.check());
        }
        if let Some(r) = &self.rate_limiter {
            out.extend(r.check());
        }
        if let Some(s) = &self.serverless {
            out.extend(s.check());
        }
        out.extend(self.faults.check());
        out
    }
}

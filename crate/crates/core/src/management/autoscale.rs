use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Utilization-threshold autoscaler evaluated once per monitor window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoscalerPolicy {
    pub threshold: f64,
    pub window: u64,
    pub startup_delay: u64,
    pub step: u32,
    pub scale_in: bool,
}

impl Default for AutoscalerPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.70,
            window: 5_000_000,
            startup_delay: 30_000_000,
            step: 1,
            scale_in: false,
        }
    }
}

impl AutoscalerPolicy {
    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            out.push(format!("autoscaler threshold must be in (0, 1], got {}", self.threshold));
        }
        if self.window == 0 {
            out.push("autoscaler window must be positive".into());
        }
        if self.step == 0 {
            out.push("autoscaler step must be at least 1".into());
        }
        out
    }
}

/// What the autoscaler knows about one service at a tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleView {
    /// Instances currently serving.
    pub instances: u32,
    /// Instances requested but still starting.
    pub pending: u32,
    pub initial: u32,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScaleAction {
    Add { service: String, count: u32, effective_at: u64 },
    Remove { service: String, count: u32 },
}

/// Scaling decisions for one tick. Starting instances count towards the
/// cap, so a service never overshoots `max` while earlier requests are
/// still booting.
pub fn autoscale_tick(
    utilization: &BTreeMap<String, f64>,
    policy: &AutoscalerPolicy,
    state: &BTreeMap<String, ScaleView>,
    now: u64,
) -> Vec<ScaleAction> {
    let mut actions = Vec::new();
    for (service, &util) in utilization {
        let Some(v) = state.get(service) else { continue };
        let planned = v.instances + v.pending;
        if util > policy.threshold && planned < v.max {
            actions.push(ScaleAction::Add {
                service: service.clone(),
                count: policy.step.min(v.max - planned),
                effective_at: now + policy.startup_delay,
            });
        } else if policy.scale_in && util < policy.threshold / 2.0 && v.pending == 0 && v.instances > v.initial {
            actions.push(ScaleAction::Remove {
                service: service.clone(),
                count: 1,
            });
        }
    }
    actions
}

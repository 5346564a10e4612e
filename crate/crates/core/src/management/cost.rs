use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ServerlessConfig;
use crate::metrics::RunResult;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("runs cover different durations ({serverful}µs vs {serverless}µs)")]
    DurationMismatch { serverful: u64, serverless: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub serverful_instance_hours: f64,
    pub serverful_cost: f64,
    pub serverless_gb_s: f64,
    pub serverless_cost: f64,
    /// Serverless cost over serverful cost.
    pub ratio: f64,
}

/// Instance-hours (autoscaled instances included) against billed GB-seconds.
pub fn cost_report(serverful: &RunResult, serverless: &RunResult, cfg: &ServerlessConfig) -> Result<CostReport, CostError> {
    if serverful.duration_us != serverless.duration_us {
        return Err(CostError::DurationMismatch {
            serverful: serverful.duration_us,
            serverless: serverless.duration_us,
        });
    }
    let hours = serverful.cost.instance_hours();
    let serverful_cost = hours * cfg.price_per_instance_hour;
    let gb_s = serverless.cost.function_gb_s;
    let serverless_cost = gb_s * cfg.price_per_req_gbs;
    Ok(CostReport {
        serverful_instance_hours: hours,
        serverful_cost,
        serverless_gb_s: gb_s,
        serverless_cost,
        ratio: serverless_cost / serverful_cost,
    })
}

//! Discrete-event core. Time is an integer µs clock; events at equal times
//! run in the order they were scheduled.

mod rng;
mod route;
mod sample;
mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rng::{fnv1a, splitmix64, SimRng, Streams};
pub use route::{route, LoadBalancePolicy};
pub use sample::{draw, sample_network_time, sample_service_time, uniform_index};
pub use sim::{run, run_with_arrivals, Engine};

use crate::topology::DEFAULT_BASE_DELAY_US;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no instance available to route to")]
    NoInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    /// One-way delay of a cloud-internal hop, µs.
    pub base_delay: u64,
    /// Divides every network-processing draw; 1 is a native TCP stack.
    pub stack_factor: f64,
}

impl Default for NetworkProfile {
    fn default() -> Self {
        Self {
            base_delay: DEFAULT_BASE_DELAY_US,
            stack_factor: 1.0,
        }
    }
}

/// How service instances map onto physical hosts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostLayout {
    /// Every instance gets its own host.
    Dedicated,
    /// Non-storage instances are spread round-robin over `hosts` shared
    /// hosts; cache and database instances still get dedicated hosts.
    Shared { hosts: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HostServer {
    pub id: usize,
    /// Fraction of nominal speed, in (0, 1].
    pub frequency: f64,
    /// Cores of the instances placed on this host.
    pub capacity: u32,
}

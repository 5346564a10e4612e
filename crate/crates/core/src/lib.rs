//! A deterministic discrete-event simulator of microservice dependency
//! graphs.
//!
//! A [`topology::Topology`] describes services and the call tree of every
//! request class; a [`workload::WorkloadPlan`] generates open-loop arrivals;
//! a [`management::PolicySet`] sets the autoscaler, admission control,
//! faults and network knobs; [`engine::run`] simulates it all and returns a
//! [`metrics::RunResult`]. Identical inputs give byte-identical results.

pub mod engine;
pub mod management;
pub mod metrics;
pub mod topology;
pub mod tracing;
pub mod workload;

pub use engine::{run, EngineError};
pub use management::PolicySet;
pub use metrics::RunResult;
pub use topology::{load_topology, preset, Topology};
pub use workload::WorkloadPlan;

//! Microservice dependency graphs: services, request classes and their call
//! trees, plus the text format, shipped presets and the monolith transform.

mod config;
mod monolith;
mod presets;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{load_topology, render};
pub use monolith::{to_monolith, MONOLITH};
pub use presets::{preset, PRESET_NAMES};

/// One-way delay of a cloud-internal hop, used when no network profile is given.
pub const DEFAULT_BASE_DELAY_US: u64 = 50;

/// Zero-load latency multiple used when a class has no explicit p99 target.
pub const DEFAULT_QOS_MULTIPLE: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid topology: {}", format_issues(.0))]
    Validation(Vec<Issue>),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

fn format_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// A single validation finding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub location: String,
    pub message: String,
}

impl Issue {
    fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistKind {
    Deterministic,
    Exponential,
    Lognormal,
}

/// A positive duration distribution, parameterised by its mean in µs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub kind: DistKind,
    pub mean: f64,
    /// Only meaningful for `Lognormal`.
    pub sigma: f64,
}

impl DistributionSpec {
    pub fn deterministic(mean: f64) -> Self {
        Self {
            kind: DistKind::Deterministic,
            mean,
            sigma: 0.0,
        }
    }

    pub fn exponential(mean: f64) -> Self {
        Self {
            kind: DistKind::Exponential,
            mean,
            sigma: 0.0,
        }
    }

    pub fn lognormal(mean: f64, sigma: f64) -> Self {
        Self {
            kind: DistKind::Lognormal,
            mean,
            sigma,
        }
    }

    pub fn variance(&self) -> f64 {
        match self.kind {
            DistKind::Deterministic => 0.0,
            DistKind::Exponential => self.mean * self.mean,
            DistKind::Lognormal => self.mean * self.mean * ((self.sigma * self.sigma).exp() - 1.0),
        }
    }

    /// Lognormal (or deterministic, for zero variance) with the given moments.
    pub fn from_moments(mean: f64, variance: f64) -> Self {
        if variance <= 0.0 {
            Self::deterministic(mean)
        } else {
            Self::lognormal(mean, (1.0 + variance / (mean * mean)).ln().sqrt())
        }
    }

    fn check(&self, location: &str, issues: &mut Vec<Issue>) {
        if !(self.mean.is_finite() && self.mean > 0.0) {
            issues.push(Issue::new(
                location,
                format!("mean must be positive and finite, got {}", self.mean),
            ));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            issues.push(Issue::new(
                location,
                format!("sigma must be non-negative, got {}", self.sigma),
            ));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierKind {
    Frontend,
    Logic,
    Cache,
    Database,
    EdgeDevice,
}

impl TierKind {
    pub fn is_storage(self) -> bool {
        matches!(self, TierKind::Cache | TierKind::Database)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Cloud,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    /// Compute component of each request, in µs.
    pub service_time: DistributionSpec,
    /// RPC processing done on the core before compute; `None` means none.
    pub network_time: Option<DistributionSpec>,
    pub cores_per_instance: u32,
    pub initial_instances: u32,
    pub max_instances: u32,
    pub tier_kind: TierKind,
    pub placement: Placement,
}

impl ServiceSpec {
    /// A single-instance, single-core cloud logic tier with no network processing.
    pub fn new(name: impl Into<String>, service_time: DistributionSpec) -> Self {
        Self {
            name: name.into(),
            service_time,
            network_time: None,
            cores_per_instance: 1,
            initial_instances: 1,
            max_instances: 1,
            tier_kind: TierKind::Logic,
            placement: Placement::Cloud,
        }
    }

    pub fn network_mean(&self) -> f64 {
        self.network_time.map_or(0.0, |d| d.mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallMode {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    RpcPipelined,
    Http1Blocking,
}

/// One call in a request's call tree. `mode` governs how `children` run;
/// `protocol` describes the edge from the parent into this node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallNode {
    pub target: String,
    pub mode: CallMode,
    pub protocol: Protocol,
    /// Per-call compute override; used by collapsed services whose demand
    /// differs between request classes.
    pub service_time: Option<DistributionSpec>,
    pub children: Vec<CallNode>,
}

impl CallNode {
    pub fn leaf(target: impl Into<String>) -> Self {
        Self {
            target: target.into(),
            mode: CallMode::Sequential,
            protocol: Protocol::RpcPipelined,
            service_time: None,
            children: Vec::new(),
        }
    }

    pub fn with_protocol(mut self, protocol: Protocol) -> Self {
        self.protocol = protocol;
        self
    }

    pub fn seq(mut self, children: Vec<CallNode>) -> Self {
        self.mode = CallMode::Sequential;
        self.children = children;
        self
    }

    pub fn par(mut self, children: Vec<CallNode>) -> Self {
        self.mode = CallMode::Parallel;
        self.children = children;
        self
    }

    /// Pre-order traversal.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a CallNode)) {
        f(self);
        for child in &self.children {
            child.walk(f);
        }
    }

    /// Whether the caller holds its core while this node's children run.
    pub fn blocks_caller(&self) -> bool {
        self.children
            .iter()
            .any(|c| c.protocol == Protocol::Http1Blocking)
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(CallNode::depth).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestClass {
    pub name: String,
    pub root: CallNode,
    pub weight: f64,
    pub qos_target_p99: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub services: BTreeMap<String, ServiceSpec>,
    pub classes: Vec<RequestClass>,
    /// Extra round-trip time paid when a call crosses the edge/cloud boundary.
    pub edge_cloud_rtt: u64,
}

impl Topology {
    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.get(name)
    }

    /// One-way delay between two placements under the given cloud hop delay.
    pub fn hop_delay(&self, from: Placement, to: Placement, base_delay: u64) -> u64 {
        if from == to {
            base_delay
        } else {
            base_delay + self.edge_cloud_rtt / 2
        }
    }

    /// Mean latency of one request of `class` on an idle system.
    ///
    /// Parallel joins use the largest branch mean, so this is a lower bound on
    /// the true zero-load mean when branches are random.
    pub fn zero_load_latency(&self, class: &RequestClass, base_delay: u64) -> f64 {
        self.node_latency(&class.root, base_delay)
    }

    fn node_latency(&self, node: &CallNode, base_delay: u64) -> f64 {
        let Some(svc) = self.services.get(&node.target) else {
            return 0.0;
        };
        let own = svc.network_mean() + node.service_time.unwrap_or(svc.service_time).mean;
        let legs = node.children.iter().map(|c| {
            let child_placement = self
                .services
                .get(&c.target)
                .map_or(svc.placement, |s| s.placement);
            2.0 * self.hop_delay(svc.placement, child_placement, base_delay) as f64
                + self.node_latency(c, base_delay)
        });
        own + match node.mode {
            CallMode::Sequential => legs.sum::<f64>(),
            CallMode::Parallel => legs.fold(0.0, f64::max),
        }
    }

    /// Mean compute demand (service time only) summed over every call of a
    /// request of `class`, counting only services matching `filter`.
    pub fn compute_demand(&self, class: &RequestClass, filter: impl Fn(&ServiceSpec) -> bool) -> f64 {
        let mut total = 0.0;
        class.root.walk(&mut |n| {
            if let Some(svc) = self.services.get(&n.target) {
                if filter(svc) {
                    total += n.service_time.unwrap_or(svc.service_time).mean;
                }
            }
        });
        total
    }

    /// Services ordered back-end first: deepest call-tree position first,
    /// ties by name.
    pub fn backend_to_frontend(&self) -> Vec<String> {
        let mut depth: BTreeMap<&str, usize> = self.services.keys().map(|k| (k.as_str(), 0)).collect();
        for class in &self.classes {
            visit_depth(&class.root, 1, &mut depth);
        }
        let mut names: Vec<(&str, usize)> = depth.into_iter().collect();
        names.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        names.into_iter().map(|(n, _)| n.to_string()).collect()
    }
}

fn visit_depth<'a>(node: &'a CallNode, d: usize, depth: &mut BTreeMap<&'a str, usize>) {
    let e = depth.entry(node.target.as_str()).or_insert(0);
    *e = (*e).max(d);
    for c in &node.children {
        visit_depth(c, d + 1, depth);
    }
}

/// Checks every type invariant and reports each violation.
pub fn validate(t: &Topology) -> Vec<Issue> {
    let mut issues = Vec::new();
    if t.services.is_empty() {
        issues.push(Issue::new("topology", "no services declared"));
    }
    if t.classes.is_empty() {
        issues.push(Issue::new("topology", "no request classes declared"));
    }
    for (key, svc) in &t.services {
        let loc = format!("service {key}");
        if *key != svc.name {
            issues.push(Issue::new(&loc, format!("keyed as `{key}` but named `{}`", svc.name)));
        }
        if !is_identifier(&svc.name) {
            issues.push(Issue::new(&loc, "name is not a valid identifier"));
        }
        svc.service_time.check(&format!("{loc} service_time"), &mut issues);
        if let Some(net) = &svc.network_time {
            net.check(&format!("{loc} network_time"), &mut issues);
        }
        if svc.cores_per_instance < 1 {
            issues.push(Issue::new(&loc, "cores must be at least 1"));
        }
        if svc.initial_instances < 1 {
            issues.push(Issue::new(&loc, "instances must be at least 1"));
        }
        if svc.max_instances < svc.initial_instances {
            issues.push(Issue::new(
                &loc,
                format!(
                    "max_instances {} is below instances {}",
                    svc.max_instances, svc.initial_instances
                ),
            ));
        }
    }
    let mut weight_sum = 0.0;
    let mut seen = std::collections::BTreeSet::new();
    for class in &t.classes {
        let loc = format!("class {}", class.name);
        if !seen.insert(class.name.as_str()) {
            issues.push(Issue::new(&loc, "duplicate class name"));
        }
        if !is_identifier(&class.name) {
            issues.push(Issue::new(&loc, "name is not a valid identifier"));
        }
        if !(0.0..=1.0).contains(&class.weight) {
            issues.push(Issue::new(&loc, format!("weight {} outside [0,1]", class.weight)));
        }
        weight_sum += class.weight;
        if class.qos_target_p99 == 0 {
            issues.push(Issue::new(&loc, "qos_p99_us must be positive"));
        }
        class.root.walk(&mut |n| {
            if !t.services.contains_key(&n.target) {
                issues.push(Issue::new(&loc, format!("call target `{}` is not a declared service", n.target)));
            }
            if let Some(d) = &n.service_time {
                d.check(&format!("{loc} call {}", n.target), &mut issues);
            }
        });
    }
    if !t.classes.is_empty() && (weight_sum - 1.0).abs() > 1e-9 {
        issues.push(Issue::new(
            "classes",
            format!("weights sum to {weight_sum}, expected 1"),
        ));
    }
    issues
}

pub(crate) fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

/// Fills in the default p99 target for a class: a multiple of its zero-load
/// mean latency under the default cloud hop delay.
pub fn default_qos(t: &Topology, root: &CallNode) -> u64 {
    let probe = RequestClass {
        name: String::new(),
        root: root.clone(),
        weight: 1.0,
        qos_target_p99: 1,
    };
    (DEFAULT_QOS_MULTIPLE * t.zero_load_latency(&probe, DEFAULT_BASE_DELAY_US))
        .round()
        .max(1.0) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single() -> Topology {
        let mut services = BTreeMap::new();
        services.insert(
            "a".to_string(),
            ServiceSpec::new("a", DistributionSpec::deterministic(1000.0)),
        );
        Topology {
            services,
            classes: vec![RequestClass {
                name: "only".into(),
                root: CallNode::leaf("a"),
                weight: 1.0,
                qos_target_p99: 5000,
            }],
            edge_cloud_rtt: 0,
        }
    }

    #[test]
    fn valid_topology_has_no_issues() {
        assert!(validate(&single()).is_empty());
    }

    #[test]
    fn max_below_initial_is_one_issue() {
        let mut t = single();
        let a = t.services.get_mut("a").unwrap();
        a.initial_instances = 3;
        a.max_instances = 2;
        let issues = validate(&t);
        assert_eq!(issues.len(), 1, "{issues:?}");
        assert!(issues[0].message.contains("max_instances"));
    }

    #[test]
    fn negative_sigma_is_one_issue() {
        let mut t = single();
        t.services.get_mut("a").unwrap().service_time = DistributionSpec::lognormal(1000.0, -0.5);
        let issues = validate(&t);
        assert_eq!(issues.len(), 1, "{issues:?}");
        assert!(issues[0].message.contains("sigma"));
    }

    #[test]
    fn dangling_target_is_named() {
        let mut t = single();
        t.classes[0].root = CallNode::leaf("a").seq(vec![CallNode::leaf("ghost")]);
        let issues = validate(&t);
        assert_eq!(issues.len(), 1);
        assert!(issues[0].message.contains("ghost"));
    }

    #[test]
    fn zero_load_latency_counts_both_hop_directions() {
        let mut t = single();
        for (n, m) in [("b", 2000.0), ("c", 3000.0)] {
            t.services
                .insert(n.into(), ServiceSpec::new(n, DistributionSpec::deterministic(m)));
        }
        t.classes[0].root = CallNode::leaf("a").seq(vec![CallNode::leaf("b").seq(vec![CallNode::leaf("c")])]);
        assert_eq!(t.zero_load_latency(&t.classes[0], 50), 6200.0);
        assert_eq!(t.backend_to_frontend(), vec!["c", "b", "a"]);
    }

    #[test]
    fn moments_round_trip_through_lognormal() {
        let d = DistributionSpec::from_moments(6000.0, 1000.0f64.powi(2) + 2000.0f64.powi(2));
        assert!((d.variance() - 5.0e6).abs() < 1e-3);
        assert_eq!(DistributionSpec::from_moments(10.0, 0.0), DistributionSpec::deterministic(10.0));
    }
}

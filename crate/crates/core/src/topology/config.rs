//! Line-oriented topology documents.
//!
//! ```text
//! edge_cloud_rtt_us = 0
//!
//! [service nginx]
//! service_time = exp 2000
//! network_time = det 50
//! cores = 8
//! tier = frontend
//!
//! [class read]
//! weight = 1
//! qos_p99_us = 20000
//! -> nginx seq http1
//!   -> memcached seq http1
//! ```
//!
//! Call-tree lines nest by indentation. A call line may carry a per-call
//! compute override as `time=exp:1000`, `time=det:10` or `time=logn:6000:0.3`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{
    default_qos, is_identifier, validate, CallMode, CallNode, DistKind, DistributionSpec, Placement,
    Protocol, RequestClass, ServiceSpec, TierKind, Topology, TopologyError,
};

fn parse_err(line: usize, message: impl Into<String>) -> TopologyError {
    TopologyError::Parse {
        line,
        message: message.into(),
    }
}

enum Section {
    Top,
    Service(String),
    Class(usize),
}

struct RawClass {
    name: String,
    weight: Option<f64>,
    qos: Option<u64>,
    // (indent, node) in document order
    calls: Vec<(usize, usize, CallNode)>,
}

/// Parses and validates a topology document.
pub fn load_topology(text: &str) -> Result<Topology, TopologyError> {
    let mut services: BTreeMap<String, ServiceSpec> = BTreeMap::new();
    let mut service_seen: BTreeMap<String, Vec<&'static str>> = BTreeMap::new();
    let mut classes: Vec<RawClass> = Vec::new();
    let mut edge_cloud_rtt: Option<u64> = None;
    let mut section = Section::Top;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let trimmed = content.trim();

        if trimmed.starts_with('[') {
            let inner = trimmed
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| parse_err(lineno, "unterminated section header"))?;
            let mut parts = inner.split_whitespace();
            let (kind, name) = match (parts.next(), parts.next(), parts.next()) {
                (Some(k), Some(n), None) => (k, n),
                _ => return Err(parse_err(lineno, "section header must be `[service NAME]` or `[class NAME]`")),
            };
            if !is_identifier(name) {
                return Err(parse_err(lineno, format!("invalid name `{name}`")));
            }
            section = match kind {
                "service" => {
                    if services.contains_key(name) {
                        return Err(parse_err(lineno, format!("duplicate service `{name}`")));
                    }
                    services.insert(
                        name.to_string(),
                        ServiceSpec::new(name, DistributionSpec::deterministic(f64::NAN)),
                    );
                    service_seen.insert(name.to_string(), Vec::new());
                    Section::Service(name.to_string())
                }
                "class" => {
                    if classes.iter().any(|c| c.name == name) {
                        return Err(parse_err(lineno, format!("duplicate class `{name}`")));
                    }
                    classes.push(RawClass {
                        name: name.to_string(),
                        weight: None,
                        qos: None,
                        calls: Vec::new(),
                    });
                    Section::Class(classes.len() - 1)
                }
                other => return Err(parse_err(lineno, format!("unknown section kind `{other}`"))),
            };
            continue;
        }

        if let Some(rest) = trimmed.strip_prefix("->") {
            let Section::Class(ci) = section else {
                return Err(parse_err(lineno, "call line outside a class section"));
            };
            let indent = content.len() - content.trim_start().len();
            let node = parse_call(rest, lineno)?;
            classes[ci].calls.push((lineno, indent, node));
            continue;
        }

        let (key, value) = trimmed
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| parse_err(lineno, format!("expected `key = value`, got `{trimmed}`")))?;

        match &section {
            Section::Top => match key {
                "edge_cloud_rtt_us" => {
                    if edge_cloud_rtt.replace(parse_num(value, lineno)?).is_some() {
                        return Err(parse_err(lineno, "duplicate key `edge_cloud_rtt_us`"));
                    }
                }
                other => return Err(parse_err(lineno, format!("unknown top-level key `{other}`"))),
            },
            Section::Service(name) => {
                let svc = services.get_mut(name).expect("section registered");
                let seen = service_seen.get_mut(name).expect("section registered");
                let canonical: &'static str = match key {
                    "service_time" => {
                        svc.service_time = parse_dist(value, lineno)?;
                        "service_time"
                    }
                    "network_time" => {
                        svc.network_time = Some(parse_dist(value, lineno)?);
                        "network_time"
                    }
                    "cores" => {
                        svc.cores_per_instance = parse_num(value, lineno)?;
                        "cores"
                    }
                    "instances" => {
                        svc.initial_instances = parse_num(value, lineno)?;
                        "instances"
                    }
                    "max_instances" => {
                        svc.max_instances = parse_num(value, lineno)?;
                        "max_instances"
                    }
                    "tier" => {
                        svc.tier_kind = parse_tier(value, lineno)?;
                        "tier"
                    }
                    "placement" => {
                        svc.placement = match value {
                            "cloud" => Placement::Cloud,
                            "edge" => Placement::Edge,
                            other => return Err(parse_err(lineno, format!("unknown placement `{other}`"))),
                        };
                        "placement"
                    }
                    other => return Err(parse_err(lineno, format!("unknown service key `{other}`"))),
                };
                if seen.contains(&canonical) {
                    return Err(parse_err(lineno, format!("duplicate key `{canonical}`")));
                }
                seen.push(canonical);
            }
            Section::Class(ci) => {
                let class = &mut classes[*ci];
                match key {
                    "weight" => {
                        if class.weight.replace(parse_num(value, lineno)?).is_some() {
                            return Err(parse_err(lineno, "duplicate key `weight`"));
                        }
                    }
                    "qos_p99_us" => {
                        if class.qos.replace(parse_num(value, lineno)?).is_some() {
                            return Err(parse_err(lineno, "duplicate key `qos_p99_us`"));
                        }
                    }
                    other => return Err(parse_err(lineno, format!("unknown class key `{other}`"))),
                }
            }
        }
    }

    for (name, seen) in &service_seen {
        if !seen.contains(&"service_time") {
            return Err(parse_err(0, format!("service `{name}` is missing `service_time`")));
        }
        let svc = services.get_mut(name).expect("registered");
        if !seen.contains(&"max_instances") {
            svc.max_instances = svc.initial_instances;
        }
    }

    let mut topology = Topology {
        services,
        classes: Vec::with_capacity(classes.len()),
        edge_cloud_rtt: edge_cloud_rtt.unwrap_or(0),
    };
    let mut pending_qos = Vec::new();
    for raw in classes {
        let root = build_tree(&raw.name, raw.calls)?;
        pending_qos.push(raw.qos.is_none());
        topology.classes.push(RequestClass {
            name: raw.name,
            root,
            weight: raw.weight.unwrap_or(1.0),
            // placeholder until the tree is known to be valid
            qos_target_p99: raw.qos.unwrap_or(1),
        });
    }

    let issues = validate(&topology);
    if !issues.is_empty() {
        return Err(TopologyError::Validation(issues));
    }
    for (i, missing) in pending_qos.into_iter().enumerate() {
        if missing {
            let q = default_qos(&topology, &topology.classes[i].root);
            topology.classes[i].qos_target_p99 = q;
        }
    }
    Ok(topology)
}

fn build_tree(class: &str, calls: Vec<(usize, usize, CallNode)>) -> Result<CallNode, TopologyError> {
    // Stack of (indent, node) for the currently open ancestors.
    let mut stack: Vec<(usize, CallNode)> = Vec::new();
    let mut root: Option<CallNode> = None;
    for (lineno, indent, node) in calls {
        if stack.is_empty() {
            stack.push((indent, node));
            continue;
        }
        while let Some((top_indent, _)) = stack.last() {
            if *top_indent >= indent {
                let (_, done) = stack.pop().expect("non-empty");
                match stack.last_mut() {
                    Some((_, parent)) => parent.children.push(done),
                    None => {
                        return Err(parse_err(lineno, format!("class `{class}` has more than one root call")));
                    }
                }
            } else {
                break;
            }
        }
        stack.push((indent, node));
    }
    while let Some((_, done)) = stack.pop() {
        match stack.last_mut() {
            Some((_, parent)) => parent.children.push(done),
            None => root = Some(done),
        }
    }
    root.ok_or_else(|| parse_err(0, format!("class `{class}` has no call tree")))
}

fn parse_call(rest: &str, lineno: usize) -> Result<CallNode, TopologyError> {
    let mut tokens = rest.split_whitespace();
    let target = tokens
        .next()
        .ok_or_else(|| parse_err(lineno, "call line is missing a target"))?;
    if !is_identifier(target) {
        return Err(parse_err(lineno, format!("invalid call target `{target}`")));
    }
    let mut node = CallNode::leaf(target);
    for tok in tokens {
        match tok {
            "seq" => node.mode = CallMode::Sequential,
            "par" => node.mode = CallMode::Parallel,
            "rpc" => node.protocol = Protocol::RpcPipelined,
            "http1" => node.protocol = Protocol::Http1Blocking,
            t if t.starts_with("time=") => {
                let spec = t["time=".len()..].replace(':', " ");
                node.service_time = Some(parse_dist(&spec, lineno)?);
            }
            other => return Err(parse_err(lineno, format!("unknown call modifier `{other}`"))),
        }
    }
    Ok(node)
}

fn parse_num<T: std::str::FromStr>(value: &str, lineno: usize) -> Result<T, TopologyError> {
    value
        .parse()
        .map_err(|_| parse_err(lineno, format!("invalid number `{value}`")))
}

fn parse_dist(value: &str, lineno: usize) -> Result<DistributionSpec, TopologyError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    match parts.as_slice() {
        ["det", mean] => Ok(DistributionSpec::deterministic(parse_num(mean, lineno)?)),
        ["exp", mean] => Ok(DistributionSpec::exponential(parse_num(mean, lineno)?)),
        ["logn", mean, sigma] => Ok(DistributionSpec::lognormal(
            parse_num(mean, lineno)?,
            parse_num(sigma, lineno)?,
        )),
        _ => Err(parse_err(
            lineno,
            format!("expected `det|exp <mean>` or `logn <mean> <sigma>`, got `{value}`"),
        )),
    }
}

fn parse_tier(value: &str, lineno: usize) -> Result<TierKind, TopologyError> {
    Ok(match value {
        "frontend" => TierKind::Frontend,
        "logic" => TierKind::Logic,
        "cache" => TierKind::Cache,
        "database" => TierKind::Database,
        "edge" => TierKind::EdgeDevice,
        other => return Err(parse_err(lineno, format!("unknown tier `{other}`"))),
    })
}

fn dist_words(d: &DistributionSpec) -> String {
    match d.kind {
        DistKind::Deterministic => format!("det {}", d.mean),
        DistKind::Exponential => format!("exp {}", d.mean),
        DistKind::Lognormal => format!("logn {} {}", d.mean, d.sigma),
    }
}

/// Serializes a topology in the format accepted by [`load_topology`].
pub fn render(t: &Topology) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "edge_cloud_rtt_us = {}", t.edge_cloud_rtt);
    for svc in t.services.values() {
        let _ = writeln!(out, "\n[service {}]", svc.name);
        let _ = writeln!(out, "service_time = {}", dist_words(&svc.service_time));
        if let Some(net) = &svc.network_time {
            let _ = writeln!(out, "network_time = {}", dist_words(net));
        }
        let _ = writeln!(out, "cores = {}", svc.cores_per_instance);
        let _ = writeln!(out, "instances = {}", svc.initial_instances);
        let _ = writeln!(out, "max_instances = {}", svc.max_instances);
        let tier = match svc.tier_kind {
            TierKind::Frontend => "frontend",
            TierKind::Logic => "logic",
            TierKind::Cache => "cache",
            TierKind::Database => "database",
            TierKind::EdgeDevice => "edge",
        };
        let _ = writeln!(out, "tier = {tier}");
        let placement = match svc.placement {
            Placement::Cloud => "cloud",
            Placement::Edge => "edge",
        };
        let _ = writeln!(out, "placement = {placement}");
    }
    for class in &t.classes {
        let _ = writeln!(out, "\n[class {}]", class.name);
        let _ = writeln!(out, "weight = {}", class.weight);
        let _ = writeln!(out, "qos_p99_us = {}", class.qos_target_p99);
        render_call(&class.root, 0, &mut out);
    }
    out
}

fn render_call(node: &CallNode, depth: usize, out: &mut String) {
    let mode = match node.mode {
        CallMode::Sequential => "seq",
        CallMode::Parallel => "par",
    };
    let protocol = match node.protocol {
        Protocol::RpcPipelined => "rpc",
        Protocol::Http1Blocking => "http1",
    };
    let _ = write!(out, "{:width$}-> {} {mode} {protocol}", "", node.target, width = depth * 2);
    if let Some(d) = &node.service_time {
        let _ = write!(out, " time={}", dist_words(d).replace(' ', ":"));
    }
    out.push('\n');
    for c in &node.children {
        render_call(c, depth + 1, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
[service a]
service_time = det 1000

[class only]
-> a
";

    #[test]
    fn minimal_document() {
        let t = load_topology(MINIMAL).unwrap();
        assert_eq!(t.services.len(), 1);
        assert_eq!(t.classes.len(), 1);
        // default target: five times the 1000µs zero-load mean
        assert_eq!(t.classes[0].qos_target_p99, 5000);
        assert_eq!(t.services["a"].max_instances, 1);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let doc = "
[service a]
service_time = exp 100
[class x]
weight = 0.5
-> a
[class y]
weight = 0.4
-> a
";
        match load_topology(doc) {
            Err(TopologyError::Validation(issues)) => {
                assert!(issues.iter().any(|i| i.message.contains("0.9")), "{issues:?}")
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_reference_is_named() {
        let doc = "
[service a]
service_time = exp 100
[class x]
-> a
  -> ghost
";
        let err = load_topology(doc).unwrap_err();
        assert!(matches!(err, TopologyError::Validation(_)));
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let doc = "[service a]\nservice_time = exp 100\ncolour = blue\n[class x]\n-> a\n";
        assert!(matches!(load_topology(doc), Err(TopologyError::Parse { line: 3, .. })));
        assert!(matches!(
            load_topology("bogus = 1\n"),
            Err(TopologyError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn malformed_lines_are_parse_errors() {
        for doc in [
            "[service a\n",
            "[service]\n",
            "[service a]\nservice_time = gamma 3\n",
            "[service a]\nservice_time = logn 100\n",
            "[service a]\ncores = many\n",
            "-> a\n",
            "[service a]\nservice_time = exp 1\nservice_time = exp 2\n",
            "[service a]\nservice_time = exp 1\n[class x]\n-> a bogus\n",
        ] {
            assert!(
                matches!(load_topology(doc), Err(TopologyError::Parse { .. })),
                "accepted: {doc:?}"
            );
        }
    }

    #[test]
    fn two_roots_rejected() {
        let doc = "[service a]\nservice_time = exp 1\n[class x]\n-> a\n-> a\n";
        assert!(matches!(load_topology(doc), Err(TopologyError::Parse { line: 5, .. })));
    }

    #[test]
    fn nested_tree_shape() {
        let doc = "
edge_cloud_rtt_us = 200
[service a]
service_time = exp 10
[service b]
service_time = det 10
network_time = det 2
[service c]
service_time = logn 10 0.5
tier = database
[class x]
qos_p99_us = 999
-> a par http1
  -> b seq rpc
    -> c http1 time=det:7
  -> c
";
        let t = load_topology(doc).unwrap();
        assert_eq!(t.edge_cloud_rtt, 200);
        let root = &t.classes[0].root;
        assert_eq!(root.mode, CallMode::Parallel);
        assert_eq!(root.protocol, Protocol::Http1Blocking);
        assert_eq!(root.children.len(), 2);
        assert_eq!(root.children[0].target, "b");
        assert_eq!(root.children[0].children[0].target, "c");
        assert_eq!(
            root.children[0].children[0].service_time,
            Some(DistributionSpec::deterministic(7.0))
        );
        assert_eq!(root.children[1].target, "c");
        assert_eq!(t.classes[0].qos_target_p99, 999);
        assert_eq!(load_topology(&render(&t)).unwrap(), t);
    }
}

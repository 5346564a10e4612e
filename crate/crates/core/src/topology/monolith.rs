use std::collections::BTreeMap;

use super::{
    validate, CallMode, CallNode, DistributionSpec, Issue, RequestClass, ServiceSpec, TierKind,
    Topology, TopologyError,
};

/// Name of the service produced by [`to_monolith`].
pub const MONOLITH: &str = "monolith";

fn invalid(location: &str, message: impl Into<String>) -> TopologyError {
    TopologyError::Validation(vec![Issue::new(location, message)])
}

/// Collapses every non-storage tier into a single `monolith` service.
///
/// Each class's root becomes one monolith call whose compute draw has the
/// same mean and variance as the sum of the collapsed calls it replaces
/// (summed work, not critical path). Cache and database subtrees are kept
/// and hang off the monolith call in pre-order, called sequentially. Network
/// processing between collapsed tiers disappears; the monolith keeps the
/// entry tier's. Core totals are preserved: the monolith uses the widest
/// collapsed instance size and enough instances to cover the same cores.
pub fn to_monolith(t: &Topology) -> Result<Topology, TopologyError> {
    let issues = validate(t);
    if !issues.is_empty() {
        return Err(TopologyError::Validation(issues));
    }
    let collapsed: Vec<&ServiceSpec> = t.services.values().filter(|s| !s.tier_kind.is_storage()).collect();
    if collapsed.is_empty() {
        return Err(invalid("topology", "no non-database tiers to collapse"));
    }
    if t.services.get(MONOLITH).is_some_and(|s| s.tier_kind.is_storage()) {
        return Err(invalid("topology", "a storage tier is already named `monolith`"));
    }

    let mut classes = Vec::with_capacity(t.classes.len());
    // (weight, mean, variance) of each class's collapsed demand
    let mut mixture = Vec::new();
    let mut entry: Option<&ServiceSpec> = None;
    for class in &t.classes {
        let root_svc = &t.services[&class.root.target];
        if root_svc.tier_kind.is_storage() {
            check_storage_subtree(t, &class.root, &class.name)?;
            classes.push(class.clone());
            continue;
        }
        entry.get_or_insert(root_svc);
        let mut demand = (0.0, 0.0);
        let mut storage_calls = Vec::new();
        collect(t, &class.root, &class.name, &mut demand, &mut storage_calls)?;
        mixture.push((class.weight, demand.0, demand.1));
        let root = CallNode {
            target: MONOLITH.to_string(),
            mode: CallMode::Sequential,
            protocol: class.root.protocol,
            service_time: Some(DistributionSpec::from_moments(demand.0, demand.1)),
            children: storage_calls,
        };
        classes.push(RequestClass {
            name: class.name.clone(),
            root,
            weight: class.weight,
            qos_target_p99: class.qos_target_p99,
        });
    }

    let total_w: f64 = mixture.iter().map(|m| m.0).sum();
    let (mean, second) = if total_w > 0.0 {
        mixture.iter().fold((0.0, 0.0), |(m, s), &(w, mu, var)| {
            (m + w * mu / total_w, s + w * (var + mu * mu) / total_w)
        })
    } else {
        let n = mixture.len().max(1) as f64;
        mixture
            .iter()
            .fold((0.0, 0.0), |(m, s), &(_, mu, var)| (m + mu / n, s + (var + mu * mu) / n))
    };
    let service_time = if mean > 0.0 {
        DistributionSpec::from_moments(mean, (second - mean * mean).max(0.0))
    } else {
        // No class reaches a collapsed tier; keep the cheapest collapsed draw.
        collapsed[0].service_time
    };

    let cores = collapsed.iter().map(|s| s.cores_per_instance).max().unwrap_or(1);
    let total_cores: u32 = collapsed.iter().map(|s| s.cores_per_instance * s.initial_instances).sum();
    let total_max: u32 = collapsed.iter().map(|s| s.cores_per_instance * s.max_instances).sum();
    let entry = entry.unwrap_or(collapsed[0]);
    let monolith = ServiceSpec {
        name: MONOLITH.to_string(),
        service_time,
        network_time: entry.network_time,
        cores_per_instance: cores,
        initial_instances: total_cores.div_ceil(cores),
        max_instances: total_max.div_ceil(cores),
        tier_kind: TierKind::Frontend,
        placement: entry.placement,
    };

    let mut services: BTreeMap<String, ServiceSpec> = t
        .services
        .iter()
        .filter(|(_, s)| s.tier_kind.is_storage())
        .map(|(k, s)| (k.clone(), s.clone()))
        .collect();
    services.insert(MONOLITH.to_string(), monolith);
    Ok(Topology {
        services,
        classes,
        edge_cloud_rtt: t.edge_cloud_rtt,
    })
}

fn collect(
    t: &Topology,
    node: &CallNode,
    class: &str,
    demand: &mut (f64, f64),
    storage: &mut Vec<CallNode>,
) -> Result<(), TopologyError> {
    let svc = &t.services[&node.target];
    if svc.tier_kind.is_storage() {
        check_storage_subtree(t, node, class)?;
        storage.push(node.clone());
        return Ok(());
    }
    let d = node.service_time.unwrap_or(svc.service_time);
    demand.0 += d.mean;
    demand.1 += d.variance();
    for c in &node.children {
        collect(t, c, class, demand, storage)?;
    }
    Ok(())
}

fn check_storage_subtree(t: &Topology, node: &CallNode, class: &str) -> Result<(), TopologyError> {
    let mut bad = None;
    node.walk(&mut |n| {
        if bad.is_none() && !t.services[&n.target].tier_kind.is_storage() {
            bad = Some(n.target.clone());
        }
    });
    match bad {
        Some(name) => Err(invalid(
            &format!("class {class}"),
            format!("storage call `{}` reaches non-storage tier `{name}`", node.target),
        )),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::preset;

    fn svc(name: &str, mean: f64, tier: TierKind) -> ServiceSpec {
        ServiceSpec {
            tier_kind: tier,
            ..ServiceSpec::new(name, DistributionSpec::deterministic(mean))
        }
    }

    fn topo(services: Vec<ServiceSpec>, root: CallNode) -> Topology {
        Topology {
            services: services.into_iter().map(|s| (s.name.clone(), s)).collect(),
            classes: vec![RequestClass {
                name: "c".into(),
                root,
                weight: 1.0,
                qos_target_p99: 100_000,
            }],
            edge_cloud_rtt: 0,
        }
    }

    #[test]
    fn sequential_chain_sums_demand() {
        let t = topo(
            vec![
                svc("l1", 1000.0, TierKind::Logic),
                svc("l2", 2000.0, TierKind::Logic),
                svc("l3", 3000.0, TierKind::Logic),
                svc("db", 4000.0, TierKind::Database),
            ],
            CallNode::leaf("l1").seq(vec![CallNode::leaf("l2").seq(vec![
                CallNode::leaf("l3").seq(vec![CallNode::leaf("db")])
            ])]),
        );
        let m = to_monolith(&t).unwrap();
        assert_eq!(m.services.len(), 2);
        assert_eq!(m.services[MONOLITH].service_time, DistributionSpec::deterministic(6000.0));
        let root = &m.classes[0].root;
        assert_eq!(root.target, MONOLITH);
        assert_eq!(root.service_time.unwrap().mean, 6000.0);
        assert_eq!(root.children.len(), 1);
        assert_eq!(root.children[0].target, "db");
        assert_eq!(m.services["db"].service_time.mean, 4000.0);
        assert!(validate(&m).is_empty());
    }

    #[test]
    fn parallel_fan_out_counts_total_work() {
        // hand enumeration: 0 (root) + 1000 + 2000 = 3000, not max(1000, 2000)
        let t = topo(
            vec![
                svc("root", 0.5, TierKind::Frontend),
                svc("a", 1000.0, TierKind::Logic),
                svc("b", 2000.0, TierKind::Logic),
            ],
            CallNode::leaf("root").par(vec![CallNode::leaf("a"), CallNode::leaf("b")]),
        );
        let m = to_monolith(&t).unwrap();
        assert_eq!(m.classes[0].root.service_time.unwrap().mean, 3000.5);
    }

    #[test]
    fn two_tier_keeps_the_cache() {
        let t = preset("two_tier").unwrap();
        let m = to_monolith(&t).unwrap();
        assert_eq!(m.services.len(), 2);
        assert_eq!(m.services["memcached"], t.services["memcached"]);
        assert_eq!(m.services[MONOLITH].service_time.mean, t.services["nginx"].service_time.mean);
        assert_eq!(m.classes[0].root.children[0].target, "memcached");
    }

    #[test]
    fn database_only_topology_rejected() {
        let t = topo(vec![svc("db", 10.0, TierKind::Database)], CallNode::leaf("db"));
        assert!(matches!(to_monolith(&t), Err(TopologyError::Validation(_))));
    }

    #[test]
    fn demand_preserved_per_class_for_presets() {
        for name in ["social_network", "ecommerce", "two_tier"] {
            let t = preset(name).unwrap();
            let m = to_monolith(&t).unwrap();
            for (before, after) in t.classes.iter().zip(&m.classes) {
                let a = t.compute_demand(before, |_| true);
                let b = m.compute_demand(after, |_| true);
                assert!((a - b).abs() <= 1e-9 * a, "{name}/{}: {a} vs {b}", before.name);
                assert_eq!(before.qos_target_p99, after.qos_target_p99);
            }
            let cores = |t: &Topology| -> u32 {
                t.services
                    .values()
                    .filter(|s| !s.tier_kind.is_storage())
                    .map(|s| s.cores_per_instance * s.initial_instances)
                    .sum()
            };
            assert!(cores(&m) >= cores(&t));
        }
    }
}

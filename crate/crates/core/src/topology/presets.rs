//! Shipped topologies. Service times are exponential with hand-picked means;
//! graphs are structural approximations of the benchmark applications, not
//! their full production graphs.

use super::{load_topology, to_monolith, Topology, TopologyError};

pub const PRESET_NAMES: [&str; 6] = [
    "two_tier",
    "social_network",
    "ecommerce",
    "swarm_edge",
    "swarm_cloud",
    "social_monolith",
];

/// Web server in front of an in-memory cache, connected by HTTP/1.1.
const TWO_TIER: &str = "
[service nginx]
service_time = exp 1000
network_time = exp 100
cores = 8
instances = 1
max_instances = 8
tier = frontend

[service memcached]
service_time = exp 200
network_time = exp 50
cores = 4
instances = 1
max_instances = 1
tier = cache

[class read]
weight = 1
qos_p99_us = 20000
-> nginx seq
  -> memcached seq http1
";

/// Front-end, five logic tiers, three caches and three databases.
const SOCIAL_NETWORK: &str = "
[service nginx]
service_time = exp 600
network_time = exp 100
cores = 8
instances = 2
max_instances = 16
tier = frontend

[service compose_post]
service_time = exp 800
network_time = exp 80
cores = 4
instances = 2
max_instances = 16

[service text]
service_time = exp 500
network_time = exp 60
cores = 4
instances = 1
max_instances = 8

[service user]
service_time = exp 300
network_time = exp 60
cores = 4
instances = 2
max_instances = 16

[service home_timeline]
service_time = exp 700
network_time = exp 80
cores = 4
instances = 2
max_instances = 16

[service social_graph]
service_time = exp 400
network_time = exp 60
cores = 4
instances = 1
max_instances = 8

[service post_cache]
service_time = exp 150
network_time = exp 40
cores = 4
instances = 1
max_instances = 4
tier = cache

[service timeline_cache]
service_time = exp 150
network_time = exp 40
cores = 4
instances = 1
max_instances = 4
tier = cache

[service user_cache]
service_time = exp 100
network_time = exp 40
cores = 4
instances = 1
max_instances = 4
tier = cache

[service post_db]
service_time = exp 1200
network_time = exp 60
cores = 4
instances = 1
max_instances = 4
tier = database

[service timeline_db]
service_time = exp 1200
network_time = exp 60
cores = 4
instances = 1
max_instances = 4
tier = database

[service social_graph_db]
service_time = exp 1000
network_time = exp 60
cores = 4
instances = 1
max_instances = 4
tier = database

[class read_home_timeline]
weight = 0.6
-> nginx seq
  -> user seq http1
    -> user_cache http1
  -> home_timeline par http1
    -> timeline_cache http1
    -> post_cache http1

[class compose_post]
weight = 0.3
-> nginx seq
  -> compose_post par http1
    -> text http1
    -> user seq http1
      -> user_cache http1
    -> post_db http1
    -> home_timeline seq http1
      -> social_graph http1
        -> social_graph_db http1
      -> timeline_db http1

[class follow]
weight = 0.1
-> nginx seq
  -> user seq http1
    -> user_cache http1
  -> social_graph seq http1
    -> social_graph_db http1
";

const ECOMMERCE: &str = "
[service frontend]
service_time = exp 700
network_time = exp 100
cores = 8
instances = 2
max_instances = 16
tier = frontend

[service catalogue]
service_time = exp 900
network_time = exp 80
cores = 4
instances = 2
max_instances = 8

[service cart]
service_time = exp 600
network_time = exp 60
cores = 4
instances = 1
max_instances = 8

[service orders]
service_time = exp 1500
network_time = exp 80
cores = 4
instances = 1
max_instances = 8

[service payment]
service_time = exp 3000
network_time = exp 80
cores = 4
instances = 1
max_instances = 8

[service shipping]
service_time = exp 1000
network_time = exp 60
cores = 4
instances = 1
max_instances = 8

[service user]
service_time = exp 400
network_time = exp 60
cores = 4
instances = 1
max_instances = 8

[service catalogue_cache]
service_time = exp 150
network_time = exp 40
cores = 4
instances = 1
max_instances = 4
tier = cache

[service cart_db]
service_time = exp 1000
network_time = exp 60
cores = 4
instances = 1
max_instances = 4
tier = database

[service order_db]
service_time = exp 1500
network_time = exp 60
cores = 4
instances = 1
max_instances = 4
tier = database

[service user_db]
service_time = exp 800
network_time = exp 60
cores = 4
instances = 1
max_instances = 4
tier = database

[class browse]
weight = 0.8
-> frontend seq
  -> catalogue http1
    -> catalogue_cache http1

[class place_order]
weight = 0.2
-> frontend seq
  -> user http1
    -> user_db http1
  -> cart http1
    -> cart_db http1
  -> orders seq http1
    -> payment http1
    -> shipping http1
    -> order_db http1
";

/// Drone swarm with recognition and route planning on the drones themselves.
const SWARM_EDGE: &str = "
[service drone]
service_time = exp 1000
network_time = exp 100
cores = 1
instances = 16
max_instances = 16
tier = edge
placement = edge

[service image_recognition]
service_time = exp 8000
network_time = exp 200
cores = 1
instances = 16
max_instances = 16
tier = edge
placement = edge

[service motion_controller]
service_time = exp 2000
network_time = exp 100
cores = 1
instances = 16
max_instances = 16
tier = edge
placement = edge

[class recognize]
weight = 0.8
-> drone seq
  -> image_recognition
    -> motion_controller

[class avoid_obstacle]
weight = 0.2
-> drone seq
  -> motion_controller
";

/// Same swarm, offloading recognition and control to cloud tiers.
const SWARM_CLOUD: &str = "
edge_cloud_rtt_us = 40000

[service drone]
service_time = exp 1000
network_time = exp 100
cores = 1
instances = 16
max_instances = 16
tier = edge
placement = edge

[service image_recognition]
service_time = exp 4000
network_time = exp 100
cores = 8
instances = 4
max_instances = 16

[service motion_controller]
service_time = exp 1000
network_time = exp 50
cores = 8
instances = 2
max_instances = 8

[service swarm_db]
service_time = exp 500
network_time = exp 50
cores = 4
instances = 1
max_instances = 4
tier = database

[class recognize]
weight = 0.8
-> drone seq
  -> image_recognition seq
    -> motion_controller
    -> swarm_db

[class avoid_obstacle]
weight = 0.2
-> drone seq
  -> motion_controller
";

/// Returns the named preset topology.
pub fn preset(name: &str) -> Result<Topology, TopologyError> {
    let doc = match name {
        "two_tier" => TWO_TIER,
        "social_network" => SOCIAL_NETWORK,
        "ecommerce" => ECOMMERCE,
        "swarm_edge" => SWARM_EDGE,
        "swarm_cloud" => SWARM_CLOUD,
        "social_monolith" => return to_monolith(&load_topology(SOCIAL_NETWORK)?),
        other => return Err(TopologyError::UnknownPreset(other.to_string())),
    };
    load_topology(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{validate, Placement, Protocol, TierKind};

    #[test]
    fn every_preset_validates() {
        for name in PRESET_NAMES {
            let t = preset(name).unwrap();
            assert!(validate(&t).is_empty(), "{name}");
        }
    }

    #[test]
    fn two_tier_is_front_end_and_cache_over_http1() {
        let t = preset("two_tier").unwrap();
        assert_eq!(t.services.len(), 2);
        assert_eq!(t.services["nginx"].tier_kind, TierKind::Frontend);
        assert_eq!(t.services["memcached"].tier_kind, TierKind::Cache);
        let edge = &t.classes[0].root.children[0];
        assert_eq!(edge.target, "memcached");
        assert_eq!(edge.protocol, Protocol::Http1Blocking);
    }

    #[test]
    fn social_network_layering() {
        let t = preset("social_network").unwrap();
        assert!(t.services.len() >= 12);
        let count = |k: TierKind| t.services.values().filter(|s| s.tier_kind == k).count();
        assert_eq!(count(TierKind::Frontend), 1);
        assert_eq!(count(TierKind::Logic), 5);
        assert_eq!(count(TierKind::Cache), 3);
        assert_eq!(count(TierKind::Database), 3);
        // every service is reachable from some class
        let mut used = std::collections::BTreeSet::new();
        for c in &t.classes {
            c.root.walk(&mut |n| {
                used.insert(n.target.clone());
            });
        }
        assert_eq!(used.len(), t.services.len());
    }

    #[test]
    fn swarm_cloud_crosses_the_edge() {
        let t = preset("swarm_cloud").unwrap();
        assert!(t.edge_cloud_rtt > 0);
        assert_eq!(t.services["drone"].placement, Placement::Edge);
        assert_eq!(t.services["image_recognition"].placement, Placement::Cloud);
        let edge = preset("swarm_edge").unwrap();
        assert!(edge.services.values().all(|s| s.placement == Placement::Edge));
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(preset("ghost"), Err(TopologyError::UnknownPreset(n)) if n == "ghost"));
    }
}

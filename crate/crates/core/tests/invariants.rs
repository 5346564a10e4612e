use std::collections::BTreeMap;

use microsim::engine::{run, HostLayout, LoadBalancePolicy};
use microsim::management::{AutoscalerPolicy, FaultPlan, Hotspot, PolicySet, RateLimiterConfig, SlowServers};
use microsim::metrics::{goodput, goodput_search, probe_seed};
use microsim::topology::{
    CallMode, CallNode, DistributionSpec, Protocol, RequestClass, ServiceSpec, TierKind, Topology,
};
use microsim::tracing::{critical_path_length, per_tier_breakdown};
use microsim::workload::{build_skewed_population, WorkloadPlan};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct NodeGen {
    parent: usize,
    service: usize,
    parallel: bool,
    http1: bool,
}

fn build_tree(nodes: &[NodeGen], services: &[String]) -> CallNode {
    fn build(i: usize, nodes: &[NodeGen], services: &[String]) -> CallNode {
        let g = &nodes[i];
        let mut n = CallNode::leaf(services[g.service % services.len()].clone());
        if g.http1 && i > 0 {
            n.protocol = Protocol::Http1Blocking;
        }
        n.mode = if g.parallel { CallMode::Parallel } else { CallMode::Sequential };
        n.children = (i + 1..nodes.len())
            .filter(|&j| nodes[j].parent % j == i)
            .map(|j| build(j, nodes, services))
            .collect();
        n
    }
    build(0, nodes, services)
}

fn topology_strategy() -> impl Strategy<Value = Topology> {
    let service = (1u32..3000, 0u8..3, 1u32..4, 1u32..3, 0u32..3, any::<bool>());
    (
        prop::collection::vec(service, 1..5),
        prop::collection::vec((any::<usize>(), any::<usize>(), any::<bool>(), any::<bool>()), 1..7),
        prop::option::of(0u32..4),
    )
        .prop_map(|(svcs, nodes, second)| {
            let mut services = BTreeMap::new();
            let names: Vec<String> = (0..svcs.len()).map(|i| format!("s{i}")).collect();
            for (i, &(mean, kind, cores, inst, extra, net)) in svcs.iter().enumerate() {
                let mean = mean as f64;
                let dist = match kind {
                    0 => DistributionSpec::deterministic(mean),
                    1 => DistributionSpec::exponential(mean),
                    _ => DistributionSpec::lognormal(mean, 0.5),
                };
                let mut s = ServiceSpec::new(names[i].clone(), dist);
                s.cores_per_instance = cores;
                s.initial_instances = inst;
                s.max_instances = inst + extra;
                s.network_time = net.then(|| DistributionSpec::exponential(mean / 10.0 + 1.0));
                if i == svcs.len() - 1 && i > 0 {
                    s.tier_kind = TierKind::Database;
                }
                services.insert(names[i].clone(), s);
            }
            let gens: Vec<NodeGen> = nodes
                .iter()
                .map(|&(parent, service, parallel, http1)| NodeGen {
                    parent,
                    service,
                    parallel,
                    http1,
                })
                .collect();
            let mut classes = vec![RequestClass {
                name: "a".into(),
                root: build_tree(&gens, &names),
                weight: 1.0,
                qos_target_p99: 20_000,
            }];
            if let Some(root) = second {
                classes[0].weight = 0.75;
                classes.push(RequestClass {
                    name: "b".into(),
                    root: CallNode::leaf(names[root as usize % names.len()].clone()),
                    weight: 0.25,
                    qos_target_p99: 5_000,
                });
            }
            Topology {
                services,
                classes,
                edge_cloud_rtt: 0,
            }
        })
}

fn policy_strategy() -> impl Strategy<Value = PolicySet> {
    (
        1u32..5,
        any::<bool>(),
        prop::option::of((100.0f64..3000.0, 1u32..20)),
        any::<bool>(),
        any::<bool>(),
        0u8..4,
        prop::option::of(1u32..4),
    )
        .prop_map(|(pool, autoscale, limiter, hotspot, slow, lb, shared)| {
            let mut faults = FaultPlan::default();
            if hotspot {
                faults.hotspots.push(Hotspot {
                    service: "s0".into(),
                    factor: 3.0,
                    start: 400_000,
                    end: 900_000,
                });
            }
            if slow {
                faults.slow_servers.push(SlowServers {
                    fraction: 0.5,
                    frequency: 0.5,
                    start: 300_000,
                    end: Some(1_200_000),
                });
            }
            PolicySet {
                pool_size: pool,
                autoscaler: autoscale.then(|| AutoscalerPolicy {
                    threshold: 0.5,
                    window: 200_000,
                    startup_delay: 300_000,
                    ..Default::default()
                }),
                rate_limiter: limiter.map(|(rate, burst)| RateLimiterConfig { rate, burst }),
                faults,
                load_balance: [
                    LoadBalancePolicy::RoundRobin,
                    LoadBalancePolicy::Random,
                    LoadBalancePolicy::UserSharded,
                    LoadBalancePolicy::Misconfigured(0),
                ][lb as usize],
                hosts: shared.map_or(HostLayout::Dedicated, |hosts| HostLayout::Shared { hosts }),
                monitor_window_us: 250_000,
                ..Default::default()
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn runs_conserve_requests_and_are_reproducible(
        t in topology_strategy(),
        p in policy_strategy(),
        rate in 50.0f64..4000.0,
        seed in any::<u64>(),
    ) {
        let w = WorkloadPlan {
            population: build_skewed_population(100, 60).unwrap(),
            ..WorkloadPlan::poisson(rate)
        };
        let duration = 2_000_000;
        let r = run(&t, &w, &p, seed, duration, 200_000).unwrap();
        prop_assert!(r.counters.conserved(), "{:?}", r.counters);

        let again = run(&t, &w, &p, seed, duration, 200_000).unwrap();
        prop_assert_eq!(r.to_json(), again.to_json());

        for (svc, ticks) in &r.series {
            let spec = &t.services[svc];
            for (k, s) in ticks.iter().enumerate() {
                prop_assert!((0.0..=1.0 + 1e-9).contains(&s.utilization), "{svc} util {}", s.utilization);
                prop_assert!(s.instances >= spec.initial_instances && s.instances <= spec.max_instances);
                prop_assert_eq!(s.t_us, (k as u64 + 1) * r.window_us);
            }
        }

        for trace in &r.traces {
            let root = trace.root().unwrap();
            prop_assert_eq!(critical_path_length(trace).unwrap(), root.duration());
            for s in &trace.spans {
                if let Some(parent) = s.parent_span_id {
                    let p = trace.spans.iter().find(|x| x.span_id == parent).unwrap();
                    prop_assert!(p.start <= s.start && s.end <= p.end);
                }
            }
        }
        if !r.traces.is_empty() {
            let fractions = per_tier_breakdown(&r.traces).unwrap();
            let sum: f64 = fractions.values().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "breakdown sums to {sum}");
        }
    }
}

fn mm1() -> Topology {
    Topology {
        services: BTreeMap::from([(
            "q".to_string(),
            ServiceSpec::new("q", DistributionSpec::exponential(1000.0)),
        )]),
        classes: vec![RequestClass {
            name: "job".into(),
            root: CallNode::leaf("q"),
            weight: 1.0,
            qos_target_p99: 10_000,
        }],
        edge_cloud_rtt: 0,
    }
}

#[test]
fn goodput_search_agrees_with_a_linear_sweep() {
    let t = mm1();
    let p = PolicySet {
        retain_traces: false,
        monitor_window_us: 100_000_000,
        ..Default::default()
    };
    let template = WorkloadPlan::poisson(1.0);
    let (duration, warmup) = (400_000_000, 5_000_000);
    let qos = 10_000;
    let tol = 0.02;
    let found = goodput_search(&t, &template, &p, qos, 9, (100.0, 1000.0, tol), duration, warmup).unwrap();
    assert!(found.rate > 0.0 && found.rate < 1000.0);
    // M/M/1 sojourn p99 is ln(100)/(µ − λ)
    let limit = 1000.0 - 100f64.ln() * 1e6 / qos as f64;
    assert!(found.probes.len() <= ((900.0f64 / (tol * 100.0)).log2()).ceil() as usize + 1);

    // the sweep steps at the search's own resolution
    let step = (tol * found.rate).floor();
    let mut sweep = 0.0;
    let mut rate = 100.0;
    for i in 0.. {
        let r = run(&t, &template.with_rate(rate), &p, probe_seed(9, i), duration, warmup).unwrap();
        if goodput(&r, qos) == 0.0 {
            break;
        }
        sweep = rate;
        rate += step;
        assert!(rate < limit + 10.0 * step, "sweep ran past the analytic boundary");
    }
    assert!(
        (found.rate - sweep).abs() <= step,
        "search {:.1} vs sweep {sweep:.1} (step {step})",
        found.rate
    );
    for pt in &found.probes {
        assert_eq!(pt.qos_met, pt.offered_load <= found.rate);
    }
}

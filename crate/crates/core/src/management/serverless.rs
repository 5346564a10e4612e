//! Function-per-call execution with cold starts, a warm pool, remote state
//! handoff and per-GB-second billing. Capacity is unbounded: every call gets
//! its own function instance, reusing a warm one when available.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use slab::Slab;

use crate::engine::{draw, sample_network_time, sample_service_time, EngineError, SimRng, Streams};
use crate::metrics::{CostLedger, Counters, EndToEndTick, RunResult, ScaleEvent, TickSample};
use crate::topology::{validate, CallMode, DistributionSpec, Topology, DEFAULT_BASE_DELAY_US};
use crate::tracing::{percentile_in_place, Span, Trace};
use crate::workload::{gen_arrivals, WorkloadPlan};

use super::DEFAULT_MONITOR_WINDOW_US;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateStore {
    S3Like,
    RemoteMemory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerlessConfig {
    pub enabled: bool,
    pub cold_start: DistributionSpec,
    /// How long an idle function instance stays warm, µs.
    pub warm_pool_ttl: u64,
    pub state_store: StateStore,
    pub s3_latency: DistributionSpec,
    pub memory_latency: DistributionSpec,
    /// Added to every parent→child hop.
    pub placement_jitter: DistributionSpec,
    /// Price per GB-second of function execution.
    pub price_per_req_gbs: f64,
    /// Price per instance-hour of the serverful deployment.
    pub price_per_instance_hour: f64,
    /// Memory allotted to every function instance.
    pub memory_gb: f64,
}

impl Default for ServerlessConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            cold_start: DistributionSpec::lognormal(200_000.0, 0.3),
            warm_pool_ttl: 600_000_000,
            state_store: StateStore::RemoteMemory,
            s3_latency: DistributionSpec::lognormal(20_000.0, 0.5),
            memory_latency: DistributionSpec::lognormal(500.0, 0.5),
            placement_jitter: DistributionSpec::exponential(200.0),
            price_per_req_gbs: 0.000_016_666_7,
            price_per_instance_hour: 0.34,
            memory_gb: 0.5,
        }
    }
}

impl ServerlessConfig {
    pub fn store_latency(&self) -> &DistributionSpec {
        match self.state_store {
            StateStore::S3Like => &self.s3_latency,
            StateStore::RemoteMemory => &self.memory_latency,
        }
    }

    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        let dists = [
            ("cold_start", &self.cold_start),
            ("s3 latency", &self.s3_latency),
            ("remote-memory latency", &self.memory_latency),
            ("placement jitter", &self.placement_jitter),
        ];
        for (name, d) in dists {
            if !(d.mean.is_finite() && d.mean > 0.0 && d.sigma >= 0.0) {
                out.push(format!("serverless {name} must have a positive mean"));
            }
        }
        if self.s3_latency.mean <= self.memory_latency.mean {
            out.push("s3-like transfers must be slower on average than remote memory".into());
        }
        if !(self.memory_gb > 0.0 && self.price_per_req_gbs >= 0.0 && self.price_per_instance_hour >= 0.0) {
            out.push("serverless memory must be positive and prices non-negative".into());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Arrival,
    Start(usize),
    ComputeDone(usize),
    Respond(usize),
    Tick,
}

struct Node {
    service: usize,
    mode: CallMode,
    service_time: Option<DistributionSpec>,
    children: Vec<usize>,
}

struct Call {
    req: usize,
    node: usize,
    parent: usize,
    span_id: u32,
    start: u64,
    network: u64,
    compute: u64,
    next_child: usize,
    outstanding: usize,
}

struct Req {
    class: usize,
    user: u32,
    arrival: u64,
    trace_id: u64,
    next_span: u32,
    spans: Vec<Span>,
}

struct Fn {
    name: Arc<str>,
    service_time: DistributionSpec,
    network_time: Option<DistributionSpec>,
    rng: SimRng,
    /// Idle-since times of warm instances, oldest first.
    warm: VecDeque<u64>,
    busy: u32,
    spans: Vec<u64>,
}

const NONE: usize = usize::MAX;

/// Serverless execution of the topology's call trees over `duration`, with
/// one-second monitor ticks.
pub fn serverless_run(
    t: &Topology,
    w: &WorkloadPlan,
    cfg: &ServerlessConfig,
    seed: u64,
    duration: u64,
) -> Result<RunResult, EngineError> {
    serverless_run_windowed(t, w, cfg, seed, duration, DEFAULT_MONITOR_WINDOW_US)
}

pub fn serverless_run_windowed(
    t: &Topology,
    w: &WorkloadPlan,
    cfg: &ServerlessConfig,
    seed: u64,
    duration: u64,
    window: u64,
) -> Result<RunResult, EngineError> {
    let cfg_err = |m: String| EngineError::Config(m);
    if !cfg.enabled {
        return Err(cfg_err("serverless mode is not enabled".into()));
    }
    let mut problems = cfg.check();
    problems.extend(validate(t).iter().map(ToString::to_string));
    if duration == 0 || window == 0 {
        problems.push("duration and window must be positive".into());
    }
    if !problems.is_empty() {
        return Err(cfg_err(problems.join("; ")));
    }
    let streams = Streams::new(seed);
    let weights: Vec<f64> = t.classes.iter().map(|c| c.weight).collect();
    let arrivals = gen_arrivals(&w.arrivals, &weights, &w.population, duration, &streams)
        .map_err(|e| cfg_err(e.to_string()))?;

    let names: Vec<&String> = t.services.keys().collect();
    let mut fns: Vec<Fn> = t
        .services
        .values()
        .map(|s| Fn {
            name: Arc::from(s.name.as_str()),
            service_time: s.service_time,
            network_time: s.network_time,
            rng: streams.get(&format!("service/{}", s.name)),
            warm: VecDeque::new(),
            busy: 0,
            spans: Vec::new(),
        })
        .collect();
    let classes: Vec<Vec<Node>> = t
        .classes
        .iter()
        .map(|c| {
            let mut out = Vec::new();
            flatten(&c.root, &names, &mut out);
            out
        })
        .collect();
    let mut cold_rng = streams.get("serverless/cold");
    let mut store_rng = streams.get("serverless/store");
    let mut jitter_rng = streams.get("serverless/jitter");

    let mut heap: BinaryHeap<Reverse<(u64, u64, Ev)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<_>, time: u64, ev: Ev| {
        seq += 1;
        heap.push(Reverse((time, seq, ev)));
    };
    if let Some(a) = arrivals.first() {
        push(&mut heap, a.time, Ev::Arrival);
    }
    if window <= duration {
        push(&mut heap, window, Ev::Tick);
    }

    let mut calls: Slab<Call> = Slab::new();
    let mut reqs: Slab<Req> = Slab::new();
    let mut next_arrival = 0;
    let mut counters = Counters::default();
    let mut latencies = vec![Vec::new(); t.classes.len()];
    let mut window_lat = Vec::new();
    let mut window_counts = [0u64; 2];
    let mut e2e = Vec::new();
    let mut series: Vec<Vec<TickSample>> = vec![Vec::new(); fns.len()];
    let mut traces = Vec::new();
    let mut ledger = CostLedger::default();
    let hop = DEFAULT_BASE_DELAY_US;

    while let Some(Reverse((now, _, ev))) = heap.pop() {
        if now > duration || (now == duration && ev != Ev::Tick) {
            continue;
        }
        match ev {
            Ev::Arrival => {
                let a = arrivals[next_arrival];
                next_arrival += 1;
                if let Some(n) = arrivals.get(next_arrival) {
                    push(&mut heap, n.time, Ev::Arrival);
                }
                counters.arrivals += 1;
                window_counts[0] += 1;
                let req = reqs.insert(Req {
                    class: a.class as usize,
                    user: a.user,
                    arrival: now,
                    trace_id: (next_arrival - 1) as u64,
                    next_span: 1,
                    spans: Vec::new(),
                });
                let c = calls.insert(new_call(req, 0, NONE, 0));
                push(&mut heap, now, Ev::Start(c));
            }
            Ev::Start(c) => {
                let node = &classes[reqs[calls[c].req].class][calls[c].node];
                let f = &mut fns[node.service];
                while f.warm.front().is_some_and(|&idle| now - idle > cfg.warm_pool_ttl) {
                    f.warm.pop_front();
                }
                let cold = if f.warm.pop_back().is_some() {
                    0
                } else {
                    ledger.cold_starts += 1;
                    draw(&cfg.cold_start, &mut cold_rng).round() as u64
                };
                f.busy += 1;
                ledger.function_invocations += 1;
                let network = f
                    .network_time
                    .map_or(0, |d| sample_network_time(&d, 1.0, 1.0, &mut f.rng));
                let compute = sample_service_time(&node.service_time.unwrap_or(f.service_time), 1.0, &mut f.rng);
                let call = &mut calls[c];
                call.start = now;
                call.network = network;
                call.compute = compute + cold;
                push(&mut heap, now + cold + network + compute, Ev::ComputeDone(c));
            }
            Ev::ComputeDone(c) => {
                let node = &classes[reqs[calls[c].req].class][calls[c].node];
                let n = node.children.len();
                if n == 0 {
                    if let Some(req) = finish_call(
                        c, now, &mut calls, &mut reqs, &classes, &mut fns, cfg, &mut ledger, &mut heap, &mut push, hop,
                    ) {
                        complete(
                            req,
                            now,
                            &mut reqs,
                            &mut counters,
                            &mut latencies,
                            &mut window_lat,
                            &mut window_counts,
                            &mut traces,
                            &t.classes,
                        );
                    }
                    continue;
                }
                let issue: Vec<usize> = match node.mode {
                    CallMode::Sequential => vec![0],
                    CallMode::Parallel => (0..n).collect(),
                };
                calls[c].next_child = issue.len();
                calls[c].outstanding = issue.len();
                for k in issue {
                    let child_node = classes[reqs[calls[c].req].class][calls[c].node].children[k];
                    let req = calls[c].req;
                    let span = reqs[req].next_span;
                    reqs[req].next_span += 1;
                    let child = calls.insert(new_call(req, child_node, c, span));
                    let handoff = draw(cfg.store_latency(), &mut store_rng).round() as u64;
                    let jitter = draw(&cfg.placement_jitter, &mut jitter_rng).round() as u64;
                    push(&mut heap, now + hop + handoff + jitter, Ev::Start(child));
                }
            }
            Ev::Respond(c) => {
                let call = calls.remove(c);
                let p = call.parent;
                calls[p].outstanding -= 1;
                let pnode = &classes[reqs[calls[p].req].class][calls[p].node];
                let next = calls[p].next_child;
                if next < pnode.children.len() {
                    let child_node = pnode.children[next];
                    calls[p].next_child += 1;
                    calls[p].outstanding += 1;
                    let req = calls[p].req;
                    let span = reqs[req].next_span;
                    reqs[req].next_span += 1;
                    let child = calls.insert(new_call(req, child_node, p, span));
                    let handoff = draw(cfg.store_latency(), &mut store_rng).round() as u64;
                    let jitter = draw(&cfg.placement_jitter, &mut jitter_rng).round() as u64;
                    push(&mut heap, now + hop + handoff + jitter, Ev::Start(child));
                } else if calls[p].outstanding == 0 {
                    if let Some(req) = finish_call(
                        p, now, &mut calls, &mut reqs, &classes, &mut fns, cfg, &mut ledger, &mut heap, &mut push, hop,
                    ) {
                        complete(
                            req,
                            now,
                            &mut reqs,
                            &mut counters,
                            &mut latencies,
                            &mut window_lat,
                            &mut window_counts,
                            &mut traces,
                            &t.classes,
                        );
                    }
                }
            }
            Ev::Tick => {
                for (f, s) in fns.iter_mut().zip(series.iter_mut()) {
                    while f.warm.front().is_some_and(|&idle| now - idle > cfg.warm_pool_ttl) {
                        f.warm.pop_front();
                    }
                    let live = f.busy + f.warm.len() as u32;
                    s.push(TickSample {
                        t_us: now,
                        utilization: if live == 0 { 0.0 } else { f.busy as f64 / live as f64 },
                        p99_us: percentile_in_place(&mut f.spans, 99.0).unwrap_or(0),
                        queue_len: 0,
                        instances: live,
                    });
                    f.spans.clear();
                }
                let [arr, comp] = std::mem::take(&mut window_counts);
                e2e.push(EndToEndTick {
                    t_us: now,
                    arrivals: arr,
                    completions: comp,
                    drops: 0,
                    p99_us: percentile_in_place(&mut window_lat, 99.0).unwrap_or(0),
                });
                window_lat.clear();
                if now + window <= duration {
                    push(&mut heap, now + window, Ev::Tick);
                }
            }
        }
    }
    counters.in_flight_at_end = reqs.len() as u64;
    let mut unfinished: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (_, r) in reqs.iter() {
        unfinished.entry(t.classes[r.class].name.clone()).or_default().push(duration - r.arrival);
    }
    for v in unfinished.values_mut() {
        v.sort_unstable();
    }

    let text = format!("serverless\n{}\n{w:?}\n{cfg:?}\n{duration}\n{window}", crate::topology::render(t));
    Ok(RunResult {
        seed,
        config_digest: format!("{:016x}", crate::engine::fnv1a(text.as_bytes())),
        duration_us: duration,
        warmup_us: 0,
        window_us: window,
        qos_p99_us: t.classes.iter().map(|c| (c.name.clone(), c.qos_target_p99)).collect(),
        class_weights: t.classes.iter().map(|c| (c.name.clone(), c.weight)).collect(),
        latencies: t.classes.iter().map(|c| c.name.clone()).zip(latencies).collect(),
        unfinished_us: unfinished,
        services: t.backend_to_frontend(),
        series: fns.iter().map(|f| f.name.to_string()).zip(series).collect(),
        e2e,
        counters,
        scale_timeline: Vec::<ScaleEvent>::new(),
        cost: ledger,
        traces,
    })
}

fn new_call(req: usize, node: usize, parent: usize, span_id: u32) -> Call {
    Call {
        req,
        node,
        parent,
        span_id,
        start: 0,
        network: 0,
        compute: 0,
        next_child: 0,
        outstanding: 0,
    }
}

/// Releases the function instance, bills it and sends the response. Returns
/// the request id when the finished call was the root.
#[allow(clippy::too_many_arguments)]
fn finish_call(
    c: usize,
    now: u64,
    calls: &mut Slab<Call>,
    reqs: &mut Slab<Req>,
    classes: &[Vec<Node>],
    fns: &mut [Fn],
    cfg: &ServerlessConfig,
    ledger: &mut CostLedger,
    heap: &mut BinaryHeap<Reverse<(u64, u64, Ev)>>,
    push: &mut impl FnMut(&mut BinaryHeap<Reverse<(u64, u64, Ev)>>, u64, Ev),
    hop: u64,
) -> Option<usize> {
    let call = &calls[c];
    let req = call.req;
    let s = classes[reqs[req].class][call.node].service;
    let f = &mut fns[s];
    f.busy -= 1;
    f.warm.push_back(now);
    f.spans.push(now - call.start);
    ledger.function_gb_s += (now - call.start) as f64 / 1e6 * cfg.memory_gb;
    let parent_span = (call.parent != NONE).then(|| calls[call.parent].span_id);
    let trace_id = reqs[req].trace_id;
    reqs[req].spans.push(Span {
        trace_id,
        span_id: call.span_id,
        parent_span_id: parent_span,
        service: f.name.clone(),
        start: call.start,
        end: now,
        network_us: call.network,
        compute_us: call.compute,
        blocked_us: 0,
    });
    if call.parent == NONE {
        calls.remove(c);
        Some(req)
    } else {
        push(heap, now + hop, Ev::Respond(c));
        None
    }
}

#[allow(clippy::too_many_arguments)]
fn complete(
    req: usize,
    now: u64,
    reqs: &mut Slab<Req>,
    counters: &mut Counters,
    latencies: &mut [Vec<u64>],
    window_lat: &mut Vec<u64>,
    window_counts: &mut [u64; 2],
    traces: &mut Vec<Trace>,
    classes: &[crate::topology::RequestClass],
) {
    let r = reqs.remove(req);
    let lat = now - r.arrival;
    counters.completions += 1;
    window_counts[1] += 1;
    latencies[r.class].push(lat);
    window_lat.push(lat);
    let mut spans = r.spans;
    spans.sort_by_key(|s| s.span_id);
    traces.push(Trace {
        trace_id: r.trace_id,
        class: Arc::from(classes[r.class].name.as_str()),
        user: r.user,
        spans,
    });
}

fn flatten(node: &crate::topology::CallNode, names: &[&String], out: &mut Vec<Node>) -> usize {
    let id = out.len();
    out.push(Node {
        service: names.iter().position(|n| **n == node.target).expect("validated target"),
        mode: node.mode,
        service_time: node.service_time,
        children: Vec::new(),
    });
    let kids = node.children.iter().map(|c| flatten(c, names, out)).collect();
    out[id].children = kids;
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{CallNode, RequestClass, ServiceSpec};
    use crate::workload::{ArrivalProcess, UserPopulation};

    fn chain3() -> Topology {
        let services = ["a", "b", "c"]
            .iter()
            .map(|n| (n.to_string(), ServiceSpec::new(*n, DistributionSpec::deterministic(1000.0))))
            .collect();
        Topology {
            services,
            classes: vec![RequestClass {
                name: "c".into(),
                root: CallNode::leaf("a").seq(vec![CallNode::leaf("b").seq(vec![CallNode::leaf("c")])]),
                weight: 1.0,
                qos_target_p99: 1_000_000,
            }],
            edge_cloud_rtt: 0,
        }
    }

    fn det_cfg(store: StateStore) -> ServerlessConfig {
        ServerlessConfig {
            state_store: store,
            s3_latency: DistributionSpec::deterministic(20_000.0),
            memory_latency: DistributionSpec::deterministic(500.0),
            placement_jitter: DistributionSpec::deterministic(10.0),
            cold_start: DistributionSpec::deterministic(100_000.0),
            ..Default::default()
        }
    }

    fn plan(rate: f64) -> WorkloadPlan {
        WorkloadPlan {
            arrivals: ArrivalProcess::Deterministic { rate },
            population: UserPopulation::uniform(1),
        }
    }

    #[test]
    fn first_request_cold_starts_each_service_once() {
        let r = serverless_run(&chain3(), &plan(1.0), &det_cfg(StateStore::RemoteMemory), 1, 1_500_000).unwrap();
        assert_eq!(r.counters.completions, 1);
        assert_eq!(r.cost.cold_starts, 3);
        // 3 cold starts + 3 computes + 2 handoffs + 2 jitters + 4 hops
        let expect = 3 * 100_000 + 3 * 1000 + 2 * 500 + 2 * 10 + 4 * 50;
        assert_eq!(r.latencies["c"], vec![expect]);
    }

    #[test]
    fn warm_handoff_difference() {
        let run = |s| serverless_run(&chain3(), &plan(1.0), &det_cfg(s), 1, 5_500_000).unwrap();
        let s3 = run(StateStore::S3Like);
        let mem = run(StateStore::RemoteMemory);
        // skip the cold first request
        let (a, b) = (&s3.latencies["c"][1..], &mem.latencies["c"][1..]);
        assert_eq!(a.len(), 4);
        assert_eq!(s3.cost.cold_starts, 3);
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x - y, 2 * 19_500);
        }
    }

    #[test]
    fn warm_pool_expires() {
        let mut cfg = det_cfg(StateStore::RemoteMemory);
        cfg.warm_pool_ttl = 500_000;
        let r = serverless_run(&chain3(), &plan(1.0), &cfg, 1, 3_500_000).unwrap();
        assert_eq!(r.counters.completions, 3);
        assert_eq!(r.cost.cold_starts, 9);
        assert!(r.counters.conserved());
    }

    #[test]
    fn disabled_or_invalid_config_rejected() {
        let mut cfg = det_cfg(StateStore::RemoteMemory);
        cfg.enabled = false;
        assert!(serverless_run(&chain3(), &plan(1.0), &cfg, 1, 1_000_000).is_err());
        let mut cfg = det_cfg(StateStore::RemoteMemory);
        cfg.s3_latency = DistributionSpec::deterministic(100.0);
        assert!(serverless_run(&chain3(), &plan(1.0), &cfg, 1, 1_000_000).is_err());
    }
}

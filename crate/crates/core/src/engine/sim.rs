use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use slab::Slab;

use super::{
    fnv1a, route, sample_network_time, sample_service_time, EngineError, HostLayout, HostServer, LoadBalancePolicy,
    NetworkProfile, SimRng, Streams,
};
use crate::management::{
    apply_faults, autoscale_tick, FaultState, PolicySet, ScaleAction, ScaleView, TokenBucket,
};
use crate::metrics::{Counters, CostLedger, EndToEndTick, RunResult, ScaleEvent, TickSample};
use crate::topology::{render, validate, CallMode, DistributionSpec, Placement, Protocol, Topology};
use crate::tracing::{percentile_in_place, Span, Trace};
use crate::workload::{gen_arrivals, Arrival, WorkloadPlan};

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Arrival,
    /// A call reaches its target service.
    Deliver(usize),
    EndCompute(usize),
    /// A call's response reaches the caller instance.
    Respond(usize),
    ScaleComplete(usize),
    MonitorTick,
    FaultTrigger,
}

struct FlatNode {
    service: usize,
    mode: CallMode,
    protocol: Protocol,
    service_time: Option<DistributionSpec>,
    children: Vec<usize>,
    blocks: bool,
}

struct Service {
    name: Arc<str>,
    service_time: DistributionSpec,
    network_time: Option<DistributionSpec>,
    cores: u32,
    placement: Placement,
    storage: bool,
    initial: u32,
    max: u32,
    lb: LoadBalancePolicy,
    routable: Vec<usize>,
    pending: u32,
    rr: usize,
    route_rng: SimRng,
    sample_rng: SimRng,
    // cores currently busy across instances, and cores online
    busy: u32,
    capacity: u32,
    online: u32,
    last: u64,
    busy_int: u128,
    cap_int: u128,
    inst_us: u64,
    spans: Vec<u64>,
}

struct Pool {
    size: u32,
    in_use: u32,
    waiters: VecDeque<usize>,
}

struct Instance {
    service: usize,
    host: usize,
    busy: u32,
    queue: VecDeque<usize>,
    pools: Vec<Pool>,
    routable: bool,
    online: bool,
}

struct Call {
    req: usize,
    node: usize,
    parent: usize,
    instance: usize,
    caller: usize,
    conn: bool,
    span_id: u32,
    start: u64,
    network: u64,
    compute: u64,
    blocked_since: u64,
    core_held: bool,
    next_child: usize,
    outstanding: usize,
}

struct Request {
    class: usize,
    user: u32,
    arrival: u64,
    trace_id: u64,
    next_span: u32,
    spans: Vec<Span>,
}

/// Stepping interface to one simulation. [`run`] drives it to the end.
pub struct Engine {
    topology: Topology,
    policy: PolicySet,
    seed: u64,
    digest: String,
    duration: u64,
    warmup: u64,
    window: u64,
    now: u64,
    seq: u64,
    heap: BinaryHeap<Reverse<(u64, u64, Ev)>>,

    class_names: Vec<Arc<str>>,
    classes: Vec<Vec<FlatNode>>,
    services: Vec<Service>,
    instances: Vec<Instance>,
    hosts: Vec<HostServer>,
    next_shared_host: usize,
    shared_hosts: usize,
    faults: FaultState,
    fault_times: Vec<u64>,
    next_fault: usize,

    arrivals: Vec<Arrival>,
    next_arrival: usize,
    limiter: Option<TokenBucket>,
    calls: Slab<Call>,
    requests: Slab<Request>,

    counters: Counters,
    latencies: Vec<Vec<u64>>,
    window_latencies: Vec<u64>,
    window_counts: [u64; 3],
    series: Vec<Vec<TickSample>>,
    e2e: Vec<EndToEndTick>,
    scale_timeline: Vec<ScaleEvent>,
    traces: Vec<Trace>,
}

/// Runs a workload plan to completion.
pub fn run(
    t: &Topology,
    w: &WorkloadPlan,
    p: &PolicySet,
    seed: u64,
    duration: u64,
    warmup: u64,
) -> Result<RunResult, EngineError> {
    if duration == 0 {
        return Err(EngineError::Config("duration must be positive".into()));
    }
    let weights: Vec<f64> = t.classes.iter().map(|c| c.weight).collect();
    let streams = Streams::new(seed);
    let arrivals = gen_arrivals(&w.arrivals, &weights, &w.population, duration, &streams)
        .map_err(|e| EngineError::Config(e.to_string()))?;
    let mut engine = Engine::new(t, arrivals, p, seed, duration, warmup)?;
    engine.digest = digest(t, &format!("{w:?}"), p, duration, warmup);
    Ok(engine.finish())
}

/// Runs an explicit arrival list; arrivals must be sorted by time.
pub fn run_with_arrivals(
    t: &Topology,
    arrivals: Vec<Arrival>,
    p: &PolicySet,
    seed: u64,
    duration: u64,
    warmup: u64,
) -> Result<RunResult, EngineError> {
    Ok(Engine::new(t, arrivals, p, seed, duration, warmup)?.finish())
}

fn digest(t: &Topology, workload: &str, p: &PolicySet, duration: u64, warmup: u64) -> String {
    let text = format!("{}\n{workload}\n{p:?}\n{duration}\n{warmup}", render(t));
    format!("{:016x}", fnv1a(text.as_bytes()))
}

fn config_err(msg: impl Into<String>) -> EngineError {
    EngineError::Config(msg.into())
}

impl Engine {
    pub fn new(
        t: &Topology,
        arrivals: Vec<Arrival>,
        p: &PolicySet,
        seed: u64,
        duration: u64,
        warmup: u64,
    ) -> Result<Self, EngineError> {
        let issues = validate(t);
        if !issues.is_empty() {
            let msgs: Vec<String> = issues.iter().map(ToString::to_string).collect();
            return Err(config_err(msgs.join("; ")));
        }
        let problems = p.check();
        if !problems.is_empty() {
            return Err(config_err(problems.join("; ")));
        }
        if duration == 0 || warmup >= duration {
            return Err(config_err(format!("need duration > warmup, got {duration} and {warmup}")));
        }
        if arrivals.windows(2).any(|w| w[0].time > w[1].time) {
            return Err(config_err("arrivals are not sorted by time"));
        }
        if let Some(a) = arrivals.iter().find(|a| a.class as usize >= t.classes.len()) {
            return Err(config_err(format!("arrival names class index {}", a.class)));
        }
        let names: Vec<&String> = t.services.keys().collect();
        let index_of = |name: &str| names.iter().position(|n| n.as_str() == name);
        for name in p
            .pool_overrides
            .keys()
            .chain(p.lb_overrides.keys())
            .chain(p.faults.hotspots.iter().map(|h| &h.service))
            .chain(p.faults.misroutes.iter().map(|m| &m.service))
        {
            if index_of(name).is_none() {
                return Err(config_err(format!("policy names unknown service `{name}`")));
            }
        }
        for m in &p.faults.misroutes {
            if m.instance >= t.services[&m.service].initial_instances as usize {
                return Err(config_err(format!(
                    "misroute targets instance {} of `{}`, which has {}",
                    m.instance, m.service, t.services[&m.service].initial_instances
                )));
            }
        }

        let streams = Streams::new(seed);
        let services: Vec<Service> = t
            .services
            .values()
            .map(|s| Service {
                name: Arc::from(s.name.as_str()),
                service_time: s.service_time,
                network_time: s.network_time,
                cores: s.cores_per_instance,
                placement: s.placement,
                storage: s.tier_kind.is_storage(),
                initial: s.initial_instances,
                max: s.max_instances,
                lb: p.lb_for(&s.name),
                routable: Vec::new(),
                pending: 0,
                rr: 0,
                route_rng: streams.get(&format!("route/{}", s.name)),
                sample_rng: streams.get(&format!("service/{}", s.name)),
                busy: 0,
                capacity: 0,
                online: 0,
                last: 0,
                busy_int: 0,
                cap_int: 0,
                inst_us: 0,
                spans: Vec::new(),
            })
            .collect();

        let classes = t
            .classes
            .iter()
            .map(|c| {
                let mut nodes = Vec::new();
                flatten(&c.root, &index_of, &mut nodes);
                nodes
            })
            .collect();

        let shared_hosts = match p.hosts {
            HostLayout::Dedicated => 0,
            HostLayout::Shared { hosts } => hosts as usize,
        };
        let n_services = services.len();
        let window = p.window();
        let mut e = Engine {
            topology: t.clone(),
            policy: p.clone(),
            seed,
            digest: String::new(),
            duration,
            warmup,
            window,
            now: 0,
            seq: 0,
            heap: BinaryHeap::new(),
            class_names: t.classes.iter().map(|c| Arc::from(c.name.as_str())).collect(),
            classes,
            services,
            instances: Vec::new(),
            hosts: (0..shared_hosts)
                .map(|id| HostServer {
                    id,
                    frequency: p.frequency,
                    capacity: 0,
                })
                .collect(),
            next_shared_host: 0,
            shared_hosts,
            faults: FaultState::new(&p.faults, p.frequency, 0, &[], &streams),
            fault_times: p.faults.trigger_times(),
            next_fault: 0,
            arrivals,
            next_arrival: 0,
            limiter: p.rate_limiter.map(TokenBucket::new),
            calls: Slab::new(),
            requests: Slab::new(),
            counters: Counters::default(),
            latencies: vec![Vec::new(); t.classes.len()],
            window_latencies: Vec::new(),
            window_counts: [0; 3],
            series: vec![Vec::new(); n_services],
            e2e: Vec::new(),
            scale_timeline: Vec::new(),
            traces: Vec::new(),
        };
        for s in 0..n_services {
            for _ in 0..e.services[s].initial {
                e.add_instance(s);
            }
            e.scale_timeline.push(ScaleEvent {
                t_us: 0,
                service: e.services[s].name.to_string(),
                instances: e.services[s].online,
            });
        }
        // slow-server faults pick among the hosts that exist at start
        let slowable: Vec<usize> = if shared_hosts > 0 {
            (0..shared_hosts).collect()
        } else {
            (0..e.hosts.len()).collect()
        };
        e.faults = FaultState::new(&p.faults, p.frequency, e.hosts.len(), &slowable, &streams);
        e.digest = digest(t, &format!("{} explicit arrivals", e.arrivals.len()), p, duration, warmup);

        if let Some(a) = e.arrivals.first() {
            e.schedule(a.time, Ev::Arrival);
        }
        if window <= duration {
            e.schedule(window, Ev::MonitorTick);
        }
        if let Some(&f) = e.fault_times.first() {
            e.schedule(f, Ev::FaultTrigger);
        }
        Ok(e)
    }

    fn schedule(&mut self, time: u64, ev: Ev) {
        debug_assert!(time >= self.now);
        self.seq += 1;
        self.heap.push(Reverse((time, self.seq, ev)));
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Replaces the network profile for all later hops and draws.
    pub fn set_network_profile(&mut self, p: NetworkProfile) -> Result<(), EngineError> {
        if !(p.stack_factor >= 1.0 && p.stack_factor.is_finite()) {
            return Err(config_err(format!("stack_factor must be >= 1, got {}", p.stack_factor)));
        }
        self.policy.network = p;
        Ok(())
    }

    fn service_index(&self, name: &str) -> Option<usize> {
        self.services.iter().position(|s| &*s.name == name)
    }

    /// Busy cores of a service right now, counting cores held by blocked calls.
    pub fn busy_cores(&self, service: &str) -> Option<u32> {
        self.service_index(service).map(|s| self.services[s].busy)
    }

    /// Connections in use from every instance of `caller` towards `downstream`.
    pub fn connections_in_use(&self, caller: &str, downstream: &str) -> Option<u32> {
        let (c, d) = (self.service_index(caller)?, self.service_index(downstream)?);
        Some(
            self.instances
                .iter()
                .filter(|i| i.service == c)
                .map(|i| i.pools[d].in_use)
                .sum(),
        )
    }

    pub fn hosts(&self) -> &[HostServer] {
        &self.hosts
    }

    pub fn counters(&self) -> Counters {
        let mut c = self.counters;
        c.in_flight_at_end = self.requests.len() as u64;
        c
    }

    /// Processes the next event, returning its time, or `None` once the run
    /// is over. Ticks at exactly the run duration still run; other events at
    /// or after it are discarded.
    pub fn step(&mut self) -> Option<u64> {
        loop {
            let Reverse((time, _, ev)) = self.heap.pop()?;
            if time > self.duration || (time == self.duration && ev != Ev::MonitorTick) {
                continue;
            }
            debug_assert!(time >= self.now);
            self.now = time;
            self.handle(ev);
            return Some(time);
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrival => self.on_arrival(),
            Ev::Deliver(c) => self.on_deliver(c),
            Ev::EndCompute(c) => self.on_end_compute(c),
            Ev::Respond(c) => self.on_respond(c),
            Ev::ScaleComplete(s) => {
                self.services[s].pending -= 1;
                self.add_instance(s);
                self.record_scale(s);
            }
            Ev::MonitorTick => self.on_tick(),
            Ev::FaultTrigger => self.on_fault(),
        }
    }

    // ---- instances and hosts

    fn add_instance(&mut self, s: usize) {
        let cores = self.services[s].cores;
        let host = if self.shared_hosts > 0 && !self.services[s].storage {
            let h = self.next_shared_host % self.shared_hosts;
            self.next_shared_host += 1;
            h
        } else {
            let id = self.hosts.len();
            self.hosts.push(HostServer {
                id,
                frequency: self.policy.frequency,
                capacity: 0,
            });
            if id >= self.faults.host_frequency.len() {
                self.faults.add_host();
            }
            id
        };
        self.hosts[host].capacity += cores;
        let pools = self
            .services
            .iter()
            .map(|d| Pool {
                size: self.policy.pool_size_for(&d.name),
                in_use: 0,
                waiters: VecDeque::new(),
            })
            .collect();
        let id = self.instances.len();
        self.instances.push(Instance {
            service: s,
            host,
            busy: 0,
            queue: VecDeque::new(),
            pools,
            routable: true,
            online: true,
        });
        self.touch(s);
        let svc = &mut self.services[s];
        svc.routable.push(id);
        svc.capacity += cores;
        svc.online += 1;
    }

    fn record_scale(&mut self, s: usize) {
        self.scale_timeline.push(ScaleEvent {
            t_us: self.now,
            service: self.services[s].name.to_string(),
            instances: self.services[s].routable.len() as u32,
        });
    }

    /// Brings utilization and instance-time integrals up to `now`.
    fn touch(&mut self, s: usize) {
        let now = self.now;
        let svc = &mut self.services[s];
        let dt = now - svc.last;
        if dt > 0 {
            svc.busy_int += svc.busy as u128 * dt as u128;
            svc.cap_int += svc.capacity as u128 * dt as u128;
            svc.inst_us += svc.online as u64 * dt;
            svc.last = now;
        }
    }

    fn set_busy(&mut self, inst: usize, delta: i32) {
        let s = self.instances[inst].service;
        self.touch(s);
        let i = &mut self.instances[inst];
        i.busy = i.busy.checked_add_signed(delta).expect("busy cores underflow");
        let svc = &mut self.services[s];
        svc.busy = svc.busy.checked_add_signed(delta).expect("busy cores underflow");
        assert!(i.busy <= svc.cores, "instance exceeded its cores");
    }

    fn maybe_retire(&mut self, inst: usize) {
        let i = &self.instances[inst];
        if i.online && !i.routable && i.busy == 0 && i.queue.is_empty() {
            let s = i.service;
            self.touch(s);
            self.instances[inst].online = false;
            let svc = &mut self.services[s];
            svc.capacity -= svc.cores;
            svc.online -= 1;
        }
    }

    // ---- request flow

    fn on_arrival(&mut self) {
        let a = self.arrivals[self.next_arrival];
        self.next_arrival += 1;
        if let Some(next) = self.arrivals.get(self.next_arrival) {
            self.schedule(next.time, Ev::Arrival);
        }
        self.counters.arrivals += 1;
        self.window_counts[0] += 1;
        if let Some(l) = &mut self.limiter {
            if !l.admit(self.now) {
                self.counters.drops += 1;
                self.window_counts[2] += 1;
                return;
            }
        }
        let req = self.requests.insert(Request {
            class: a.class as usize,
            user: a.user,
            arrival: self.now,
            trace_id: (self.next_arrival - 1) as u64,
            next_span: 1,
            spans: Vec::new(),
        });
        let call = self.calls.insert(Call {
            req,
            node: 0,
            parent: NONE,
            instance: NONE,
            caller: NONE,
            conn: false,
            span_id: 0,
            start: 0,
            network: 0,
            compute: 0,
            blocked_since: 0,
            core_held: false,
            next_child: 0,
            outstanding: 0,
        });
        self.on_deliver(call);
    }

    fn node(&self, c: usize) -> &FlatNode {
        let call = &self.calls[c];
        &self.classes[self.requests[call.req].class][call.node]
    }

    fn on_deliver(&mut self, c: usize) {
        let s = self.node(c).service;
        let user = self.requests[self.calls[c].req].user;
        let lb = match self.faults.misroute.get(&*self.services[s].name) {
            Some(&i) => LoadBalancePolicy::Misconfigured(i),
            None => self.services[s].lb,
        };
        let svc = &mut self.services[s];
        let idx = route(lb, svc.routable.len(), user, &mut svc.rr, &mut svc.route_rng)
            .expect("services keep at least their initial instances");
        let inst = svc.routable[idx];
        let call = &mut self.calls[c];
        call.instance = inst;
        call.start = self.now;
        self.instances[inst].queue.push_back(c);
        self.try_start(inst);
    }

    fn try_start(&mut self, inst: usize) {
        let s = self.instances[inst].service;
        while self.instances[inst].busy < self.services[s].cores {
            let Some(c) = self.instances[inst].queue.pop_front() else { break };
            self.set_busy(inst, 1);
            let freq = self.faults.host_frequency[self.instances[inst].host];
            let stack = self.policy.network.stack_factor;
            let hot = self.faults.hotspot_factor(&self.services[s].name);
            let st = self.node(c).service_time;
            let svc = &mut self.services[s];
            let network = svc
                .network_time
                .map_or(0, |d| sample_network_time(&d, stack, freq, &mut svc.sample_rng));
            let mut compute = sample_service_time(&st.unwrap_or(svc.service_time), freq, &mut svc.sample_rng);
            if hot != 1.0 {
                compute = ((compute as f64 * hot).round() as u64).max(1);
            }
            let call = &mut self.calls[c];
            call.core_held = true;
            call.network = network;
            call.compute = compute;
            self.schedule(self.now + network + compute, Ev::EndCompute(c));
        }
        self.maybe_retire(inst);
    }

    fn release_core(&mut self, c: usize) {
        let inst = self.calls[c].instance;
        self.calls[c].core_held = false;
        self.set_busy(inst, -1);
        self.try_start(inst);
    }

    fn on_end_compute(&mut self, c: usize) {
        let node = self.node(c);
        let n_children = node.children.len();
        if n_children == 0 {
            self.close_call(c);
            return;
        }
        let (blocks, mode) = (node.blocks, node.mode);
        if blocks {
            self.calls[c].blocked_since = self.now;
        } else {
            self.release_core(c);
        }
        match mode {
            CallMode::Sequential => {
                self.calls[c].next_child = 1;
                self.calls[c].outstanding = 1;
                self.issue(c, 0);
            }
            CallMode::Parallel => {
                self.calls[c].next_child = n_children;
                self.calls[c].outstanding = n_children;
                for k in 0..n_children {
                    self.issue(c, k);
                }
            }
        }
    }

    fn issue(&mut self, parent: usize, k: usize) {
        let node_idx = self.node(parent).children[k];
        let req = self.calls[parent].req;
        let caller = self.calls[parent].instance;
        let r = &mut self.requests[req];
        let span_id = r.next_span;
        r.next_span += 1;
        let child = self.calls.insert(Call {
            req,
            node: node_idx,
            parent,
            instance: NONE,
            caller,
            conn: false,
            span_id,
            start: 0,
            network: 0,
            compute: 0,
            blocked_since: 0,
            core_held: false,
            next_child: 0,
            outstanding: 0,
        });
        let (target, protocol) = {
            let n = self.node(child);
            (n.service, n.protocol)
        };
        if protocol == Protocol::Http1Blocking {
            let pool = &mut self.instances[caller].pools[target];
            if pool.in_use < pool.size {
                pool.in_use += 1;
                self.calls[child].conn = true;
            } else {
                pool.waiters.push_back(child);
                return;
            }
        }
        self.send(child);
    }

    fn hop(&self, a: usize, b: usize) -> u64 {
        self.topology.hop_delay(
            self.services[a].placement,
            self.services[b].placement,
            self.policy.network.base_delay,
        )
    }

    fn send(&mut self, child: usize) {
        let from = self.instances[self.calls[child].caller].service;
        let to = self.node(child).service;
        let at = self.now + self.hop(from, to);
        self.schedule(at, Ev::Deliver(child));
    }

    /// The call's work at its instance is done: free the core and respond.
    fn close_call(&mut self, c: usize) {
        if self.calls[c].core_held {
            self.release_core(c);
        }
        let blocks = self.node(c).blocks;
        let s = self.node(c).service;
        let call = &self.calls[c];
        let parent_span = (call.parent != NONE).then(|| self.calls[call.parent].span_id);
        let req = call.req;
        let span = Span {
            trace_id: self.requests[req].trace_id,
            span_id: call.span_id,
            parent_span_id: parent_span,
            service: self.services[s].name.clone(),
            start: call.start,
            end: self.now,
            network_us: call.network,
            compute_us: call.compute,
            blocked_us: if blocks { self.now - call.blocked_since } else { 0 },
        };
        self.services[s].spans.push(self.now - call.start);
        if self.policy.retain_traces {
            self.requests[req].spans.push(span);
        }
        if call.parent == NONE {
            self.calls.remove(c);
            self.complete(req);
        } else {
            let caller_svc = self.instances[call.caller].service;
            let at = self.now + self.hop(s, caller_svc);
            self.schedule(at, Ev::Respond(c));
        }
    }

    fn on_respond(&mut self, c: usize) {
        let call = self.calls.remove(c);
        let target = self.classes[self.requests[call.req].class][call.node].service;
        if call.conn {
            let pool = &mut self.instances[call.caller].pools[target];
            if let Some(w) = pool.waiters.pop_front() {
                // the connection passes straight to the next waiting call
                self.calls[w].conn = true;
                self.send(w);
            } else {
                pool.in_use -= 1;
            }
            let pool = &self.instances[call.caller].pools[target];
            assert!(pool.in_use <= pool.size, "connection pool over-subscribed");
        }
        let p = call.parent;
        self.calls[p].outstanding -= 1;
        let n_children = self.node(p).children.len();
        let next = self.calls[p].next_child;
        if next < n_children {
            self.calls[p].next_child += 1;
            self.calls[p].outstanding += 1;
            self.issue(p, next);
        } else if self.calls[p].outstanding == 0 {
            self.close_call(p);
        }
    }

    fn complete(&mut self, req: usize) {
        let r = self.requests.remove(req);
        let latency = self.now - r.arrival;
        self.counters.completions += 1;
        self.window_counts[1] += 1;
        self.window_latencies.push(latency);
        if r.arrival >= self.warmup {
            self.latencies[r.class].push(latency);
        }
        if self.policy.retain_traces {
            let mut spans = r.spans;
            spans.sort_by_key(|s| s.span_id);
            self.traces.push(Trace {
                trace_id: r.trace_id,
                class: self.class_names[r.class].clone(),
                user: r.user,
                spans,
            });
        }
    }

    // ---- monitoring, scaling, faults

    fn on_tick(&mut self) {
        let now = self.now;
        let mut util = BTreeMap::new();
        let mut view = BTreeMap::new();
        for s in 0..self.services.len() {
            self.touch(s);
            let queue_len: u64 = self.services[s]
                .routable
                .iter()
                .map(|&i| self.instances[i].queue.len() as u64)
                .sum();
            let svc = &mut self.services[s];
            let u = if svc.cap_int == 0 {
                0.0
            } else {
                svc.busy_int as f64 / svc.cap_int as f64
            };
            let p99 = percentile_in_place(&mut svc.spans, 99.0).unwrap_or(0);
            svc.spans.clear();
            svc.busy_int = 0;
            svc.cap_int = 0;
            self.series[s].push(TickSample {
                t_us: now,
                utilization: u,
                p99_us: p99,
                queue_len,
                instances: svc.routable.len() as u32,
            });
            util.insert(svc.name.to_string(), u);
            view.insert(
                svc.name.to_string(),
                ScaleView {
                    instances: svc.routable.len() as u32,
                    pending: svc.pending,
                    initial: svc.initial,
                    max: svc.max,
                },
            );
        }
        let p99 = percentile_in_place(&mut self.window_latencies, 99.0).unwrap_or(0);
        self.window_latencies.clear();
        let [arrivals, completions, drops] = std::mem::take(&mut self.window_counts);
        self.e2e.push(EndToEndTick {
            t_us: now,
            arrivals,
            completions,
            drops,
            p99_us: p99,
        });

        if let Some(policy) = self.policy.autoscaler.clone() {
            for action in autoscale_tick(&util, &policy, &view, now) {
                match action {
                    ScaleAction::Add {
                        service,
                        count,
                        effective_at,
                    } => {
                        let s = self.service_index(&service).expect("known service");
                        self.services[s].pending += count;
                        for _ in 0..count {
                            self.schedule(effective_at, Ev::ScaleComplete(s));
                        }
                    }
                    ScaleAction::Remove { service, count } => {
                        let s = self.service_index(&service).expect("known service");
                        for _ in 0..count {
                            if let Some(inst) = self.services[s].routable.pop() {
                                self.instances[inst].routable = false;
                                self.maybe_retire(inst);
                            }
                        }
                        self.record_scale(s);
                    }
                }
            }
        }
        if now + self.window <= self.duration {
            self.schedule(now + self.window, Ev::MonitorTick);
        }
    }

    fn on_fault(&mut self) {
        let plan = self.policy.faults.clone();
        apply_faults(&plan, &mut self.faults, self.now);
        for (h, &f) in self.hosts.iter_mut().zip(&self.faults.host_frequency) {
            h.frequency = f;
        }
        self.next_fault += 1;
        if let Some(&t) = self.fault_times.get(self.next_fault) {
            self.schedule(t, Ev::FaultTrigger);
        }
    }

    /// Runs the remaining events and assembles the result.
    pub fn finish(mut self) -> RunResult {
        while self.step().is_some() {}
        self.now = self.duration;
        for s in 0..self.services.len() {
            self.touch(s);
        }
        let counters = self.counters();
        debug_assert!(counters.conserved());
        let order = self.topology.backend_to_frontend();
        let mut unfinished: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for (_, r) in self.requests.iter().filter(|(_, r)| r.arrival >= self.warmup) {
            unfinished
                .entry(self.class_names[r.class].to_string())
                .or_default()
                .push(self.duration - r.arrival);
        }
        for v in unfinished.values_mut() {
            v.sort_unstable();
        }
        let mut series = BTreeMap::new();
        let mut cost = CostLedger::default();
        for (svc, ticks) in self.services.iter().zip(std::mem::take(&mut self.series)) {
            series.insert(svc.name.to_string(), ticks);
            cost.instance_us.insert(svc.name.to_string(), svc.inst_us);
        }
        RunResult {
            seed: self.seed,
            config_digest: self.digest,
            duration_us: self.duration,
            warmup_us: self.warmup,
            window_us: self.window,
            qos_p99_us: self
                .topology
                .classes
                .iter()
                .map(|c| (c.name.clone(), c.qos_target_p99))
                .collect(),
            class_weights: self.topology.classes.iter().map(|c| (c.name.clone(), c.weight)).collect(),
            latencies: self
                .class_names
                .iter()
                .map(|n| n.to_string())
                .zip(self.latencies)
                .collect(),
            unfinished_us: unfinished,
            services: order,
            series,
            e2e: self.e2e,
            counters,
            scale_timeline: self.scale_timeline,
            cost,
            traces: self.traces,
        }
    }
}

fn flatten(node: &crate::topology::CallNode, index_of: &impl Fn(&str) -> Option<usize>, out: &mut Vec<FlatNode>) -> usize {
    let id = out.len();
    out.push(FlatNode {
        service: index_of(&node.target).expect("validated target"),
        mode: node.mode,
        protocol: node.protocol,
        service_time: node.service_time,
        children: Vec::new(),
        blocks: node.blocks_caller(),
    });
    let kids: Vec<usize> = node.children.iter().map(|c| flatten(c, index_of, out)).collect();
    out[id].children = kids;
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::HostLayout;
    use crate::topology::{CallNode, RequestClass, ServiceSpec};
    use crate::tracing::critical_path_length;

    fn det(name: &str, mean: f64) -> ServiceSpec {
        ServiceSpec::new(name, DistributionSpec::deterministic(mean))
    }

    fn topo(services: Vec<ServiceSpec>, root: CallNode) -> Topology {
        Topology {
            services: services.into_iter().map(|s| (s.name.clone(), s)).collect(),
            classes: vec![RequestClass {
                name: "c".into(),
                root,
                weight: 1.0,
                qos_target_p99: 1_000_000,
            }],
            edge_cloud_rtt: 0,
        }
    }

    fn at(times: &[u64]) -> Vec<Arrival> {
        times.iter().map(|&time| Arrival { time, class: 0, user: 0 }).collect()
    }

    fn once(t: &Topology, p: &PolicySet) -> RunResult {
        run_with_arrivals(t, at(&[0]), p, 1, 1_000_000, 0).unwrap()
    }

    #[test]
    fn single_service_single_request() {
        let t = topo(vec![det("a", 1000.0)], CallNode::leaf("a"));
        let r = once(&t, &PolicySet::default());
        assert_eq!(r.latencies["c"], vec![1000]);
        assert_eq!(r.counters.completions, 1);
    }

    #[test]
    fn unfinished_requests_count_at_their_age() {
        let t = topo(vec![det("a", 5_000_000.0)], CallNode::leaf("a"));
        let r = run_with_arrivals(&t, at(&[100_000, 400_000]), &PolicySet::default(), 1, 1_000_000, 200_000).unwrap();
        assert!(r.latencies["c"].is_empty());
        // the pre-warmup arrival is excluded, like completed ones
        assert_eq!(r.unfinished_us["c"], vec![600_000]);
        assert_eq!(r.p99(), Some(600_000));
        assert_eq!(r.counters.in_flight_at_end, 2);
    }

    #[test]
    fn sequential_chain_adds_four_hops() {
        let t = topo(
            vec![det("a", 1000.0), det("b", 2000.0), det("c", 3000.0)],
            CallNode::leaf("a").seq(vec![CallNode::leaf("b").seq(vec![CallNode::leaf("c")])]),
        );
        let r = once(&t, &PolicySet::default());
        assert_eq!(r.latencies["c"], vec![6000 + 4 * 50]);
        let trace = &r.traces[0];
        assert_eq!(trace.spans.len(), 3);
        assert_eq!(critical_path_length(trace).unwrap(), trace.latency().unwrap());
    }

    #[test]
    fn parallel_join_waits_for_slowest_branch() {
        let t = topo(
            vec![det("r", 1.0), det("x", 3000.0), det("y", 5000.0)],
            CallNode::leaf("r").par(vec![CallNode::leaf("x"), CallNode::leaf("y")]),
        );
        let mut p = PolicySet::default();
        p.network.base_delay = 0;
        let r = once(&t, &p);
        assert_eq!(r.latencies["c"], vec![5001]);
    }

    #[test]
    fn frequency_scales_exactly() {
        let t = topo(
            vec![det("a", 1000.0), det("b", 333.0)],
            CallNode::leaf("a").seq(vec![CallNode::leaf("b")]),
        );
        let p = PolicySet {
            frequency: 0.5,
            ..Default::default()
        };
        assert_eq!(once(&t, &p).latencies["c"], vec![2000 + 666 + 100]);
    }

    #[test]
    fn stack_factor_divides_network_time() {
        let mut a = det("a", 1000.0);
        a.network_time = Some(DistributionSpec::deterministic(680.0));
        let t = topo(vec![a], CallNode::leaf("a"));
        let mut p = PolicySet::default();
        p.network.stack_factor = 68.0;
        assert_eq!(once(&t, &p).latencies["c"], vec![1010]);
        p.network.stack_factor = 10.0;
        assert_eq!(once(&t, &p).latencies["c"], vec![1068]);
        p.network.stack_factor = 1.0;
        assert_eq!(once(&t, &p).latencies["c"], vec![1680]);

        let mut e = Engine::new(&t, at(&[0]), &PolicySet::default(), 1, 1_000_000, 0).unwrap();
        assert!(e.set_network_profile(NetworkProfile { base_delay: 50, stack_factor: 0.5 }).is_err());
        e.set_network_profile(NetworkProfile { base_delay: 50, stack_factor: 68.0 }).unwrap();
        assert_eq!(e.finish().latencies["c"], vec![1010]);
    }

    fn two_callers(protocol: Protocol) -> Engine {
        let mut a = det("a", 100.0);
        a.cores_per_instance = 2;
        let mut b = det("b", 1000.0);
        b.cores_per_instance = 2;
        let t = topo(
            vec![a, b],
            CallNode::leaf("a").seq(vec![CallNode::leaf("b").with_protocol(protocol)]),
        );
        let p = PolicySet {
            pool_size: 1,
            ..Default::default()
        };
        Engine::new(&t, at(&[0, 1]), &p, 1, 1_000_000, 0).unwrap()
    }

    fn busy_at(e: &mut Engine, t: u64) -> (u32, u32) {
        while e.now() < t {
            e.step().unwrap();
        }
        (e.busy_cores("a").unwrap(), e.connections_in_use("a", "b").unwrap())
    }

    #[test]
    fn http1_holds_caller_core_while_waiting_for_a_connection() {
        let mut e = two_callers(Protocol::Http1Blocking);
        // first call holds the only connection; second caller spins on its core
        assert_eq!(busy_at(&mut e, 500), (2, 1));
        // 100 + 50 + 1000 + 50: first response frees the connection
        assert_eq!(busy_at(&mut e, 1300), (1, 1));
        let r = e.finish();
        assert_eq!(r.latencies["c"], vec![1200, 2299]);
        let blocked: Vec<u64> = r.traces.iter().map(|t| t.spans[0].blocked_us).collect();
        assert_eq!(blocked, vec![1100, 2199]);
    }

    #[test]
    fn pipelined_calls_release_the_caller_core() {
        let mut e = two_callers(Protocol::RpcPipelined);
        assert_eq!(busy_at(&mut e, 500), (0, 0));
        let r = e.finish();
        assert_eq!(r.latencies["c"], vec![1200, 1200]);
    }

    #[test]
    fn misroute_pins_requests_during_the_window() {
        let mut b = det("b", 10.0);
        b.initial_instances = 3;
        b.max_instances = 3;
        let t = topo(vec![b], CallNode::leaf("b"));
        let mut p = PolicySet::default();
        p.faults.misroutes.push(crate::management::Misroute {
            service: "b".into(),
            instance: 1,
            start: 10_000_000,
            end: 20_000_000,
        });
        p.hosts = HostLayout::Dedicated;
        let times: Vec<u64> = (1..300).map(|k| k * 100_000).collect();
        let r = run_with_arrivals(&t, at(&times), &p, 1, 30_000_000, 0).unwrap();
        assert!(r.counters.conserved());
        // spans inside the window all ran on one instance: look at the
        // per-tick instance utilization instead of internals
        let mut e = Engine::new(&t, at(&times), &p, 1, 30_000_000, 0).unwrap();
        let mut hits = [0u32; 3];
        while let Some(now) = e.step() {
            if (10_000_000..20_000_000).contains(&now) {
                for (k, inst) in e.instances.iter().enumerate() {
                    hits[k] += inst.busy;
                }
            }
        }
        assert_eq!(hits[0], 0);
        assert_eq!(hits[2], 0);
        assert!(hits[1] > 0);
    }

    #[test]
    fn rejects_inconsistent_plans() {
        let t = topo(vec![det("a", 10.0)], CallNode::leaf("a"));
        let p = PolicySet::default();
        assert!(run_with_arrivals(&t, at(&[0]), &p, 1, 100, 100).is_err());
        let mut bad = p.clone();
        bad.pool_overrides.insert("ghost".into(), 1);
        assert!(run_with_arrivals(&t, at(&[0]), &bad, 1, 100, 0).is_err());
        assert!(run_with_arrivals(&t, at(&[5, 1]), &p, 1, 100, 0).is_err());
    }
}

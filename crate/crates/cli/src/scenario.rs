//! Scenario files: a top-level block naming the experiment and topology, then
//! `[workload]`, `[policy]` and `[params]` sections of `key = value` lines.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use microsim::engine::{HostLayout, LoadBalancePolicy};
use microsim::management::{
    AutoscalerPolicy, Hotspot, Misroute, PolicySet, RateLimiterConfig, ServerlessConfig, SlowServers, StateStore,
};
use microsim::topology::{load_topology, preset, Protocol, Topology};
use microsim::workload::{build_skewed_population, ArrivalProcess, UserPopulation, WorkloadPlan};
use serde::Serialize;

use crate::CliError;

const SEC: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    SingleRun,
    Backpressure,
    Cascading,
    FreqSweep,
    SkewSweep,
    SlowServerSweep,
    EdgeVsCloud,
    ServerlessCompare,
    RecoveryCompare,
    GoodputSearch,
}

impl Experiment {
    pub const ALL: [Experiment; 10] = [
        Experiment::SingleRun,
        Experiment::Backpressure,
        Experiment::Cascading,
        Experiment::FreqSweep,
        Experiment::SkewSweep,
        Experiment::SlowServerSweep,
        Experiment::EdgeVsCloud,
        Experiment::ServerlessCompare,
        Experiment::RecoveryCompare,
        Experiment::GoodputSearch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::SingleRun => "single_run",
            Experiment::Backpressure => "backpressure",
            Experiment::Cascading => "cascading",
            Experiment::FreqSweep => "freq_sweep",
            Experiment::SkewSweep => "skew_sweep",
            Experiment::SlowServerSweep => "slow_server_sweep",
            Experiment::EdgeVsCloud => "edge_vs_cloud",
            Experiment::ServerlessCompare => "serverless_compare",
            Experiment::RecoveryCompare => "recovery_compare",
            Experiment::GoodputSearch => "goodput_search",
        }
    }

    /// `[params]` keys the experiment cannot run without.
    pub fn required_params(self) -> &'static [&'static str] {
        match self {
            Experiment::SingleRun => &[],
            Experiment::Backpressure => &["downstream", "case_a_rate", "case_b_rate", "blocked_pool", "healthy_pool"],
            Experiment::Cascading => &["chain", "threshold_factor"],
            Experiment::FreqSweep => &["freqs", "loads", "compare", "search"],
            Experiment::SkewSweep => &["skews", "search"],
            Experiment::SlowServerSweep => &["fractions", "slow_frequency", "compare", "search"],
            Experiment::EdgeVsCloud => &["compare", "loads", "tail_us", "search"],
            Experiment::ServerlessCompare => &["qos_us", "low_duty_rate"],
            Experiment::RecoveryCompare => &["compare", "hotspot"],
            Experiment::GoodputSearch => &["search"],
        }
    }

    /// The scenario shipped for this experiment.
    pub fn default_scenario(self) -> &'static str {
        match self {
            Experiment::SingleRun => include_str!("../../../scenarios/single_run.scn"),
            Experiment::Backpressure => include_str!("../../../scenarios/backpressure.scn"),
            Experiment::Cascading => include_str!("../../../scenarios/cascading.scn"),
            Experiment::FreqSweep => include_str!("../../../scenarios/freq_sweep.scn"),
            Experiment::SkewSweep => include_str!("../../../scenarios/skew_sweep.scn"),
            Experiment::SlowServerSweep => include_str!("../../../scenarios/slow_server_sweep.scn"),
            Experiment::EdgeVsCloud => include_str!("../../../scenarios/edge_vs_cloud.scn"),
            Experiment::ServerlessCompare => include_str!("../../../scenarios/serverless_compare.scn"),
            Experiment::RecoveryCompare => include_str!("../../../scenarios/recovery_compare.scn"),
            Experiment::GoodputSearch => include_str!("../../../scenarios/goodput_search.scn"),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown experiment `{s}`")))
    }
}

/// A preset name or a topology file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum TopologyRef {
    Preset(String),
    File(PathBuf),
}

impl TopologyRef {
    /// Preset names win over file names; relative files resolve against `base`.
    pub fn parse(s: &str, base: &Path) -> Self {
        if preset(s).is_ok() {
            TopologyRef::Preset(s.to_string())
        } else {
            let p = Path::new(s);
            TopologyRef::File(if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
        }
    }

    pub fn load(&self) -> Result<Topology, CliError> {
        match self {
            TopologyRef::Preset(name) => Ok(preset(name)?),
            TopologyRef::File(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read topology {}: {e}", path.display())))?;
                Ok(load_topology(&text)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadSpec {
    pub arrivals: ArrivalProcess,
    pub users: u32,
    pub skew: u8,
}

impl WorkloadSpec {
    pub fn plan(&self) -> Result<WorkloadPlan, CliError> {
        let population = if self.skew == 0 && self.users < 100 {
            UserPopulation::uniform(self.users)
        } else {
            build_skewed_population(self.users, self.skew as i32)?
        };
        Ok(WorkloadPlan {
            arrivals: self.arrivals.clone(),
            population,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub experiment: Experiment,
    pub topology: TopologyRef,
    pub workload: WorkloadSpec,
    pub policy: PolicySet,
    /// Forces every call edge to one protocol.
    pub protocol: Option<Protocol>,
    pub seed: u64,
    pub duration_us: u64,
    pub warmup_us: u64,
    pub out: Option<PathBuf>,
    pub params: Params,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl Scenario {
    /// Parses a scenario; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut sections: BTreeMap<&str, Vec<(usize, &str, &str)>> = BTreeMap::new();
        let mut section = "";
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name.trim() {
                    s @ ("workload" | "policy" | "params") => s,
                    other => return Err(bad(i + 1, format!("unknown section [{other}]"))),
                };
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(i + 1, format!("expected `key = value`, got `{line}`")))?;
            sections.entry(section).or_default().push((i + 1, k.trim(), v.trim()));
        }

        let mut experiment = None;
        let mut topology = None;
        let mut seed = 1;
        let mut duration_s = 60.0;
        let mut warmup_s = 0.0;
        let mut out = None;
        for &(line, k, v) in sections.get("").into_iter().flatten() {
            match k {
                "experiment" => experiment = Some(v.parse::<Experiment>().map_err(|e| bad(line, e.to_string()))?),
                "topology" => topology = Some(TopologyRef::parse(v, base)),
                "seed" => seed = num(line, k, v)?,
                "duration_s" => duration_s = num(line, k, v)?,
                "warmup_s" => warmup_s = num(line, k, v)?,
                "out" => out = Some(base.join(v)),
                _ => return Err(bad(line, format!("unknown key `{k}`"))),
            }
        }
        let experiment = experiment.ok_or_else(|| CliError::Scenario("missing `experiment`".into()))?;
        let topology = topology.ok_or_else(|| CliError::Scenario("missing `topology`".into()))?;

        let mut workload = WorkloadSpec {
            arrivals: ArrivalProcess::Poisson { rate: 100.0 },
            users: 1,
            skew: 0,
        };
        for &(line, k, v) in sections.get("workload").into_iter().flatten() {
            match k {
                "arrivals" => workload.arrivals = parse_arrivals(line, v)?,
                "users" => workload.users = num(line, k, v)?,
                "skew" => workload.skew = num(line, k, v)?,
                _ => return Err(bad(line, format!("unknown workload key `{k}`"))),
            }
        }

        let mut policy = PolicySet::default();
        let mut protocol = None;
        let mut autoscaler = AutoscalerPolicy::default();
        let mut autoscale = false;
        let mut serverless = ServerlessConfig::default();
        let mut serverless_on = false;
        for &(line, k, v) in sections.get("policy").into_iter().flatten() {
            let words: Vec<&str> = v.split_whitespace().collect();
            match k {
                "autoscale" => autoscale = switch(line, v)?,
                "threshold" => autoscaler.threshold = num(line, k, v)?,
                "window_s" => autoscaler.window = secs(num(line, k, v)?),
                "startup_delay_s" => autoscaler.startup_delay = secs(num(line, k, v)?),
                "scale_step" => autoscaler.step = num(line, k, v)?,
                "scale_in" => autoscaler.scale_in = switch(line, v)?,
                "rate_limit" => {
                    let [rate, burst] = arity::<2>(line, k, &words)?;
                    policy.rate_limiter = Some(RateLimiterConfig {
                        rate: num(line, k, rate)?,
                        burst: num(line, k, burst)?,
                    });
                }
                "fault.slow" => {
                    if !(3..=4).contains(&words.len()) {
                        return Err(bad(line, "fault.slow takes <frac> <freq> <start_s> [<end_s>]".into()));
                    }
                    policy.faults.slow_servers.push(SlowServers {
                        fraction: num(line, k, words[0])?,
                        frequency: num(line, k, words[1])?,
                        start: secs(num(line, k, words[2])?),
                        end: words.get(3).map(|w| num(line, k, w).map(secs)).transpose()?,
                    });
                }
                "fault.misroute" => {
                    let [svc, idx, start, end] = arity::<4>(line, k, &words)?;
                    policy.faults.misroutes.push(Misroute {
                        service: svc.to_string(),
                        instance: num(line, k, idx)?,
                        start: secs(num(line, k, start)?),
                        end: secs(num(line, k, end)?),
                    });
                }
                "fault.hotspot" => policy.faults.hotspots.push(parse_hotspot(line, v)?),
                "fault.hotspot_ramp" => policy.faults.hotspots.extend(parse_hotspot_ramp(line, v)?),
                "serverless" => serverless_on = switch(line, v)?,
                "state_store" => {
                    serverless.state_store = match v {
                        "s3" => StateStore::S3Like,
                        "memory" => StateStore::RemoteMemory,
                        _ => return Err(bad(line, format!("state_store must be s3 or memory, got `{v}`"))),
                    }
                }
                "protocol" => protocol = Some(parse_protocol(line, v)?),
                "pool" => policy.pool_size = num(line, k, v)?,
                "lb" => policy.load_balance = parse_lb(line, v)?,
                "frequency" => policy.frequency = num(line, k, v)?,
                "hosts" => {
                    policy.hosts = match v {
                        "dedicated" => HostLayout::Dedicated,
                        n => HostLayout::Shared { hosts: num(line, k, n)? },
                    }
                }
                "monitor_window_s" => policy.monitor_window_us = secs(num(line, k, v)?),
                "base_delay_us" => policy.network.base_delay = num(line, k, v)?,
                "stack_factor" => policy.network.stack_factor = num(line, k, v)?,
                "traces" => policy.retain_traces = switch(line, v)?,
                _ => {
                    if let Some(svc) = k.strip_prefix("pool.") {
                        policy.pool_overrides.insert(svc.to_string(), num(line, k, v)?);
                    } else if let Some(svc) = k.strip_prefix("lb.") {
                        policy.lb_overrides.insert(svc.to_string(), parse_lb(line, v)?);
                    } else {
                        return Err(bad(line, format!("unknown policy key `{k}`")));
                    }
                }
            }
        }
        if autoscale {
            policy.autoscaler = Some(autoscaler);
        }
        if serverless_on {
            policy.serverless = Some(serverless);
        }

        let mut params = Params::default();
        for &(line, k, v) in sections.get("params").into_iter().flatten() {
            if params.0.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(line, format!("duplicate param `{k}`")));
            }
        }

        let s = Scenario {
            experiment,
            topology,
            workload,
            policy,
            protocol,
            seed,
            duration_us: secs(duration_s),
            warmup_us: secs(warmup_s),
            out,
            params,
            base: base.to_path_buf(),
        };
        s.check()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read scenario {}: {e}", path.display())))?;
        Scenario::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// The shipped scenario for `experiment`, with relative paths resolved
    /// against `base`.
    pub fn builtin(experiment: Experiment, base: &Path) -> Result<Self, CliError> {
        Scenario::parse(experiment.default_scenario(), base)
    }

    /// Loads a topology named in `[params]`.
    pub fn param_topology(&self, key: &str) -> Result<Topology, CliError> {
        TopologyRef::parse(self.params.raw(key)?, &self.base).load()
    }

    pub fn check(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        if self.duration_us == 0 {
            problems.push("duration_s must be positive".to_string());
        }
        if self.warmup_us >= self.duration_us {
            problems.push("warmup_s must be shorter than duration_s".to_string());
        }
        if self.workload.skew > 99 {
            problems.push(format!("skew must be in [0, 99], got {}", self.workload.skew));
        }
        if let Err(e) = self.workload.arrivals.check() {
            problems.push(e.to_string());
        }
        problems.extend(self.policy.check());
        for key in self.experiment.required_params() {
            if !self.params.0.contains_key(*key) {
                problems.push(format!("{} needs param `{key}`", self.experiment));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Scenario(problems.join("; ")))
        }
    }
}

/// Experiment-specific `[params]`, parsed on use.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Params(pub BTreeMap<String, String>);

impl Params {
    pub fn raw(&self, key: &str) -> Result<&str, CliError> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Scenario(format!("missing param `{key}`")))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| CliError::Scenario(format!("param `{key}`: cannot parse `{v}`")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        if self.0.contains_key(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let v = self.raw(key)?;
        v.split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|_| CliError::Scenario(format!("param `{key}`: cannot parse `{x}`")))
            })
            .collect()
    }

    /// `lo hi tol` bounds of a goodput search.
    pub fn search(&self) -> Result<(f64, f64, f64), CliError> {
        let words: Vec<f64> = self
            .raw("search")?
            .split_whitespace()
            .map(|w| w.parse().map_err(|_| CliError::Scenario(format!("param `search`: bad number `{w}`"))))
            .collect::<Result<_, _>>()?;
        match words[..] {
            [lo, hi, tol] => Ok((lo, hi, tol)),
            _ => Err(CliError::Scenario("param `search` takes `<lo> <hi> <tol>`".into())),
        }
    }
}

pub(crate) fn parse_hotspot(line: usize, v: &str) -> Result<Hotspot, CliError> {
    let words: Vec<&str> = v.split_whitespace().collect();
    let [svc, factor, start, end] = arity::<4>(line, "hotspot", &words)?;
    Ok(Hotspot {
        service: svc.to_string(),
        factor: num(line, "hotspot", factor)?,
        start: secs(num(line, "hotspot", start)?),
        end: secs(num(line, "hotspot", end)?),
    })
}

/// `<svc> <factor> <step_s> <start_s> <end_s>`: one stacked hotspot per step,
/// so the inflation compounds by `factor` every `step_s` until `end_s`.
fn parse_hotspot_ramp(line: usize, v: &str) -> Result<Vec<Hotspot>, CliError> {
    let words: Vec<&str> = v.split_whitespace().collect();
    let [svc, factor, step, start, end] = arity::<5>(line, "hotspot_ramp", &words)?;
    let factor: f64 = num(line, "hotspot_ramp", factor)?;
    let step = secs(num(line, "hotspot_ramp", step)?);
    let start = secs(num(line, "hotspot_ramp", start)?);
    let end = secs(num(line, "hotspot_ramp", end)?);
    if step == 0 || end <= start {
        return Err(bad(line, "hotspot_ramp needs a positive step and end after start".into()));
    }
    Ok((start..end)
        .step_by(step as usize)
        .map(|t| Hotspot {
            service: svc.to_string(),
            factor,
            start: t,
            end,
        })
        .collect())
}

fn parse_arrivals(line: usize, v: &str) -> Result<ArrivalProcess, CliError> {
    let (kind, rest) = v.split_once(char::is_whitespace).unwrap_or((v, ""));
    let rest = rest.trim();
    match kind {
        "poisson" => Ok(ArrivalProcess::Poisson {
            rate: num(line, "arrivals", rest)?,
        }),
        "deterministic" => Ok(ArrivalProcess::Deterministic {
            rate: num(line, "arrivals", rest)?,
        }),
        "diurnal" => {
            let segments = rest
                .split(',')
                .map(|seg| {
                    let (d, r) = seg
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| bad(line, format!("diurnal segment `{seg}` is not <dur_s>:<rate>")))?;
                    Ok((secs(num(line, "arrivals", d)?), num(line, "arrivals", r)?))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok(ArrivalProcess::Diurnal { segments })
        }
        _ => Err(bad(line, format!("unknown arrival process `{kind}`"))),
    }
}

fn parse_protocol(line: usize, v: &str) -> Result<Protocol, CliError> {
    match v {
        "rpc" => Ok(Protocol::RpcPipelined),
        "http1" => Ok(Protocol::Http1Blocking),
        _ => Err(bad(line, format!("protocol must be rpc or http1, got `{v}`"))),
    }
}

fn parse_lb(line: usize, v: &str) -> Result<LoadBalancePolicy, CliError> {
    match v.split_whitespace().collect::<Vec<_>>()[..] {
        ["round_robin"] => Ok(LoadBalancePolicy::RoundRobin),
        ["random"] => Ok(LoadBalancePolicy::Random),
        ["user_sharded"] => Ok(LoadBalancePolicy::UserSharded),
        ["misconfigured", i] => Ok(LoadBalancePolicy::Misconfigured(num(line, "lb", i)?)),
        _ => Err(bad(line, format!("unknown load balancer `{v}`"))),
    }
}

fn switch(line: usize, v: &str) -> Result<bool, CliError> {
    match v {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(bad(line, format!("expected on or off, got `{v}`"))),
    }
}

fn arity<'a, const N: usize>(line: usize, key: &str, words: &[&'a str]) -> Result<[&'a str; N], CliError> {
    words
        .try_into()
        .map_err(|_| bad(line, format!("`{key}` takes {N} values, got {}", words.len())))
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| bad(line, format!("`{key}`: cannot parse `{v}`")))
}

pub(crate) fn secs(s: f64) -> u64 {
    (s * SEC).round() as u64
}

fn bad(line: usize, msg: String) -> CliError {
    CliError::Scenario(format!("line {line}: {msg}"))
}

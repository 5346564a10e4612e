//! Per-RPC spans and end-to-end traces, with the analyses run over them.
//!
//! A span opens when a call arrives at a service instance and closes when the
//! instance sends its response. Synchronous children therefore nest strictly
//! inside their parent, and the gaps around a child are the network hops.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("no samples or traces to analyse")]
    EmptyInput,
    #[error("malformed trace {trace_id}: {reason}")]
    MalformedTrace { trace_id: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Span {
    #[serde(skip)]
    pub trace_id: u64,
    pub span_id: u32,
    #[serde(rename = "parent")]
    pub parent_span_id: Option<u32>,
    pub service: Arc<str>,
    #[serde(rename = "start_us")]
    pub start: u64,
    #[serde(rename = "end_us")]
    pub end: u64,
    pub network_us: u64,
    pub compute_us: u64,
    pub blocked_us: u64,
}

impl Span {
    pub fn duration(&self) -> u64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: u64,
    pub class: Arc<str>,
    pub user: u32,
    pub spans: Vec<Span>,
}

impl Trace {
    pub fn root(&self) -> Option<&Span> {
        self.spans.iter().find(|s| s.parent_span_id.is_none())
    }

    pub fn latency(&self) -> Option<u64> {
        self.root().map(Span::duration)
    }
}

fn malformed(t: &Trace, reason: impl Into<String>) -> TraceError {
    TraceError::MalformedTrace {
        trace_id: t.trace_id,
        reason: reason.into(),
    }
}

/// Span indices grouped by parent, each group ordered by span id.
struct Tree {
    root: usize,
    children: Vec<Vec<usize>>,
}

fn index(t: &Trace) -> Result<Tree, TraceError> {
    let mut by_id = BTreeMap::new();
    let mut root = None;
    for (i, s) in t.spans.iter().enumerate() {
        if by_id.insert(s.span_id, i).is_some() {
            return Err(malformed(t, format!("duplicate span id {}", s.span_id)));
        }
        if s.end < s.start {
            return Err(malformed(t, format!("span {} ends before it starts", s.span_id)));
        }
        if s.parent_span_id.is_none() && root.replace(i).is_some() {
            return Err(malformed(t, "more than one root span"));
        }
    }
    let root = root.ok_or_else(|| malformed(t, "no root span"))?;
    let mut children = vec![Vec::new(); t.spans.len()];
    for (i, s) in t.spans.iter().enumerate() {
        if let Some(p) = s.parent_span_id {
            let &pi = by_id
                .get(&p)
                .ok_or_else(|| malformed(t, format!("span {} has unknown parent {p}", s.span_id)))?;
            let parent = &t.spans[pi];
            if s.start < parent.start || s.end > parent.end {
                return Err(malformed(
                    t,
                    format!("span {} escapes its parent {}", s.span_id, parent.span_id),
                ));
            }
            children[pi].push(i);
        }
    }
    for group in &mut children {
        group.sort_by_key(|&i| t.spans[i].span_id);
    }
    Ok(Tree { root, children })
}

/// Children of `parent` that lie on its critical path, latest first.
///
/// Walking back from the parent's end, repeatedly take the child finishing
/// last among those that finish no later than the current point (ties go to
/// the smallest span id), then move the point to that child's start.
fn critical_children(t: &Trace, tree: &Tree, parent: usize) -> Vec<usize> {
    let mut picked = Vec::new();
    let mut point = t.spans[parent].end;
    loop {
        let mut best: Option<usize> = None;
        for &c in &tree.children[parent] {
            let s = &t.spans[c];
            if s.end > point {
                continue;
            }
            best = match best {
                Some(b) if t.spans[b].end >= s.end => Some(b),
                _ => Some(c),
            };
        }
        match best {
            Some(c) => {
                picked.push(c);
                point = t.spans[c].start;
            }
            None => break,
        }
    }
    picked
}

/// A span on the critical path together with the part of its duration not
/// covered by critical children (network gaps around children count here).
#[derive(Debug, Clone, PartialEq)]
pub struct PathStep<'a> {
    pub span: &'a Span,
    pub exclusive_us: u64,
}

fn walk_path<'a>(t: &'a Trace, tree: &Tree, at: usize, out: &mut Vec<PathStep<'a>>) {
    let mut kids = critical_children(t, tree, at);
    kids.reverse();
    let covered: u64 = kids.iter().map(|&c| t.spans[c].duration()).sum();
    out.push(PathStep {
        span: &t.spans[at],
        exclusive_us: t.spans[at].duration() - covered,
    });
    for c in kids {
        walk_path(t, tree, c, out);
    }
}

/// Critical path with per-step exclusive times, parents before children.
pub fn critical_path_steps(t: &Trace) -> Result<Vec<PathStep<'_>>, TraceError> {
    let tree = index(t)?;
    let mut out = Vec::new();
    walk_path(t, &tree, tree.root, &mut out);
    Ok(out)
}

/// The spans whose exclusive times add up to the end-to-end latency.
pub fn critical_path(t: &Trace) -> Result<Vec<&Span>, TraceError> {
    Ok(critical_path_steps(t)?.into_iter().map(|s| s.span).collect())
}

/// Sum of exclusive times along the critical path.
pub fn critical_path_length(t: &Trace) -> Result<u64, TraceError> {
    Ok(critical_path_steps(t)?.iter().map(|s| s.exclusive_us).sum())
}

/// Each service's share of mean end-to-end latency, from exclusive
/// critical-path time.
pub fn per_tier_breakdown<'a, I>(traces: I) -> Result<BTreeMap<String, f64>, TraceError>
where
    I: IntoIterator<Item = &'a Trace>,
{
    let mut excl: BTreeMap<String, u64> = BTreeMap::new();
    let mut total: u64 = 0;
    let mut any = false;
    let mut root_service = None;
    for t in traces {
        any = true;
        let steps = critical_path_steps(t)?;
        root_service.get_or_insert_with(|| steps[0].span.service.to_string());
        total += steps[0].span.duration();
        for s in steps {
            *excl.entry(s.span.service.to_string()).or_default() += s.exclusive_us;
        }
    }
    if !any {
        return Err(TraceError::EmptyInput);
    }
    if total == 0 {
        return Ok(root_service.into_iter().map(|s| (s, 1.0)).collect());
    }
    Ok(excl
        .into_iter()
        .map(|(svc, us)| (svc, us as f64 / total as f64))
        .collect())
}

/// Per service: (network fraction, compute fraction) of the time its spans
/// spent processing, where the remainder is time spent blocked.
pub fn network_compute_ratio<'a, I>(traces: I) -> Result<BTreeMap<String, (f64, f64)>, TraceError>
where
    I: IntoIterator<Item = &'a Trace>,
{
    let mut sums: BTreeMap<String, [u64; 3]> = BTreeMap::new();
    for t in traces {
        for s in &t.spans {
            let e = sums.entry(s.service.to_string()).or_default();
            e[0] += s.network_us;
            e[1] += s.compute_us;
            e[2] += s.blocked_us;
        }
    }
    if sums.is_empty() {
        return Err(TraceError::EmptyInput);
    }
    Ok(sums
        .into_iter()
        .map(|(svc, [n, c, b])| {
            let all = (n + c + b) as f64;
            if all == 0.0 {
                (svc, (0.0, 0.0))
            } else {
                (svc, (n as f64 / all, c as f64 / all))
            }
        })
        .collect())
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 · n)` of
/// the sorted samples, with rank 0 mapped to the minimum.
pub fn percentile(samples: &[u64], p: f64) -> Result<u64, TraceError> {
    let mut v = samples.to_vec();
    percentile_in_place(&mut v, p)
}

/// As [`percentile`], reordering `samples` instead of copying them.
pub fn percentile_in_place(samples: &mut [u64], p: f64) -> Result<u64, TraceError> {
    if samples.is_empty() {
        return Err(TraceError::EmptyInput);
    }
    let n = samples.len();
    let rank = ((p.clamp(0.0, 100.0) * n as f64) / 100.0).ceil() as usize;
    let idx = rank.clamp(1, n) - 1;
    let (_, v, _) = samples.select_nth_unstable(idx);
    Ok(*v)
}

/// Writes one JSON object per trace.
pub fn write_jsonl<'a, W: Write>(traces: impl IntoIterator<Item = &'a Trace>, mut out: W) -> Result<(), TraceError> {
    for t in traces {
        serde_json::to_writer(&mut out, t).map_err(|e| TraceError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Trace>, TraceError> {
    let mut traces = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut t: Trace = serde_json::from_str(&line).map_err(|source| TraceError::Json { line: i + 1, source })?;
        for s in &mut t.spans {
            s.trace_id = t.trace_id;
        }
        traces.push(t);
    }
    Ok(traces)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn span(id: u32, parent: Option<u32>, svc: &str, start: u64, end: u64) -> Span {
        Span {
            trace_id: 1,
            span_id: id,
            parent_span_id: parent,
            service: svc.into(),
            start,
            end,
            network_us: 0,
            compute_us: 0,
            blocked_us: 0,
        }
    }

    pub(crate) fn trace(spans: Vec<Span>) -> Trace {
        Trace {
            trace_id: 1,
            class: "c".into(),
            user: 0,
            spans,
        }
    }

    fn ids(path: &[&Span]) -> Vec<u32> {
        path.iter().map(|s| s.span_id).collect()
    }

    #[test]
    fn parallel_join_takes_latest_child() {
        let t = trace(vec![
            span(0, None, "root", 0, 5100),
            span(1, Some(0), "a", 50, 3050),
            span(2, Some(0), "b", 50, 5050),
        ]);
        assert_eq!(ids(&critical_path(&t).unwrap()), vec![0, 2]);
        assert_eq!(critical_path_length(&t).unwrap(), 5100);
    }

    #[test]
    fn linear_chain_is_whole_path() {
        let t = trace(vec![
            span(0, None, "a", 0, 6200),
            span(1, Some(0), "b", 1050, 6150),
            span(2, Some(1), "c", 3100, 6100),
        ]);
        assert_eq!(ids(&critical_path(&t).unwrap()), vec![0, 1, 2]);
    }

    #[test]
    fn sequential_siblings_are_both_critical() {
        let t = trace(vec![
            span(0, None, "a", 0, 100),
            span(1, Some(0), "b", 10, 40),
            span(2, Some(0), "c", 50, 90),
        ]);
        let steps = critical_path_steps(&t).unwrap();
        assert_eq!(steps.iter().map(|s| s.span.span_id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(steps[0].exclusive_us, 30);
    }

    #[test]
    fn ties_go_to_smallest_span_id() {
        let t = trace(vec![
            span(0, None, "r", 0, 100),
            span(2, Some(0), "x", 10, 90),
            span(1, Some(0), "y", 20, 90),
        ]);
        assert_eq!(ids(&critical_path(&t).unwrap()), vec![0, 1]);
    }

    /// Fan-out of two, each branch with one nested child; the oracle lists all
    /// four root-to-leaf chains and keeps the one ending last, as the join rule
    /// requires for purely parallel branches.
    #[test]
    fn nested_fan_out_matches_leaf_chain_enumeration() {
        let cases = [
            [(10, 500), (20, 400), (10, 300), (20, 250)],
            [(10, 300), (20, 250), (10, 700), (50, 650)],
            [(10, 600), (100, 590), (10, 600), (30, 420)],
        ];
        for case in cases {
            let [(a0, a1), (aa0, aa1), (b0, b1), (bb0, bb1)] = case;
            let end = a1.max(b1) + 10;
            let t = trace(vec![
                span(0, None, "root", 0, end),
                span(1, Some(0), "a", a0, a1),
                span(2, Some(1), "a_leaf", aa0, aa1),
                span(3, Some(0), "b", b0, b1),
                span(4, Some(3), "b_leaf", bb0, bb1),
            ]);
            // oracle: enumerate chains root→branch→leaf and root→branch
            let chains: Vec<(Vec<u32>, u64)> = vec![
                (vec![0, 1, 2], a1),
                (vec![0, 3, 4], b1),
            ];
            let best = chains
                .iter()
                .max_by(|x, y| x.1.cmp(&y.1).then(y.0[1].cmp(&x.0[1])))
                .unwrap();
            assert_eq!(ids(&critical_path(&t).unwrap()), best.0, "{case:?}");
            assert_eq!(critical_path_length(&t).unwrap(), end);
        }
    }

    #[test]
    fn malformed_traces_rejected() {
        let no_root = trace(vec![span(1, Some(0), "a", 0, 1)]);
        assert!(matches!(critical_path(&no_root), Err(TraceError::MalformedTrace { .. })));
        let two_roots = trace(vec![span(0, None, "a", 0, 1), span(1, None, "b", 0, 1)]);
        assert!(critical_path(&two_roots).is_err());
        let escapes = trace(vec![span(0, None, "a", 0, 10), span(1, Some(0), "b", 5, 20)]);
        assert!(critical_path(&escapes).is_err());
    }

    #[test]
    fn breakdown_of_single_service() {
        let traces = vec![trace(vec![span(0, None, "only", 0, 10)])];
        let b = per_tier_breakdown(&traces).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b["only"], 1.0);
    }

    #[test]
    fn breakdown_of_chain() {
        // exclusive 1000 / 2000 / 3000 with zero network
        let t = trace(vec![
            span(0, None, "a", 0, 6000),
            span(1, Some(0), "b", 1000, 6000),
            span(2, Some(1), "c", 3000, 6000),
        ]);
        let b = per_tier_breakdown([&t]).unwrap();
        assert!((b["a"] - 1.0 / 6.0).abs() < 1e-12);
        assert!((b["b"] - 1.0 / 3.0).abs() < 1e-12);
        assert!((b["c"] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn breakdown_of_mixed_classes_matches_hand_average() {
        let traces = vec![
            // class x: fe 200 exclusive, a 800
            trace(vec![span(0, None, "fe", 0, 1000), span(1, Some(0), "a", 100, 900)]),
            trace(vec![span(0, None, "fe", 0, 2000), span(1, Some(0), "a", 100, 1900)]),
            // class y: fe 300, b 700 (critical), a off-path
            trace(vec![
                span(0, None, "fe", 0, 1000),
                span(1, Some(0), "a", 100, 400),
                span(2, Some(0), "b", 100, 800),
            ]),
            trace(vec![span(0, None, "fe", 0, 3000), span(1, Some(0), "b", 0, 3000)]),
        ];
        // hand totals: e2e = 7000; fe = 200+200+300+0 = 700; a = 800+1800 = 2600;
        // b = 700+3000 = 3700
        let b = per_tier_breakdown(&traces).unwrap();
        assert!((b["fe"] - 700.0 / 7000.0).abs() < 1e-12);
        assert!((b["a"] - 2600.0 / 7000.0).abs() < 1e-12);
        assert!((b["b"] - 3700.0 / 7000.0).abs() < 1e-12);
        assert!((b.values().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn network_ratios() {
        let mut s = span(0, None, "a", 0, 100);
        s.compute_us = 80;
        let b = network_compute_ratio([&trace(vec![s.clone()])]).unwrap();
        assert_eq!(b["a"], (0.0, 1.0));

        s.network_us = 40;
        s.compute_us = 40;
        let b = network_compute_ratio([&trace(vec![s.clone()])]).unwrap();
        assert_eq!(b["a"], (0.5, 0.5));

        // hand sums: a net 10+30=40, comp 30+50=80, blocked 20+60=80 → 0.2, 0.4
        let mut x = span(0, None, "a", 0, 200);
        (x.network_us, x.compute_us, x.blocked_us) = (10, 30, 20);
        let mut y = span(1, Some(0), "a", 10, 190);
        (y.network_us, y.compute_us, y.blocked_us) = (30, 50, 60);
        let b = network_compute_ratio([&trace(vec![x, y])]).unwrap();
        assert!((b["a"].0 - 0.2).abs() < 1e-12 && (b["a"].1 - 0.4).abs() < 1e-12);
        assert!(matches!(network_compute_ratio([]), Err(TraceError::EmptyInput)));
    }

    #[test]
    fn nearest_rank() {
        assert_eq!(percentile(&[1, 2, 3, 4], 50.0).unwrap(), 2);
        assert_eq!(percentile(&[4, 3, 1, 2], 0.0).unwrap(), 1);
        assert_eq!(percentile(&[4, 3, 1, 2], 100.0).unwrap(), 4);
        for p in [0.0, 1.0, 50.0, 99.9, 100.0] {
            assert_eq!(percentile(&[7], p).unwrap(), 7);
        }
        let hundred: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&hundred, 99.0).unwrap(), 99);
        assert!(matches!(percentile(&[], 50.0), Err(TraceError::EmptyInput)));
    }

    #[test]
    fn jsonl_field_names_and_round_trip() {
        let mut s = span(3, Some(1), "svc", 5, 9);
        s.trace_id = 17;
        let t = Trace {
            trace_id: 17,
            class: "read".into(),
            user: 4,
            spans: vec![span(1, None, "fe", 0, 10), s],
        };
        let mut buf = Vec::new();
        write_jsonl([&t], &mut buf).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.starts_with(r#"{"trace_id":17,"class":"read","user":4,"spans":[{"span_id":1,"parent":null,"service":"fe","start_us":0,"end_us":10,"network_us":0,"compute_us":0,"blocked_us":0}"#));
        let mut back = read_jsonl(&buf[..]).unwrap();
        back[0].spans[0].trace_id = 1;
        let mut expect = t.clone();
        expect.spans[0].trace_id = 1;
        assert_eq!(back, vec![expect]);
    }
}

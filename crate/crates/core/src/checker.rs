//! Offline auditing of execution traces.
//!
//! The execution graph has one node per completed operation and two kinds of
//! edges: session order (consecutive operations of one client) and
//! reads-from (the write whose tag a read returned, to that read). Causal
//! order is the transitive closure. Conditions on reads are stated in terms
//! of tags: a read of `o` must return a tag at least as large as every write
//! to `o` in its causal past, and that tag must belong to an actual write (or
//! be the initial version). The per-operation contexts recorded in the trace
//! are only used by the timestamp check; the causal past is recomputed from
//! the graph.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::Serialize;

use crate::client::OpKind;
use crate::codec::{make_code, Codebook};
use crate::protocol::{tag_compare, ClientId, DependencyContext, ObjectId, ServerId, Tag};
use crate::trace::{ExecutionTrace, Phase, TraceEvent};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", content = "detail", rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail(Vec<String>),
    /// The check's hypothesis is not met by the trace.
    Inconclusive(String),
}

impl Verdict {
    fn from_problems(problems: Vec<String>) -> Verdict {
        if problems.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Fail(problems)
        }
    }

    pub fn is_pass(&self) -> bool {
        *self == Verdict::Pass
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail(_))
    }
}

/// One operation as reconstructed from the trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operation {
    pub client: ClientId,
    pub op: u64,
    pub kind: OpKind,
    pub object: ObjectId,
    pub server: ServerId,
    pub probe: bool,
    pub invoked_at: u64,
    /// Written value, or the value a read returned.
    pub value: Option<String>,
    pub tag: Option<Tag>,
    pub ctx_after: Option<DependencyContext>,
}

impl Operation {
    pub fn completed(&self) -> bool {
        self.tag.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Session,
    ReadsFrom,
}

#[derive(Clone, Debug)]
pub struct Header {
    pub n: usize,
    pub k: usize,
    pub value_len: usize,
    pub initial: Vec<String>,
}

fn header_of(trace: &ExecutionTrace) -> Option<Header> {
    match trace.header()? {
        TraceEvent::Header { n, k, value_len, initial, .. } => {
            Some(Header { n: *n, k: *k, value_len: *value_len, initial: initial.clone() })
        }
        _ => None,
    }
}

/// All operations in invocation order.
pub fn operations(trace: &ExecutionTrace) -> Vec<Operation> {
    let mut ops = Vec::new();
    let mut index: HashMap<(ClientId, u64), usize> = HashMap::new();
    for ev in &trace.events {
        match ev {
            TraceEvent::Invoke { step, client, op, kind, object, server, value, probe, .. } => {
                index.insert((*client, *op), ops.len());
                ops.push(Operation {
                    client: *client,
                    op: *op,
                    kind: *kind,
                    object: *object,
                    server: *server,
                    probe: *probe,
                    invoked_at: *step,
                    value: value.clone(),
                    tag: None,
                    ctx_after: None,
                });
            }
            TraceEvent::Respond { client, op, tag, value, ctx, .. } => {
                if let Some(&i) = index.get(&(*client, *op)) {
                    let o = &mut ops[i];
                    o.tag = Some(*tag);
                    o.ctx_after = Some(ctx.clone());
                    if o.kind == OpKind::Read {
                        o.value = value.clone();
                    }
                }
            }
            _ => {}
        }
    }
    ops
}

/// Completed operations with session and reads-from edges.
#[derive(Clone, Debug)]
pub struct ExecutionGraph {
    pub k: usize,
    pub nodes: Vec<Operation>,
    pub edges: Vec<(usize, usize, EdgeKind)>,
    /// Reads whose tag matches no write and is not the initial tag.
    pub unmatched_reads: Vec<usize>,
}

impl ExecutionGraph {
    pub fn build(trace: &ExecutionTrace) -> Result<ExecutionGraph, String> {
        let header = header_of(trace).ok_or("trace has no header")?;
        let nodes: Vec<Operation> = operations(trace).into_iter().filter(Operation::completed).collect();
        let mut edges = Vec::new();
        let mut last_of: HashMap<ClientId, usize> = HashMap::new();
        for (i, op) in nodes.iter().enumerate() {
            if let Some(prev) = last_of.insert(op.client, i) {
                edges.push((prev, i, EdgeKind::Session));
            }
        }
        let mut writers: HashMap<(ObjectId, Tag), Vec<usize>> = HashMap::new();
        for (i, op) in nodes.iter().enumerate() {
            if op.kind == OpKind::Write {
                writers.entry((op.object, op.tag.expect("completed"))).or_default().push(i);
            }
        }
        let mut unmatched_reads = Vec::new();
        for (i, op) in nodes.iter().enumerate() {
            if op.kind != OpKind::Read {
                continue;
            }
            let tag = op.tag.expect("completed");
            match writers.get(&(op.object, tag)) {
                Some(ws) => edges.extend(ws.iter().map(|w| (*w, i, EdgeKind::ReadsFrom))),
                None if tag == Tag::INITIAL => {}
                None => unmatched_reads.push(i),
            }
        }
        Ok(ExecutionGraph { k: header.k, nodes, edges, unmatched_reads })
    }

    /// Kahn's algorithm; `None` if the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b, _) in &self.edges {
            succ[a].push(b);
            indegree[b] += 1;
        }
        let mut ready: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_front() {
            order.push(i);
            for &j in &succ[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push_back(j);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Per node, the largest write tag of each object among its strict
    /// causal predecessors.
    pub fn causal_past(&self) -> Option<Vec<Vec<Option<Tag>>>> {
        let order = self.topological_order()?;
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for &(a, b, _) in &self.edges {
            preds[b].push(a);
        }
        let mut past: Vec<Vec<Option<Tag>>> = vec![vec![None; self.k]; self.nodes.len()];
        for i in order {
            let mut acc = vec![None; self.k];
            for &p in &preds[i] {
                let pn = &self.nodes[p];
                for (x, slot) in acc.iter_mut().enumerate() {
                    let mut cand = past[p][x];
                    if pn.kind == OpKind::Write && pn.object == x {
                        cand = cand.max(pn.tag);
                    }
                    *slot = (*slot).max(cand);
                }
            }
            past[i] = acc;
        }
        Some(past)
    }
}

pub fn check_unique_tags(trace: &ExecutionTrace) -> Verdict {
    let mut seen: BTreeMap<(ObjectId, Tag), (ClientId, u64)> = BTreeMap::new();
    let mut problems = Vec::new();
    for op in operations(trace).iter().filter(|o| o.kind == OpKind::Write && o.completed()) {
        let tag = op.tag.expect("completed");
        if let Some(first) = seen.insert((op.object, tag), (op.client, op.op)) {
            problems.push(format!(
                "o{} tag {tag:?} assigned to write c{}#{} and write c{}#{}",
                op.object, first.0, first.1, op.client, op.op
            ));
        }
        if tag == Tag::INITIAL {
            problems.push(format!("write c{}#{} reuses the initial tag", op.client, op.op));
        }
    }
    Verdict::from_problems(problems)
}

/// Along every edge the later operation's context dominates the earlier one's.
pub fn check_timestamp_monotone(graph: &ExecutionGraph) -> Verdict {
    if graph.topological_order().is_none() {
        return Verdict::Fail(vec!["execution graph has a cycle".into()]);
    }
    let mut problems = Vec::new();
    for &(a, b, kind) in &graph.edges {
        let (x, y) = (&graph.nodes[a], &graph.nodes[b]);
        let (cx, cy) = (x.ctx_after.as_ref().expect("completed"), y.ctx_after.as_ref().expect("completed"));
        if !cx.dominated_by(cy) {
            problems.push(format!(
                "{kind:?} edge c{}#{} -> c{}#{}: {cx:?} not below {cy:?}",
                x.client, x.op, y.client, y.op
            ));
        }
    }
    Verdict::from_problems(problems)
}

pub fn check_causal_reads(graph: &ExecutionGraph, trace: &ExecutionTrace) -> Verdict {
    let Some(header) = header_of(trace) else { return Verdict::Inconclusive("trace has no header".into()) };
    let Some(past) = graph.causal_past() else {
        return Verdict::Fail(vec!["execution graph has a cycle".into()]);
    };
    let mut written: HashMap<(ObjectId, Tag), &Option<String>> = HashMap::new();
    for op in graph.nodes.iter().filter(|o| o.kind == OpKind::Write) {
        written.insert((op.object, op.tag.expect("completed")), &op.value);
    }
    let mut problems = Vec::new();
    for (i, r) in graph.nodes.iter().enumerate().filter(|(_, o)| o.kind == OpKind::Read) {
        let tag = r.tag.expect("completed");
        let who = format!("read c{}#{} of o{}", r.client, r.op, r.object);
        if let Some(w) = past[i][r.object].filter(|w| *w > tag) {
            problems.push(format!("{who} returned {tag:?} but {w:?} causally precedes it"));
        }
        let expected = if tag == Tag::INITIAL {
            header.initial.get(r.object)
        } else {
            match written.get(&(r.object, tag)) {
                Some(v) => v.as_ref(),
                None => {
                    problems.push(format!("{who} returned {tag:?}, which no write produced"));
                    continue;
                }
            }
        };
        if expected != r.value.as_ref() {
            problems.push(format!("{who} returned {tag:?} with a value other than the one written"));
        }
    }
    Verdict::from_problems(problems)
}

fn crashed_servers(trace: &ExecutionTrace) -> BTreeSet<ServerId> {
    trace
        .events
        .iter()
        .filter_map(|e| if let TraceEvent::Crash { server, .. } = e { Some(*server) } else { None })
        .collect()
}

fn codebook_of(header: &Header) -> Result<Codebook, String> {
    let spec = make_code(header.n, header.k, header.value_len).map_err(|e| e.to_string())?;
    Codebook::new(spec).map_err(|e| e.to_string())
}

/// Objects that still have a recovery set made only of never-crashed servers.
fn recoverable_objects(trace: &ExecutionTrace, header: &Header) -> Result<Vec<bool>, String> {
    let book = codebook_of(header)?;
    let crashed = crashed_servers(trace);
    let alive: BTreeSet<ServerId> = (0..header.n).filter(|s| !crashed.contains(s)).collect();
    Ok((0..header.k).map(|o| book.has_live_recovery_set(o, &alive)).collect())
}

/// Probe reads issued after the workload settled return one identical
/// (tag, value) per object across all live servers.
pub fn check_convergence(trace: &ExecutionTrace) -> Verdict {
    let Some(header) = header_of(trace) else { return Verdict::Inconclusive("trace has no header".into()) };
    let settled = trace.events.iter().any(|e| matches!(e, TraceEvent::Quiescent { phase: Phase::Probes, .. }));
    if !settled {
        return Verdict::Inconclusive("trace did not settle after its probe reads".into());
    }
    let recoverable = match recoverable_objects(trace, &header) {
        Ok(r) => r,
        Err(e) => return Verdict::Inconclusive(e),
    };
    let crashed = crashed_servers(trace);
    let mut seen: BTreeMap<ObjectId, BTreeSet<(Tag, Option<String>)>> = BTreeMap::new();
    let mut problems = Vec::new();
    for op in operations(trace).into_iter().filter(|o| o.probe) {
        match op.tag {
            Some(tag) => {
                seen.entry(op.object).or_default().insert((tag, op.value));
            }
            None if crashed.contains(&op.server) || !recoverable[op.object] => {}
            None => problems.push(format!("probe of o{} at s{} never returned", op.object, op.server)),
        }
    }
    if seen.is_empty() && problems.is_empty() {
        return Verdict::Inconclusive("trace has no probe reads".into());
    }
    for (o, results) in seen {
        if results.len() > 1 {
            let tags: Vec<Tag> = results.iter().map(|r| r.0).collect();
            problems.push(format!("probes of o{o} disagree: {tags:?}"));
        }
    }
    Verdict::from_problems(problems)
}

/// Liveness verdict plus the pending operations excused by a crash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LivenessReport {
    #[serde(flatten)]
    pub verdict: Verdict,
    /// (client, op) of pending operations the hypotheses do not cover.
    pub exempt: Vec<(ClientId, u64)>,
}

/// Every write at a never-crashed server is acknowledged, and every read at
/// a never-crashed server completes if its object still has a recovery set
/// of never-crashed servers.
pub fn check_liveness(trace: &ExecutionTrace) -> LivenessReport {
    let inconclusive = |why: &str| LivenessReport { verdict: Verdict::Inconclusive(why.into()), exempt: vec![] };
    let Some(header) = header_of(trace) else { return inconclusive("trace has no header") };
    if !trace.events.iter().any(|e| matches!(e, TraceEvent::Quiescent { .. })) {
        return inconclusive("trace never reached quiescence");
    }
    let recoverable = match recoverable_objects(trace, &header) {
        Ok(r) => r,
        Err(e) => return inconclusive(&e),
    };
    let crashed = crashed_servers(trace);
    let mut problems = Vec::new();
    let mut exempt = Vec::new();
    for op in operations(trace).into_iter().filter(|o| !o.completed()) {
        let excused = crashed.contains(&op.server) || (op.kind == OpKind::Read && !recoverable[op.object]);
        if excused {
            exempt.push((op.client, op.op));
        } else {
            problems.push(format!(
                "{:?} c{}#{} of o{} at s{} (step {}) never completed",
                op.kind, op.client, op.op, op.object, op.server, op.invoked_at
            ));
        }
    }
    LivenessReport { verdict: Verdict::from_problems(problems), exempt }
}

/// The last snapshot of every live server shows one symbol and no history.
pub fn check_storage_stable(trace: &ExecutionTrace) -> Verdict {
    let Some(header) = header_of(trace) else { return Verdict::Inconclusive("trace has no header".into()) };
    let Some(last_quiet) = trace.events.iter().rposition(|e| matches!(e, TraceEvent::Quiescent { .. })) else {
        return Verdict::Inconclusive("trace never reached quiescence".into());
    };
    match recoverable_objects(trace, &header) {
        Ok(r) if r.iter().all(|x| *x) => {}
        Ok(_) => return Verdict::Inconclusive("crashes left an object without a live recovery set".into()),
        Err(e) => return Verdict::Inconclusive(e),
    }
    let crashed = crashed_servers(trace);
    let mut last: BTreeMap<ServerId, (usize, usize)> = BTreeMap::new();
    for ev in &trace.events[last_quiet..] {
        if let TraceEvent::Snapshot { server, bytes_symbol, bytes_history, .. } = ev {
            last.insert(*server, (*bytes_symbol, *bytes_history));
        }
    }
    let mut problems = Vec::new();
    for s in (0..header.n).filter(|s| !crashed.contains(s)) {
        match last.get(&s) {
            None => problems.push(format!("no final snapshot of s{s}")),
            Some(&(sym, hist)) if sym != header.value_len || hist != 0 => problems.push(format!(
                "s{s} stores {sym} symbol bytes and {hist} history bytes, expected {} and 0",
                header.value_len
            )),
            Some(_) => {}
        }
    }
    Verdict::from_problems(problems)
}

/// Tags of each object are pairwise comparable and distinct tags never compare equal.
pub fn check_tag_order(trace: &ExecutionTrace) -> Verdict {
    let mut per_object: BTreeMap<ObjectId, BTreeSet<Tag>> = BTreeMap::new();
    for op in operations(trace) {
        if let Some(t) = op.tag {
            per_object.entry(op.object).or_default().insert(t);
        }
    }
    let mut problems = Vec::new();
    for (o, tags) in per_object {
        let tags: Vec<Tag> = tags.into_iter().collect();
        for w in tags.windows(2) {
            if tag_compare(w[0], w[1]) != std::cmp::Ordering::Less {
                problems.push(format!("o{o}: {:?} and {:?} are not strictly ordered", w[0], w[1]));
            }
        }
    }
    Verdict::from_problems(problems)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub unique_tags: Verdict,
    pub timestamp_monotone: Verdict,
    pub causal_reads: Verdict,
    pub convergence: Verdict,
    pub liveness: LivenessReport,
    pub storage_stable: Verdict,
    pub tag_order: Verdict,
    /// Assertion failures the servers recorded during the run.
    pub runtime_violations: Vec<String>,
    pub decodes: usize,
}

impl CheckReport {
    fn verdicts(&self) -> [(&'static str, &Verdict); 7] {
        [
            ("unique_tags", &self.unique_tags),
            ("timestamp_monotone", &self.timestamp_monotone),
            ("causal_reads", &self.causal_reads),
            ("convergence", &self.convergence),
            ("liveness", &self.liveness.verdict),
            ("storage_stable", &self.storage_stable),
            ("tag_order", &self.tag_order),
        ]
    }

    /// No check failed and no runtime assertion fired. Inconclusive checks
    /// do not fail the report.
    pub fn passed(&self) -> bool {
        self.runtime_violations.is_empty() && self.verdicts().iter().all(|(_, v)| !v.is_fail())
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .verdicts()
            .iter()
            .filter_map(|(name, v)| match v {
                Verdict::Fail(p) => Some(format!("{name}: {}", p.first().map_or("", String::as_str))),
                _ => None,
            })
            .collect();
        out.extend(self.runtime_violations.iter().map(|v| format!("runtime: {v}")));
        out
    }
}

/// Runs every check. Storage stability is only meaningful for traces whose
/// crashes stayed within the tolerated bound; callers decide whether to use it.
pub fn check_all(trace: &ExecutionTrace) -> CheckReport {
    let (timestamp_monotone, causal_reads) = match ExecutionGraph::build(trace) {
        Ok(g) => (check_timestamp_monotone(&g), check_causal_reads(&g, trace)),
        Err(e) => (Verdict::Inconclusive(e.clone()), Verdict::Inconclusive(e)),
    };
    CheckReport {
        unique_tags: check_unique_tags(trace),
        timestamp_monotone,
        causal_reads,
        convergence: check_convergence(trace),
        liveness: check_liveness(trace),
        storage_stable: check_storage_stable(trace),
        tag_order: check_tag_order(trace),
        runtime_violations: trace
            .violations()
            .map(|v| match v {
                TraceEvent::Violation { server, kind, detail, .. } => format!("s{server} {kind:?}: {detail}"),
                _ => unreachable!(),
            })
            .collect(),
        decodes: trace.decode_count(),
    }
}

/// Purpose-built corruptions of a passing trace, one per check. Each control
/// names the check that must reject it.
pub fn negative_controls(trace: &ExecutionTrace) -> Vec<(&'static str, ExecutionTrace)> {
    let mut out = Vec::new();
    let ops = operations(trace);
    let events = &trace.events;
    let respond_of = |client: ClientId, op: u64| {
        events
            .iter()
            .position(|e| matches!(e, TraceEvent::Respond { client: c, op: o, .. } if *c == client && *o == op))
    };

    // two writes of one object claim the same tag
    let writes: Vec<&Operation> = ops.iter().filter(|o| o.kind == OpKind::Write && o.completed()).collect();
    if let Some((a, b)) = writes
        .iter()
        .enumerate()
        .find_map(|(i, a)| writes[i + 1..].iter().find(|b| b.object == a.object && b.tag != a.tag).map(|b| (*a, *b)))
    {
        let mut t = trace.clone();
        if let Some(i) = respond_of(b.client, b.op) {
            if let TraceEvent::Respond { tag, .. } = &mut t.events[i] {
                *tag = a.tag.expect("completed");
            }
            out.push(("unique_tags", t));
        }
    }

    // a later operation in a session forgets a dependency
    let mut by_client: BTreeMap<ClientId, Vec<&Operation>> = BTreeMap::new();
    for o in ops.iter().filter(|o| o.completed()) {
        by_client.entry(o.client).or_default().push(o);
    }
    if let Some(next) = by_client.values().find_map(|s| s.get(1).copied()) {
        let mut t = trace.clone();
        if let Some(i) = respond_of(next.client, next.op) {
            if let TraceEvent::Respond { ctx, .. } = &mut t.events[i] {
                ctx.0.clear();
            }
            out.push(("timestamp_monotone", t));
        }
    }

    // a read returns the initial version although a write of its object precedes it
    if let Ok(graph) = ExecutionGraph::build(trace) {
        if let Some(past) = graph.causal_past() {
            // the write must precede the read through session order, since the
            // corruption removes the read's own reads-from edge
            let stale = graph.edges.iter().filter(|e| e.2 == EdgeKind::Session).find_map(|&(p, i, _)| {
                let (prev, r) = (&graph.nodes[p], &graph.nodes[i]);
                let mut seen = past[p][r.object];
                if prev.kind == OpKind::Write && prev.object == r.object {
                    seen = seen.max(prev.tag);
                }
                (r.kind == OpKind::Read && seen.is_some_and(|w| w > Tag::INITIAL)).then_some((i, r))
            });
            if let (Some((_, r)), Some(h)) = (stale, header_of(trace)) {
                let mut t = trace.clone();
                if let Some(i) = respond_of(r.client, r.op) {
                    if let TraceEvent::Respond { tag, value, .. } = &mut t.events[i] {
                        *tag = Tag::INITIAL;
                        *value = h.initial.get(r.object).cloned();
                    }
                    out.push(("causal_reads", t));
                }
            }
        }
    }

    // one probe sees a different version
    if let Some(p) = ops.iter().find(|o| o.probe && o.completed()) {
        let mut t = trace.clone();
        if let Some(i) = respond_of(p.client, p.op) {
            if let TraceEvent::Respond { tag, .. } = &mut t.events[i] {
                tag.seq += 1_000_000;
            }
            out.push(("convergence", t));
        }
    }

    // a write at a live server is never acknowledged
    let crashed = crashed_servers(trace);
    if let Some(w) = writes.iter().find(|w| !crashed.contains(&w.server)) {
        let mut t = trace.clone();
        if let Some(i) = respond_of(w.client, w.op) {
            t.events.remove(i);
            out.push(("liveness", t));
        }
    }

    // a live server ends with leftover history
    if let Some(i) = events.iter().rposition(|e| matches!(e, TraceEvent::Snapshot { .. })) {
        let mut t = trace.clone();
        if let TraceEvent::Snapshot { bytes_history, .. } = &mut t.events[i] {
            *bytes_history += 1;
        }
        out.push(("storage_stable", t));
    }
    out
}

/// The verdict a control is meant to flip.
pub fn control_verdict(name: &str, trace: &ExecutionTrace) -> Verdict {
    match name {
        "unique_tags" => check_unique_tags(trace),
        "timestamp_monotone" => match ExecutionGraph::build(trace) {
            Ok(g) => check_timestamp_monotone(&g),
            Err(e) => Verdict::Inconclusive(e),
        },
        "causal_reads" => match ExecutionGraph::build(trace) {
            Ok(g) => check_causal_reads(&g, trace),
            Err(e) => Verdict::Inconclusive(e),
        },
        "convergence" => check_convergence(trace),
        "liveness" => check_liveness(trace).verdict,
        "storage_stable" => check_storage_stable(trace),
        other => Verdict::Inconclusive(format!("unknown check {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(t: &mut ExecutionTrace, n: usize, k: usize) {
        t.push(TraceEvent::Header { n, k, value_len: 1, clients: 2, f: 0, seed: 0, initial: vec!["00".into(); k] });
    }

    struct Builder {
        trace: ExecutionTrace,
        step: u64,
        next_op: HashMap<ClientId, u64>,
        ctx: HashMap<ClientId, DependencyContext>,
    }

    impl Builder {
        fn new(n: usize, k: usize) -> Self {
            let mut trace = ExecutionTrace::default();
            header(&mut trace, n, k);
            Builder { trace, step: 0, next_op: HashMap::new(), ctx: HashMap::new() }
        }

        fn op(&mut self, client: ClientId, kind: OpKind, object: ObjectId, tag: Tag, value: &str) {
            self.step += 1;
            let op = *self.next_op.entry(client).and_modify(|o| *o += 1).or_insert(0);
            let before = self.ctx.entry(client).or_default().clone();
            self.trace.push(TraceEvent::Invoke {
                step: self.step,
                client,
                op,
                kind,
                object,
                server: 0,
                value: (kind == OpKind::Write).then(|| value.to_string()),
                ctx: before,
                probe: false,
            });
            let c = self.ctx.get_mut(&client).unwrap();
            c.observe(object, tag);
            self.trace.push(TraceEvent::Respond {
                step: self.step,
                client,
                op,
                kind,
                object,
                server: 0,
                tag,
                value: (kind == OpKind::Read).then(|| value.to_string()),
                deps: None,
                ctx: c.clone(),
                probe: false,
            });
        }

        fn write(&mut self, c: ClientId, o: ObjectId, tag: Tag, v: &str) {
            self.op(c, OpKind::Write, o, tag, v);
        }

        fn read(&mut self, c: ClientId, o: ObjectId, tag: Tag, v: &str) {
            self.op(c, OpKind::Read, o, tag, v);
        }
    }

    fn graph_verdict(t: &ExecutionTrace) -> Verdict {
        check_causal_reads(&ExecutionGraph::build(t).unwrap(), t)
    }

    #[test]
    fn unique_tags_examples() {
        let mut b = Builder::new(2, 1);
        b.write(0, 0, Tag::new(1, 0), "01");
        b.write(0, 0, Tag::new(2, 0), "02");
        assert!(check_unique_tags(&b.trace).is_pass());
        // two servers, same counter, different writer ids
        b.write(1, 0, Tag::new(2, 1), "03");
        assert!(check_unique_tags(&b.trace).is_pass());
        b.write(1, 0, Tag::new(2, 1), "04");
        assert!(check_unique_tags(&b.trace).is_fail());
    }

    #[test]
    fn stale_read_your_write_fails() {
        let mut b = Builder::new(2, 1);
        b.write(0, 0, Tag::new(1, 0), "aa");
        b.read(0, 0, Tag::INITIAL, "00");
        assert!(graph_verdict(&b.trace).is_fail());
    }

    #[test]
    fn transitive_dependency_through_another_session() {
        // A writes o0 then o1; B reads A's o1 and must then see A's o0.
        let prefix = || {
            let mut b = Builder::new(3, 2);
            b.write(0, 0, Tag::new(1, 0), "a0");
            b.write(0, 1, Tag::new(1, 0), "a1");
            b.read(1, 1, Tag::new(1, 0), "a1");
            b
        };
        let mut ok = prefix();
        ok.read(1, 0, Tag::new(1, 0), "a0");
        assert!(graph_verdict(&ok.trace).is_pass());
        let mut bad = prefix();
        bad.read(1, 0, Tag::INITIAL, "00");
        assert!(graph_verdict(&bad.trace).is_fail());
    }

    #[test]
    fn sequential_trace_passes_everything_graph_based() {
        let mut b = Builder::new(2, 2);
        b.write(0, 0, Tag::new(1, 0), "01");
        b.read(0, 0, Tag::new(1, 0), "01");
        b.write(0, 1, Tag::new(1, 0), "02");
        b.read(0, 1, Tag::new(1, 0), "02");
        b.read(0, 0, Tag::new(1, 0), "01");
        let g = ExecutionGraph::build(&b.trace).unwrap();
        assert!(check_timestamp_monotone(&g).is_pass());
        assert!(check_causal_reads(&g, &b.trace).is_pass());
        assert!(check_tag_order(&b.trace).is_pass());
        assert_eq!(g.edges.iter().filter(|e| e.2 == EdgeKind::ReadsFrom).count(), 3);
    }

    #[test]
    fn fabricated_tag_and_wrong_value_fail() {
        let mut b = Builder::new(2, 1);
        b.write(0, 0, Tag::new(1, 0), "01");
        b.read(1, 0, Tag::new(7, 1), "01");
        assert!(graph_verdict(&b.trace).is_fail());
        let mut b = Builder::new(2, 1);
        b.write(0, 0, Tag::new(1, 0), "01");
        b.read(1, 0, Tag::new(1, 0), "ff");
        assert!(graph_verdict(&b.trace).is_fail());
    }

    #[test]
    fn reads_from_edge_needs_reader_context() {
        let mut b = Builder::new(2, 1);
        b.write(0, 0, Tag::new(1, 0), "01");
        b.read(1, 0, Tag::new(1, 0), "01");
        let g = ExecutionGraph::build(&b.trace).unwrap();
        assert!(check_timestamp_monotone(&g).is_pass());
        let mut t = b.trace.clone();
        if let Some(TraceEvent::Respond { ctx, .. }) = t.events.last_mut() {
            ctx.0.clear();
        }
        assert!(check_timestamp_monotone(&ExecutionGraph::build(&t).unwrap()).is_fail());
    }

    #[test]
    fn cycle_is_detected() {
        // each read returns the other session's later write
        let mut b = Builder::new(2, 2);
        b.read(0, 0, Tag::new(1, 1), "bb");
        b.write(0, 1, Tag::new(1, 0), "aa");
        b.read(1, 1, Tag::new(1, 0), "aa");
        b.write(1, 0, Tag::new(1, 1), "bb");
        let g = ExecutionGraph::build(&b.trace).unwrap();
        assert!(g.topological_order().is_none());
        assert!(check_timestamp_monotone(&g).is_fail());
    }

    #[test]
    fn convergence_without_quiescence_is_inconclusive() {
        let b = Builder::new(2, 1);
        assert!(matches!(check_convergence(&b.trace), Verdict::Inconclusive(_)));
        assert!(matches!(check_storage_stable(&b.trace), Verdict::Inconclusive(_)));
        assert!(matches!(check_liveness(&b.trace).verdict, Verdict::Inconclusive(_)));
    }

    #[test]
    fn storage_only_constrains_final_snapshot() {
        let mut b = Builder::new(2, 1);
        let snap = |step, server, h| TraceEvent::Snapshot { step, server, bytes_symbol: 1, bytes_history: h };
        b.trace.push(snap(1, 0, 5));
        b.trace.push(snap(1, 1, 5));
        b.trace.push(TraceEvent::Quiescent { step: 2, phase: Phase::Workload });
        b.trace.push(snap(2, 0, 0));
        b.trace.push(snap(2, 1, 0));
        assert!(check_storage_stable(&b.trace).is_pass());
        b.trace.push(TraceEvent::Crash { step: 3, server: 1 });
        b.trace.push(TraceEvent::Quiescent { step: 4, phase: Phase::Probes });
        b.trace.push(snap(4, 0, 0));
        // s1 crashed, so its missing snapshot is fine
        assert!(check_storage_stable(&b.trace).is_pass());
    }

    #[test]
    fn liveness_exempts_crashed_servers_and_unrecoverable_objects() {
        // (3,2): o0 is recoverable from {0} or {1,2}
        let mut t = ExecutionTrace::default();
        header(&mut t, 3, 2);
        let inv = |client, kind, object, server| TraceEvent::Invoke {
            step: 1,
            client,
            op: 0,
            kind,
            object,
            server,
            value: None,
            ctx: DependencyContext::new(),
            probe: false,
        };
        t.push(inv(0, OpKind::Write, 0, 1));
        t.push(TraceEvent::Crash { step: 2, server: 1 });
        t.push(TraceEvent::Quiescent { step: 3, phase: Phase::Workload });
        let r = check_liveness(&t);
        assert!(r.verdict.is_pass());
        assert_eq!(r.exempt, vec![(0, 0)]);

        t.events.insert(2, inv(1, OpKind::Read, 0, 2));
        assert!(check_liveness(&t).verdict.is_fail());
        // with s0 also down, o0 has no live recovery set left
        t.events.insert(3, TraceEvent::Crash { step: 2, server: 0 });
        let r = check_liveness(&t);
        assert!(r.verdict.is_pass());
        assert_eq!(r.exempt.len(), 2);
    }
}

//! Seeded discrete-event simulation of clients and servers over a reliable,
//! bounded-delay network with crash-stop failures.
//!
//! Everything is driven by one event loop and one RNG, so a scenario and a
//! seed determine the trace bit for bit. Internal server actions (encode,
//! gossip, garbage collection) run on periodic timers whose phases are drawn
//! from the seed. A run ends at quiescence, or at the step limit.
//!
//! After the client workload settles, the simulator issues one probe read of
//! every object at every live server (fresh clients, empty context) and lets
//! the system settle again. The checker compares those probe results.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use log::{debug, info};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Client, OpKind};
use crate::codec::{make_code, Codebook, CodecError};
use crate::protocol::{ClientId, Envelope, Node, ObjectId, ServerId};
use crate::server::{Server, ServerEvent, ServerStats};
use crate::trace::{ExecutionTrace, Phase, TraceEvent};
use crate::wire::encode_envelope;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Code(#[from] CodecError),
    #[error("delay bounds {min}..={max} are inverted")]
    BadDelay { min: u64, max: u64 },
    #[error("timer periods must be positive")]
    BadTimer,
    #[error("workload: {0}")]
    BadWorkload(String),
    #[error("script op {index}: {reason}")]
    BadScript { index: usize, reason: String },
    #[error("{crashes} crashes scheduled but f = {f}")]
    TooManyCrashes { crashes: usize, f: usize },
    #[error("crash of server {server}: {reason}")]
    BadCrash { server: ServerId, reason: String },
    #[error("initial values: {0}")]
    BadInitial(String),
    #[error("scenario file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayBounds {
    pub min: u64,
    pub max: u64,
}

impl Default for DelayBounds {
    fn default() -> Self {
        DelayBounds { min: 1, max: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timers {
    pub encode: u64,
    pub gossip: u64,
    pub gc: u64,
    pub snapshot: u64,
}

impl Default for Timers {
    fn default() -> Self {
        Timers { encode: 5, gossip: 7, gc: 10, snapshot: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub ops_per_client: usize,
    /// Probability that an operation is a write.
    pub write_ratio: f64,
    /// Object `o` is chosen with weight `1 / (o + 1)^skew`; 0 is uniform.
    #[serde(default)]
    pub skew: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptOp {
    pub client: ClientId,
    pub kind: OpKind,
    pub object: ObjectId,
    /// Text written by a write, zero-padded to the object size.
    #[serde(default)]
    pub value: Option<String>,
    /// Server to send this and later operations to.
    #[serde(default)]
    pub server: Option<ServerId>,
    /// Earliest step at which the operation may be issued.
    #[serde(default)]
    pub not_before: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub server: ServerId,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedFilter {
    #[default]
    All,
    Odd,
    Even,
}

impl SeedFilter {
    fn admits(self, seed: u64) -> bool {
        match self {
            SeedFilter::All => true,
            SeedFilter::Odd => !seed.is_multiple_of(2),
            SeedFilter::Even => seed.is_multiple_of(2),
        }
    }
}

/// Crashes of distinct random servers at random steps in `from..=to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomCrashes {
    pub count: usize,
    pub from: u64,
    pub to: u64,
    #[serde(default)]
    pub seeds: SeedFilter,
}

fn default_clients() -> usize {
    1
}

fn default_step_limit() -> u64 {
    1_000_000
}

fn default_think() -> u64 {
    3
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n: usize,
    pub k: usize,
    pub value_len: usize,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default)]
    pub workload: Option<Workload>,
    #[serde(default)]
    pub script: Vec<ScriptOp>,
    #[serde(default)]
    pub delay: DelayBounds,
    #[serde(default)]
    pub fifo: bool,
    /// Pick a random server for every operation instead of pinning clients.
    #[serde(default)]
    pub switch_servers: bool,
    #[serde(default)]
    pub f: usize,
    #[serde(default)]
    pub crashes: Vec<CrashSpec>,
    #[serde(default)]
    pub random_crashes: Option<RandomCrashes>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_step_limit")]
    pub step_limit: u64,
    #[serde(default)]
    pub timers: Timers,
    /// Upper bound on a client's pause between operations.
    #[serde(default = "default_think")]
    pub think_time: u64,
    /// Hex initial value per object; all zero when absent.
    #[serde(default)]
    pub initial: Option<Vec<String>>,
    #[serde(default = "yes")]
    pub probes: bool,
    /// Record every message with its canonical bytes.
    #[serde(default = "yes")]
    pub record_messages: bool,
}

impl Scenario {
    /// A scenario with defaults everywhere except the code parameters.
    pub fn new(n: usize, k: usize, value_len: usize) -> Self {
        serde_json::from_value(serde_json::json!({ "n": n, "k": k, "value_len": value_len }))
            .expect("minimal scenario parses")
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        make_code(self.n, self.k, self.value_len)?;
        if self.delay.min > self.delay.max {
            return Err(ScenarioError::BadDelay { min: self.delay.min, max: self.delay.max });
        }
        let t = &self.timers;
        if t.encode == 0 || t.gossip == 0 || t.gc == 0 || t.snapshot == 0 {
            return Err(ScenarioError::BadTimer);
        }
        if let Some(w) = &self.workload {
            if !self.script.is_empty() {
                return Err(ScenarioError::BadWorkload("give either a script or a random workload".into()));
            }
            if !(0.0..=1.0).contains(&w.write_ratio) || !w.skew.is_finite() || w.skew < 0.0 {
                return Err(ScenarioError::BadWorkload(format!(
                    "write_ratio {} must lie in [0, 1] and skew {} must be finite and >= 0",
                    w.write_ratio, w.skew
                )));
            }
        }
        for (index, op) in self.script.iter().enumerate() {
            let bad = |reason: String| Err(ScenarioError::BadScript { index, reason });
            if op.client >= self.clients {
                return bad(format!("client {} but only {} clients", op.client, self.clients));
            }
            if op.object >= self.k {
                return bad(format!("object {} but k = {}", op.object, self.k));
            }
            if let Some(s) = op.server.filter(|s| *s >= self.n) {
                return bad(format!("server {s} but n = {}", self.n));
            }
            match (op.kind, &op.value) {
                (OpKind::Read, Some(_)) => return bad("a read carries no value".into()),
                (OpKind::Write, Some(v)) if v.len() > self.value_len => {
                    return bad(format!("value of {} bytes exceeds {}", v.len(), self.value_len))
                }
                _ => {}
            }
        }
        let random = self.random_crashes.map_or(0, |r| r.count);
        if self.crashes.len() + random > self.f {
            return Err(ScenarioError::TooManyCrashes { crashes: self.crashes.len() + random, f: self.f });
        }
        if self.f > self.n {
            return Err(ScenarioError::TooManyCrashes { crashes: self.f, f: self.n });
        }
        let mut seen = BTreeSet::new();
        for c in &self.crashes {
            if c.server >= self.n {
                return Err(ScenarioError::BadCrash { server: c.server, reason: format!("n = {}", self.n) });
            }
            if !seen.insert(c.server) {
                return Err(ScenarioError::BadCrash { server: c.server, reason: "crashes twice".into() });
            }
        }
        if let Some(r) = self.random_crashes {
            if r.from > r.to {
                return Err(ScenarioError::BadCrash { server: 0, reason: format!("window {}..={}", r.from, r.to) });
            }
            if self.crashes.len() + r.count > self.n {
                return Err(ScenarioError::BadCrash { server: 0, reason: "not enough servers".into() });
            }
        }
        self.initial_values()?;
        Ok(())
    }

    fn initial_values(&self) -> Result<Vec<Vec<u8>>, ScenarioError> {
        let Some(hexes) = &self.initial else { return Ok(vec![vec![0; self.value_len]; self.k]) };
        if hexes.len() != self.k {
            return Err(ScenarioError::BadInitial(format!("{} values for {} objects", hexes.len(), self.k)));
        }
        hexes
            .iter()
            .map(|h| {
                let v = hex::decode(h).map_err(|e| ScenarioError::BadInitial(e.to_string()))?;
                if v.len() != self.value_len {
                    return Err(ScenarioError::BadInitial(format!("{} bytes, expected {}", v.len(), self.value_len)));
                }
                Ok(v)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Quiescent,
    StepLimit,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub trace: ExecutionTrace,
    pub final_step: u64,
    pub server_stats: Vec<ServerStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TimerKind {
    Encode,
    Gossip,
    Gc,
}

#[derive(Debug)]
enum Event {
    Deliver { id: u64, env: Envelope },
    Timer { server: ServerId, kind: TimerKind },
    Snapshot,
    Issue { client: ClientId },
    Crash { server: ServerId },
}

#[derive(Debug)]
enum OpSource {
    Script(VecDeque<ScriptOp>),
    Random { remaining: usize },
    Probe(Option<ObjectId>),
}

#[derive(Debug)]
struct SimClient {
    automaton: Client,
    source: OpSource,
    probe: bool,
}

/// Kind, object, value, pinned server and earliest issue step.
type NextOp = (OpKind, ObjectId, Vec<u8>, Option<ServerId>, u64);

/// One simulation run in progress.
pub struct Simulation {
    scenario: Scenario,
    book: Arc<Codebook>,
    servers: Vec<Server>,
    clients: Vec<SimClient>,
    alive: Vec<bool>,
    queue: BTreeMap<(u64, u64), Event>,
    next_seq: u64,
    next_msg: u64,
    now: u64,
    rng: ChaCha8Rng,
    object_pick: Option<WeightedIndex<f64>>,
    fifo_last: HashMap<(Node, Node), u64>,
    trace: ExecutionTrace,
    in_flight: usize,
    pending_issues: usize,
    pending_crashes: usize,
    probing: bool,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let sc = scenario.clone();
        let book = Arc::new(Codebook::new(make_code(sc.n, sc.k, sc.value_len)?)?);
        let initial = sc.initial_values()?;
        let servers = (0..sc.n).map(|s| Server::init(s, Arc::clone(&book), &initial)).collect::<Result<Vec<_>, _>>()?;
        let rng = ChaCha8Rng::seed_from_u64(sc.seed);
        let object_pick = match &sc.workload {
            Some(w) => {
                let weights: Vec<f64> = (0..sc.k).map(|o| 1.0 / ((o + 1) as f64).powf(w.skew)).collect();
                Some(WeightedIndex::new(weights).map_err(|e| ScenarioError::BadWorkload(e.to_string()))?)
            }
            None => None,
        };
        let mut scripts: Vec<VecDeque<ScriptOp>> = vec![VecDeque::new(); sc.clients];
        for op in &sc.script {
            scripts[op.client].push_back(op.clone());
        }
        let clients = scripts
            .into_iter()
            .enumerate()
            .map(|(c, script)| SimClient {
                automaton: Client::new(c, c % sc.n, sc.value_len),
                source: match &sc.workload {
                    Some(w) => OpSource::Random { remaining: w.ops_per_client },
                    None => OpSource::Script(script),
                },
                probe: false,
            })
            .collect();

        let mut trace = ExecutionTrace::default();
        trace.push(TraceEvent::Header {
            n: sc.n,
            k: sc.k,
            value_len: sc.value_len,
            clients: sc.clients,
            f: sc.f,
            seed: sc.seed,
            initial: initial.iter().map(hex::encode).collect(),
        });

        let mut sim = Simulation {
            alive: vec![true; sc.n],
            book,
            servers,
            clients,
            queue: BTreeMap::new(),
            next_seq: 0,
            next_msg: 0,
            now: 0,
            rng,
            object_pick,
            fifo_last: HashMap::new(),
            trace,
            in_flight: 0,
            pending_issues: 0,
            pending_crashes: 0,
            probing: false,
            scenario: sc,
        };
        sim.schedule_start();
        Ok(sim)
    }

    fn schedule_start(&mut self) {
        let sc = self.scenario.clone();
        for s in 0..sc.n {
            for (kind, period) in [
                (TimerKind::Encode, sc.timers.encode),
                (TimerKind::Gossip, sc.timers.gossip),
                (TimerKind::Gc, sc.timers.gc),
            ] {
                let phase = self.rng.gen_range(0..period);
                self.schedule(phase, Event::Timer { server: s, kind });
            }
        }
        self.schedule(0, Event::Snapshot);
        for c in 0..sc.clients {
            let at = self.rng.gen_range(0..=sc.think_time);
            self.schedule_issue(c, at);
        }
        for c in &sc.crashes {
            self.schedule_crash(c.server, c.step);
        }
        if let Some(r) = sc.random_crashes.filter(|r| r.seeds.admits(sc.seed)) {
            let taken: BTreeSet<ServerId> = sc.crashes.iter().map(|c| c.server).collect();
            let mut pool: Vec<ServerId> = (0..sc.n).filter(|s| !taken.contains(s)).collect();
            for _ in 0..r.count {
                let server = pool.swap_remove(self.rng.gen_range(0..pool.len()));
                let step = self.rng.gen_range(r.from..=r.to);
                self.schedule_crash(server, step);
            }
        }
    }

    fn schedule(&mut self, at: u64, ev: Event) {
        self.queue.insert((at, self.next_seq), ev);
        self.next_seq += 1;
    }

    fn schedule_issue(&mut self, client: ClientId, at: u64) {
        self.pending_issues += 1;
        self.schedule(at, Event::Issue { client });
    }

    fn schedule_crash(&mut self, server: ServerId, at: u64) {
        self.pending_crashes += 1;
        self.schedule(at, Event::Crash { server });
    }

    /// Adds a crash before the run starts. The total must stay within `f`.
    pub fn inject_crash(&mut self, server: ServerId, step: u64) -> Result<(), ScenarioError> {
        if server >= self.servers.len() {
            return Err(ScenarioError::BadCrash { server, reason: format!("n = {}", self.servers.len()) });
        }
        let scheduled: Vec<ServerId> = self
            .queue
            .values()
            .filter_map(|e| if let Event::Crash { server } = e { Some(*server) } else { None })
            .collect();
        if scheduled.contains(&server) {
            return Err(ScenarioError::BadCrash { server, reason: "crashes twice".into() });
        }
        if scheduled.len() + 1 > self.scenario.f {
            return Err(ScenarioError::TooManyCrashes { crashes: scheduled.len() + 1, f: self.scenario.f });
        }
        self.schedule_crash(server, step);
        Ok(())
    }

    fn send(&mut self, env: Envelope) {
        let id = self.next_msg;
        self.next_msg += 1;
        let (lo, hi) = (self.scenario.delay.min, self.scenario.delay.max);
        let mut at = self.now + self.rng.gen_range(lo..=hi);
        if self.scenario.fifo {
            let last = self.fifo_last.entry((env.from, env.to)).or_insert(0);
            at = at.max(*last);
            *last = at;
        }
        if self.scenario.record_messages {
            let bytes = encode_envelope(&env).expect("ids fit the wire format");
            self.trace.push(TraceEvent::Send {
                step: self.now,
                id,
                from: env.from,
                to: env.to,
                kind: env.msg.kind().to_string(),
                bytes: hex::encode(bytes),
            });
        }
        self.in_flight += 1;
        self.schedule(at, Event::Deliver { id, env });
    }

    fn apply_effects(&mut self, server: ServerId, fx: crate::server::Effects) {
        for ev in fx.events {
            let rec = match ev {
                ServerEvent::Decoded { object, tag, servers, recovery, .. } => {
                    TraceEvent::Decode { step: self.now, server, object, tag, from: servers, recovery }
                }
                ServerEvent::Violation { kind, detail } => {
                    log::warn!("step {}: s{server} {kind:?}: {detail}", self.now);
                    TraceEvent::Violation { step: self.now, server, kind, detail }
                }
            };
            self.trace.push(rec);
        }
        for env in fx.out {
            self.send(env);
        }
    }

    fn snapshot_all(&mut self) {
        for s in 0..self.servers.len() {
            if self.alive[s] {
                let srv = &self.servers[s];
                self.trace.push(TraceEvent::Snapshot {
                    step: self.now,
                    server: s,
                    bytes_symbol: srv.bytes_symbol(),
                    bytes_history: srv.bytes_history(),
                });
            }
        }
    }

    fn next_op(&mut self, client: ClientId) -> Option<NextOp> {
        let v = self.scenario.value_len;
        match &mut self.clients[client].source {
            OpSource::Script(q) => {
                let op = q.front()?;
                if op.not_before > self.now {
                    return Some((op.kind, op.object, Vec::new(), op.server, op.not_before));
                }
                let op = q.pop_front().expect("front exists");
                let value = op.value.map(String::into_bytes).unwrap_or_default();
                Some((op.kind, op.object, value, op.server, 0))
            }
            OpSource::Probe(slot) => slot.take().map(|o| (OpKind::Read, o, Vec::new(), None, 0)),
            OpSource::Random { remaining } => {
                if *remaining == 0 {
                    return None;
                }
                *remaining -= 1;
                let w = self.scenario.workload.as_ref().expect("random source has a workload");
                let write = self.rng.gen_bool(w.write_ratio);
                let object = self.object_pick.as_ref().expect("weights").sample(&mut self.rng);
                let mut value = Vec::new();
                if write {
                    value = vec![0; v];
                    self.rng.fill_bytes(&mut value);
                }
                let kind = if write { OpKind::Write } else { OpKind::Read };
                Some((kind, object, value, None, 0))
            }
        }
    }

    fn issue(&mut self, client: ClientId) {
        let Some((kind, object, value, server, not_before)) = self.next_op(client) else { return };
        if not_before > self.now {
            self.schedule_issue(client, not_before);
            return;
        }
        let target = match server {
            Some(s) => Some(s),
            None if self.scenario.switch_servers && !self.clients[client].probe => {
                Some(self.rng.gen_range(0..self.scenario.n))
            }
            None => None,
        };
        let c = &mut self.clients[client];
        if let Some(s) = target {
            c.automaton.attach(s);
        }
        let ctx = c.automaton.ctx().clone();
        let env = match kind {
            OpKind::Write => c.automaton.issue_write(object, &value),
            OpKind::Read => c.automaton.issue_read(object),
        }
        .expect("client is idle and the value was validated");
        let pending = c.automaton.pending().expect("just issued");
        self.trace.push(TraceEvent::Invoke {
            step: self.now,
            client,
            op: pending.op,
            kind,
            object,
            server: pending.server,
            value: (kind == OpKind::Write).then(|| match &env.msg {
                crate::protocol::Message::WriteReq { value, .. } => hex::encode(value),
                _ => unreachable!("write issues a WriteReq"),
            }),
            ctx,
            probe: c.probe,
        });
        self.send(env);
    }

    fn deliver(&mut self, id: u64, env: Envelope) {
        self.in_flight -= 1;
        match env.to {
            Node::Server(s) => {
                if !self.alive[s] {
                    self.trace.push(TraceEvent::Drop { step: self.now, id });
                    return;
                }
                if self.scenario.record_messages {
                    self.trace.push(TraceEvent::Deliver { step: self.now, id });
                }
                let fx = self.servers[s].handle(env);
                self.apply_effects(s, fx);
            }
            Node::Client(c) => {
                if self.scenario.record_messages {
                    self.trace.push(TraceEvent::Deliver { step: self.now, id });
                }
                let Node::Server(server) = env.from else { return };
                let sc = &mut self.clients[c];
                let done = match sc.automaton.on_response(env.msg) {
                    Ok(done) => done,
                    Err(e) => {
                        debug!("client {c}: {e}");
                        return;
                    }
                };
                let probe = sc.probe;
                self.trace.push(TraceEvent::Respond {
                    step: self.now,
                    client: c,
                    op: done.op,
                    kind: done.kind,
                    object: done.object,
                    server,
                    tag: done.tag,
                    value: done.value.as_ref().map(hex::encode),
                    deps: (done.kind == OpKind::Read).then_some(done.deps),
                    ctx: done.ctx_after,
                    probe,
                });
                let pause = self.rng.gen_range(0..=self.scenario.think_time);
                self.schedule_issue(c, self.now + pause);
            }
        }
    }

    fn on_timer(&mut self, server: ServerId, kind: TimerKind) {
        if !self.alive[server] {
            return;
        }
        let t = self.scenario.timers;
        let alive = self.alive.clone();
        let period = match kind {
            TimerKind::Encode => {
                let fx = self.servers[server].internal_encode(&alive);
                self.apply_effects(server, fx);
                t.encode
            }
            TimerKind::Gossip => {
                let fx = self.servers[server].internal_gossip();
                self.apply_effects(server, fx);
                t.gossip
            }
            TimerKind::Gc => {
                self.servers[server].garbage_collect(&alive);
                t.gc
            }
        };
        self.schedule(self.now + period, Event::Timer { server, kind });
    }

    fn crash(&mut self, server: ServerId) {
        self.pending_crashes -= 1;
        if !self.alive[server] {
            return;
        }
        info!("step {}: crash s{server}", self.now);
        self.alive[server] = false;
        self.servers[server].halt();
        let alive = self.alive.clone();
        for s in &mut self.servers {
            s.observe_membership(&alive);
        }
        self.trace.push(TraceEvent::Crash { step: self.now, server });
    }

    /// True when nothing is in flight, no client or crash event is pending,
    /// no live server has work left, and every live server knows the encoded
    /// tags of every other live server.
    pub fn detect_quiescence(&self) -> bool {
        if self.in_flight > 0 || self.pending_issues > 0 || self.pending_crashes > 0 {
            return false;
        }
        let live: Vec<&Server> = self.servers.iter().filter(|s| !s.is_halted()).collect();
        if live.iter().any(|s| s.has_local_work()) {
            return false;
        }
        live.iter().all(|a| live.iter().all(|b| a.id() == b.id() || a.view_of(b.id()) == b.symbol().encoded_tags))
    }

    fn start_probes(&mut self) {
        self.probing = true;
        for s in 0..self.scenario.n {
            if !self.alive[s] {
                continue;
            }
            for o in 0..self.scenario.k {
                let id = self.clients.len();
                self.clients.push(SimClient {
                    automaton: Client::new(id, s, self.scenario.value_len),
                    source: OpSource::Probe(Some(o)),
                    probe: true,
                });
                self.schedule_issue(id, self.now);
            }
        }
    }

    pub fn run(mut self) -> RunOutcome {
        let status = loop {
            let Some(((at, _), ev)) = self.queue.pop_first() else {
                // timers never run out while a server is alive
                break RunStatus::Quiescent;
            };
            if at > self.scenario.step_limit {
                self.now = self.scenario.step_limit;
                self.trace.push(TraceEvent::StepLimit { step: self.now });
                break RunStatus::StepLimit;
            }
            self.now = at;
            match ev {
                Event::Deliver { id, env } => self.deliver(id, env),
                Event::Timer { server, kind } => self.on_timer(server, kind),
                Event::Snapshot => {
                    self.snapshot_all();
                    self.schedule(self.now + self.scenario.timers.snapshot, Event::Snapshot);
                }
                Event::Issue { client } => {
                    self.pending_issues -= 1;
                    self.issue(client);
                }
                Event::Crash { server } => self.crash(server),
            }
            if self.detect_quiescence() {
                let phase = if self.probing { Phase::Probes } else { Phase::Workload };
                self.trace.push(TraceEvent::Quiescent { step: self.now, phase });
                self.snapshot_all();
                if self.probing || !self.scenario.probes {
                    break RunStatus::Quiescent;
                }
                self.start_probes();
            }
        };
        info!("seed {}: {:?} at step {}", self.scenario.seed, status, self.now);
        RunOutcome {
            status,
            final_step: self.now,
            server_stats: self.servers.iter().map(|s| s.stats().clone()).collect(),
            trace: self.trace,
        }
    }

    pub fn codebook(&self) -> &Codebook {
        &self.book
    }
}

/// Validates and runs a scenario.
pub fn run(scenario: &Scenario) -> Result<RunOutcome, ScenarioError> {
    Ok(Simulation::new(scenario)?.run())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script_op(client: ClientId, kind: OpKind, object: ObjectId, value: Option<&str>) -> ScriptOp {
        ScriptOp { client, kind, object, value: value.map(str::to_string), server: None, not_before: 0 }
    }

    #[test]
    fn parses_minimal_scenario_with_defaults() {
        let sc = Scenario::from_json(r#"{"n":4,"k":2,"value_len":8}"#).unwrap();
        assert_eq!(sc.clients, 1);
        assert_eq!(sc.delay, DelayBounds { min: 1, max: 10 });
        assert!(sc.probes && !sc.fifo);
        assert!(Scenario::from_json(r#"{"n":4,"k":2,"value_len":8,"typo":1}"#).is_err());
    }

    #[test]
    fn validation_rejects_bad_scenarios() {
        let mut sc = Scenario::new(2, 3, 4);
        assert!(matches!(sc.validate(), Err(ScenarioError::Code(_))));
        sc = Scenario::new(4, 2, 4);
        sc.crashes = vec![CrashSpec { server: 1, step: 5 }];
        assert!(matches!(sc.validate(), Err(ScenarioError::TooManyCrashes { crashes: 1, f: 0 })));
        sc.f = 1;
        sc.validate().unwrap();
        sc.script = vec![script_op(3, OpKind::Read, 0, None)];
        assert!(matches!(sc.validate(), Err(ScenarioError::BadScript { index: 0, .. })));
        sc.script = vec![script_op(0, OpKind::Write, 0, Some("too long"))];
        assert!(matches!(sc.validate(), Err(ScenarioError::BadScript { .. })));
        sc.script.clear();
        sc.delay = DelayBounds { min: 5, max: 1 };
        assert!(matches!(sc.validate(), Err(ScenarioError::BadDelay { .. })));
    }

    #[test]
    fn inject_crash_respects_f() {
        let mut sc = Scenario::new(4, 2, 4);
        sc.f = 1;
        let mut sim = Simulation::new(&sc).unwrap();
        sim.inject_crash(2, 10).unwrap();
        assert!(matches!(sim.inject_crash(3, 10), Err(ScenarioError::TooManyCrashes { .. })));
    }

    #[test]
    fn empty_system_is_quiescent_after_gossip() {
        let mut sc = Scenario::new(3, 2, 2);
        sc.probes = false;
        let sim = Simulation::new(&sc).unwrap();
        // nobody has announced its encoded tags yet
        assert!(!sim.detect_quiescence());
        let out = sim.run();
        assert_eq!(out.status, RunStatus::Quiescent);
    }

    #[test]
    fn zero_delay_single_writer_reads_its_value() {
        let mut sc = Scenario::new(4, 2, 4);
        sc.delay = DelayBounds { min: 0, max: 0 };
        sc.script = vec![
            script_op(0, OpKind::Write, 1, Some("abcd")),
            script_op(0, OpKind::Read, 1, None),
            script_op(0, OpKind::Read, 0, None),
        ];
        let out = run(&sc).unwrap();
        assert_eq!(out.status, RunStatus::Quiescent);
        let reads: Vec<_> = out
            .trace
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Respond { kind: OpKind::Read, object, value, probe, .. } => {
                    Some((*object, value.clone().unwrap(), *probe))
                }
                _ => None,
            })
            .collect();
        assert_eq!(reads[0], (1, hex::encode("abcd"), false));
        assert_eq!(reads[1], (0, "00000000".to_string(), false));
        // every probe of o1 sees the write
        assert!(reads.iter().filter(|r| r.2 && r.0 == 1).all(|r| r.1 == hex::encode("abcd")));
        assert_eq!(reads.iter().filter(|r| r.2).count(), 4 * 2);
    }

    #[test]
    fn step_limit_is_reported() {
        let mut sc = Scenario::new(4, 2, 4);
        sc.workload = Some(Workload { ops_per_client: 50, write_ratio: 0.5, skew: 0.0 });
        sc.step_limit = 20;
        let out = run(&sc).unwrap();
        assert_eq!(out.status, RunStatus::StepLimit);
        assert!(matches!(out.trace.events.last(), Some(TraceEvent::StepLimit { step: 20 })));
    }

    #[test]
    fn same_seed_same_trace() {
        let mut sc = Scenario::new(5, 3, 8);
        sc.clients = 3;
        sc.workload = Some(Workload { ops_per_client: 30, write_ratio: 0.5, skew: 1.0 });
        sc.seed = 11;
        let a = run(&sc).unwrap().trace.to_jsonl();
        let b = run(&sc).unwrap().trace.to_jsonl();
        assert_eq!(a, b);
        sc.seed = 12;
        assert_ne!(a, run(&sc).unwrap().trace.to_jsonl());
    }
}

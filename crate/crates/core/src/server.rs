//! The storage server automaton.
//!
//! A server holds one codeword symbol of the cross-object code plus a history
//! list of object versions it has applied but not yet garbage collected.
//! Writes are accepted and acknowledged locally, then propagated to every
//! other server. Reads are served from local data when the server stores the
//! object verbatim or still has a recent enough version in its history;
//! otherwise the server gathers symbols from its peers and decodes.
//!
//! Encoding folds applied versions into the stored symbol. A parity server
//! updates incrementally, which needs the plain value of the version it
//! currently encodes. Garbage collection keeps that value available: either
//! the systematic server of the object still holds it (and hands it over with
//! a `Displaced` message when it moves on), or, if that server has crashed,
//! the parity server recovers the value by decoding it from its peers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use log::trace;
use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode_symbol, Codebook, CodecError};
use crate::gf256::mul_add_into;
use crate::protocol::{
    ctx_satisfied, ClientId, CodewordSymbol, DependencyContext, Envelope, HistoryEntry, Message, Node, ObjectId,
    ReadId, ReadTarget, ServerId, Tag,
};

/// Runtime assertion failures. Any of these indicates a protocol bug.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    /// A locally served read did not return the highest admissible local version.
    HighestTagRead,
    /// Decode was attempted on symbols whose encoded versions disagree.
    DecodeTagMismatch,
    /// The decoder rejected a set that was expected to be a recovery set.
    DecodeFailed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ServerEvent {
    Decoded { read_id: ReadId, object: ObjectId, tag: Tag, servers: Vec<ServerId>, recovery: bool },
    Violation { kind: ViolationKind, detail: String },
}

/// Messages to send and observations to record, produced by one transition.
#[derive(Debug, Default)]
pub struct Effects {
    pub out: Vec<Envelope>,
    pub events: Vec<ServerEvent>,
}

impl Effects {
    fn extend(&mut self, other: Effects) {
        self.out.extend(other.out);
        self.events.extend(other.events);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadOrigin {
    Client {
        client: ClientId,
        op: u64,
    },
    /// Recovery of the plain value this server needs to re-encode.
    Recovery,
}

/// A read waiting for symbols from other servers (an entry of the ReadL).
#[derive(Clone, Debug)]
pub struct PendingRead {
    pub read_id: ReadId,
    pub object: ObjectId,
    pub origin: ReadOrigin,
    pub want: ReadTarget,
    pub collected: BTreeMap<ServerId, CodewordSymbol>,
    pub plain: BTreeMap<Tag, HistoryEntry>,
}

#[derive(Clone, Debug)]
struct BlockedRead {
    client: ClientId,
    op: u64,
    object: ObjectId,
    ctx: DependencyContext,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub writes: u64,
    pub local_reads: u64,
    pub remote_reads: u64,
    pub decodes: u64,
    pub recoveries: u64,
    pub encodes: u64,
    pub gc_dropped: u64,
}

#[derive(Clone, Debug)]
pub struct Server {
    id: ServerId,
    book: Arc<Codebook>,
    symbol: CodewordSymbol,
    history: Vec<BTreeMap<Tag, HistoryEntry>>,
    applied: Vec<Tag>,
    parked: BTreeMap<(ObjectId, Tag), HistoryEntry>,
    blocked: Vec<BlockedRead>,
    read_list: BTreeMap<ReadId, PendingRead>,
    watchers: BTreeMap<(ServerId, ReadId), (ObjectId, ReadTarget)>,
    encoded_up_to: Vec<Vec<Tag>>,
    last_gossiped: Option<Vec<Tag>>,
    alive: Vec<bool>,
    issued_seq: Vec<u64>,
    next_read: u64,
    halted: bool,
    stats: ServerStats,
}

impl Server {
    /// Initial state: the symbol encodes the initial values, all at [`Tag::INITIAL`].
    pub fn init(id: ServerId, book: Arc<Codebook>, initial: &[Vec<u8>]) -> Result<Server, CodecError> {
        let spec = book.spec();
        let (n, k) = (spec.n(), spec.k());
        if id >= n {
            return Err(CodecError::OutOfRange { index: id, limit: n });
        }
        let refs: Vec<&[u8]> = initial.iter().map(Vec::as_slice).collect();
        let payload = encode_symbol(spec, id, &refs)?;
        let tags = vec![Tag::INITIAL; k];
        let deps = (0..k).filter(|&o| spec.supports(id, o)).map(|o| (o, Tag::INITIAL)).collect();
        Ok(Server {
            id,
            symbol: CodewordSymbol { server: id, payload, encoded_tags: tags.clone(), deps },
            history: vec![BTreeMap::new(); k],
            applied: tags.clone(),
            parked: BTreeMap::new(),
            blocked: Vec::new(),
            read_list: BTreeMap::new(),
            watchers: BTreeMap::new(),
            encoded_up_to: vec![tags; n],
            last_gossiped: None,
            alive: vec![true; n],
            issued_seq: vec![0; k],
            next_read: 0,
            halted: false,
            stats: ServerStats::default(),
            book,
        })
    }

    pub fn id(&self) -> ServerId {
        self.id
    }

    pub fn symbol(&self) -> &CodewordSymbol {
        &self.symbol
    }

    pub fn applied(&self) -> &[Tag] {
        &self.applied
    }

    pub fn history(&self, object: ObjectId) -> impl Iterator<Item = &HistoryEntry> {
        self.history[object].values()
    }

    pub fn read_list(&self) -> &BTreeMap<ReadId, PendingRead> {
        &self.read_list
    }

    pub fn view_of(&self, server: ServerId) -> &[Tag] {
        if server == self.id {
            &self.symbol.encoded_tags
        } else {
            &self.encoded_up_to[server]
        }
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Crash-stop: the server never takes another step.
    pub fn halt(&mut self) {
        self.halted = true;
    }

    /// Failure-detector input: which servers are still up.
    pub fn observe_membership(&mut self, alive: &[bool]) {
        self.alive.copy_from_slice(alive);
    }

    pub fn bytes_symbol(&self) -> usize {
        self.symbol.payload.len()
    }

    /// Bytes of buffered object versions, including writes parked on dependencies.
    pub fn bytes_history(&self) -> usize {
        let h: usize = self.history.iter().flat_map(|m| m.values()).map(|e| e.value.len()).sum();
        h + self.parked.values().map(|e| e.value.len()).sum::<usize>()
    }

    fn k(&self) -> usize {
        self.book.spec().k()
    }

    fn is_systematic_for(&self, object: ObjectId) -> bool {
        self.book.systematic_server(object) == Some(self.id)
    }

    fn broadcast(&self, msg: Message) -> Vec<Envelope> {
        (0..self.book.spec().n())
            .filter(|&s| s != self.id)
            .map(|s| Envelope { from: Node::Server(self.id), to: Node::Server(s), msg: msg.clone() })
            .collect()
    }

    fn to_server(&self, s: ServerId, msg: Message) -> Envelope {
        Envelope { from: Node::Server(self.id), to: Node::Server(s), msg }
    }

    fn to_client(&self, c: ClientId, msg: Message) -> Envelope {
        Envelope { from: Node::Server(self.id), to: Node::Client(c), msg }
    }

    /// Dispatches one delivered envelope.
    pub fn handle(&mut self, env: Envelope) -> Effects {
        if self.halted {
            return Effects::default();
        }
        let from = env.from;
        match (from, env.msg) {
            (Node::Client(c), Message::WriteReq { op, object, value, ctx }) => {
                self.on_client_write(c, op, object, value, ctx)
            }
            (Node::Client(c), Message::ReadReq { op, object, ctx }) => self.on_client_read(c, op, object, ctx),
            (Node::Server(_), Message::Propagate(entry)) => self.on_propagate(entry),
            (Node::Server(s), Message::ReadHelpReq { read_id, object, want }) => {
                self.on_read_help_req(s, read_id, object, want)
            }
            (Node::Server(s), Message::ReadHelpResp { read_id, symbol, plain }) => {
                self.on_read_help_resp(s, read_id, symbol, plain)
            }
            (Node::Server(s), Message::ReadHelpDone { read_id }) => {
                self.watchers.remove(&(s, read_id));
                Effects::default()
            }
            (Node::Server(_), Message::EncodedUpTo { server, tags }) => {
                self.merge_view(server, &tags);
                Effects::default()
            }
            (Node::Server(s), Message::Displaced { entry, encoded }) => self.on_displaced(s, entry, encoded),
            (from, msg) => {
                trace!("s{} ignoring {} from {:?}", self.id, msg.kind(), from);
                Effects::default()
            }
        }
    }

    // ---- input actions from clients -------------------------------------

    /// Accepts a write locally: assigns a fresh tag, acknowledges in the same
    /// step and propagates the version to every other server.
    pub fn on_client_write(
        &mut self,
        client: ClientId,
        op: u64,
        object: ObjectId,
        value: Vec<u8>,
        ctx: DependencyContext,
    ) -> Effects {
        let mut fx = Effects::default();
        if self.halted || object >= self.k() {
            return fx;
        }
        let seq = self.issued_seq[object].max(self.applied[object].seq).max(ctx.get(object).map_or(0, |t| t.seq)) + 1;
        self.issued_seq[object] = seq;
        let tag = Tag::new(seq, self.id);
        let entry = HistoryEntry { object, tag, value, deps: ctx };
        self.stats.writes += 1;
        fx.out.push(self.to_client(client, Message::WriteAck { op, object, tag }));
        fx.out.extend(self.broadcast(Message::Propagate(entry.clone())));
        fx.extend(self.deliver_entry(entry));
        fx
    }

    /// Serves a read locally when possible; otherwise registers a pending
    /// read and asks every other server for its symbol.
    pub fn on_client_read(&mut self, client: ClientId, op: u64, object: ObjectId, ctx: DependencyContext) -> Effects {
        if self.halted || object >= self.k() {
            return Effects::default();
        }
        if !ctx_satisfied(&ctx, &self.applied) {
            self.blocked.push(BlockedRead { client, op, object, ctx });
            return Effects::default();
        }
        self.serve_read(client, op, object, &ctx)
    }

    /// Local candidates for `object`: history versions and, on the systematic
    /// server, the stored symbol itself. Each comes with its dependencies.
    fn local_candidates(&self, object: ObjectId) -> Vec<(Tag, &[u8], DependencyContext)> {
        let mut out: Vec<(Tag, &[u8], DependencyContext)> = self.history[object]
            .values()
            .map(|e| {
                let mut deps = e.deps.clone();
                deps.observe(object, e.tag);
                (e.tag, e.value.as_slice(), deps)
            })
            .collect();
        if self.is_systematic_for(object) {
            out.push((self.symbol.encoded_tags[object], self.symbol.payload.as_slice(), self.symbol.deps.clone()));
        }
        out
    }

    fn serve_read(&mut self, client: ClientId, op: u64, object: ObjectId, ctx: &DependencyContext) -> Effects {
        let mut fx = Effects::default();
        let floor = self.applied[object];
        let candidates = self.local_candidates(object);
        let best = candidates.iter().max_by_key(|c| c.0);
        if let Some((tag, value, deps)) = best.filter(|c| c.0 >= floor) {
            let (tag, value, deps) = (*tag, value.to_vec(), deps.clone());
            // highest admissible local version, re-derived independently of max_by_key
            let admissible_max = candidates
                .iter()
                .filter(|c| ctx.get(object).is_none_or(|need| c.0 >= need))
                .map(|c| c.0)
                .fold(None, |acc: Option<Tag>, t| Some(acc.map_or(t, |a| if t > a { t } else { a })));
            if admissible_max != Some(tag) {
                fx.events.push(ServerEvent::Violation {
                    kind: ViolationKind::HighestTagRead,
                    detail: format!("s{} read o{object}: returned {tag:?}, admissible max {admissible_max:?}", self.id),
                });
            }
            self.stats.local_reads += 1;
            fx.out.push(self.to_client(client, Message::ReadResp { op, object, tag, value, deps }));
            return fx;
        }
        self.stats.remote_reads += 1;
        fx.extend(self.start_remote_read(object, ReadOrigin::Client { client, op }, ReadTarget::AtLeast(floor)));
        fx
    }

    fn start_remote_read(&mut self, object: ObjectId, origin: ReadOrigin, want: ReadTarget) -> Effects {
        let read_id = ReadId { origin: self.id, seq: self.next_read };
        self.next_read += 1;
        let mut collected = BTreeMap::new();
        collected.insert(self.id, self.symbol.clone());
        self.read_list
            .insert(read_id, PendingRead { read_id, object, origin, want, collected, plain: BTreeMap::new() });
        let mut fx = Effects { out: self.broadcast(Message::ReadHelpReq { read_id, object, want }), events: vec![] };
        fx.extend(self.try_complete(read_id));
        fx
    }

    // ---- input actions from other servers -------------------------------

    /// Applies a propagated write once its dependencies are applied, parking
    /// it until then. Duplicates leave the state unchanged.
    pub fn on_propagate(&mut self, entry: HistoryEntry) -> Effects {
        if self.halted || entry.object >= self.k() {
            return Effects::default();
        }
        self.deliver_entry(entry)
    }

    fn deliver_entry(&mut self, entry: HistoryEntry) -> Effects {
        let key = (entry.object, entry.tag);
        if self.history[entry.object].contains_key(&entry.tag) || self.parked.contains_key(&key) {
            return Effects::default();
        }
        if entry.tag <= self.applied[entry.object] && self.droppable(entry.object, entry.tag) {
            return Effects::default();
        }
        if !ctx_satisfied(&entry.deps, &self.applied) {
            self.parked.insert(key, entry);
            return Effects::default();
        }
        let mut touched = BTreeSet::new();
        self.apply(entry, &mut touched);
        loop {
            let ready: Vec<(ObjectId, Tag)> =
                self.parked.iter().filter(|(_, e)| ctx_satisfied(&e.deps, &self.applied)).map(|(k, _)| *k).collect();
            if ready.is_empty() {
                break;
            }
            for key in ready {
                let e = self.parked.remove(&key).expect("parked entry");
                self.apply(e, &mut touched);
            }
        }
        let mut fx = self.release_blocked_reads();
        for object in touched {
            fx.extend(self.retry_reads_for(object));
        }
        fx
    }

    fn apply(&mut self, entry: HistoryEntry, touched: &mut BTreeSet<ObjectId>) {
        let o = entry.object;
        if entry.tag > self.applied[o] {
            self.applied[o] = entry.tag;
        }
        touched.insert(o);
        self.history[o].insert(entry.tag, entry);
    }

    fn release_blocked_reads(&mut self) -> Effects {
        let mut fx = Effects::default();
        let (ready, waiting): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.blocked).into_iter().partition(|b| ctx_satisfied(&b.ctx, &self.applied));
        self.blocked = waiting;
        for b in ready {
            fx.extend(self.serve_read(b.client, b.op, b.object, &b.ctx));
        }
        fx
    }

    /// Re-examines pending reads of `object` after local state changed.
    fn retry_reads_for(&mut self, object: ObjectId) -> Effects {
        let ids: Vec<ReadId> = self.read_list.values().filter(|r| r.object == object).map(|r| r.read_id).collect();
        let mut fx = Effects::default();
        for id in ids {
            fx.extend(self.try_complete(id));
        }
        fx
    }

    /// Versions of `object` that can satisfy `want`, as a responder sees them.
    fn plain_matches(&self, object: ObjectId, want: ReadTarget) -> Vec<HistoryEntry> {
        let mut cands: Vec<HistoryEntry> =
            self.history[object].values().filter(|e| want.accepts(e.tag)).cloned().collect();
        if self.is_systematic_for(object) && want.accepts(self.symbol.encoded_tags[object]) {
            let tag = self.symbol.encoded_tags[object];
            if !cands.iter().any(|e| e.tag == tag) {
                cands.push(HistoryEntry {
                    object,
                    tag,
                    value: self.symbol.payload.clone(),
                    deps: self.symbol.deps.clone(),
                });
            }
        }
        match want {
            ReadTarget::AtLeast(_) => cands.into_iter().max_by_key(|e| e.tag).into_iter().collect(),
            ReadTarget::Exact(_) => cands,
        }
    }

    /// Replies with the current symbol plus any plain version that satisfies
    /// the request, and remembers the request so that a later re-encode
    /// triggers a fresh reply.
    pub fn on_read_help_req(
        &mut self,
        requester: ServerId,
        read_id: ReadId,
        object: ObjectId,
        want: ReadTarget,
    ) -> Effects {
        if self.halted || object >= self.k() {
            return Effects::default();
        }
        self.watchers.insert((requester, read_id), (object, want));
        let plain = self.plain_matches(object, want);
        let msg = Message::ReadHelpResp { read_id, symbol: self.symbol.clone(), plain };
        Effects { out: vec![self.to_server(requester, msg)], events: vec![] }
    }

    pub fn on_read_help_resp(
        &mut self,
        from: ServerId,
        read_id: ReadId,
        symbol: CodewordSymbol,
        plain: Vec<HistoryEntry>,
    ) -> Effects {
        if self.halted {
            return Effects::default();
        }
        let Some(pr) = self.read_list.get_mut(&read_id) else {
            return Effects::default();
        };
        pr.collected.insert(from, symbol);
        for e in plain {
            if e.object == pr.object && pr.want.accepts(e.tag) {
                pr.plain.insert(e.tag, e);
            }
        }
        self.try_complete(read_id)
    }

    /// Completes a pending read if (a) some plain version satisfies it, or
    /// (b) the collected symbols contain a recovery set whose members agree
    /// on the version of every object they encode.
    fn try_complete(&mut self, read_id: ReadId) -> Effects {
        let mut fx = Effects::default();
        let Some(pr) = self.read_list.get(&read_id) else { return fx };
        let object = pr.object;

        // local history may have caught up since the read was registered
        let local = self.history[object].values().filter(|e| pr.want.accepts(e.tag)).max_by_key(|e| e.tag).cloned();
        let plain = pr.plain.values().filter(|e| pr.want.accepts(e.tag)).max_by_key(|e| e.tag).cloned();
        let best_plain = match (local, plain) {
            (Some(a), Some(b)) => Some(if a.tag >= b.tag { a } else { b }),
            (a, b) => a.or(b),
        };

        let result = if let Some(e) = best_plain {
            let mut deps = e.deps.clone();
            deps.observe(object, e.tag);
            Some((e.tag, e.value, deps, None))
        } else {
            match self.find_decodable(pr) {
                Some((tag, servers)) => {
                    let symbols: Vec<&CodewordSymbol> = servers.iter().map(|s| &pr.collected[s]).collect();
                    if let Err(detail) = tags_agree(&self.book, &symbols) {
                        fx.events.push(ServerEvent::Violation { kind: ViolationKind::DecodeTagMismatch, detail });
                        return fx;
                    }
                    let payloads: BTreeMap<usize, Vec<u8>> =
                        servers.iter().map(|s| (*s, pr.collected[s].payload.clone())).collect();
                    match decode(self.book.spec(), object, &payloads) {
                        Ok(value) => {
                            let mut deps = DependencyContext::new();
                            for s in &symbols {
                                deps.merge_from(&s.deps);
                            }
                            deps.observe(object, tag);
                            Some((tag, value, deps, Some(servers)))
                        }
                        Err(e) => {
                            fx.events.push(ServerEvent::Violation {
                                kind: ViolationKind::DecodeFailed,
                                detail: format!("s{} {read_id:?}: {e}", self.id),
                            });
                            return fx;
                        }
                    }
                }
                None => None,
            }
        };

        let Some((tag, value, deps, decoded_from)) = result else { return fx };
        let pr = self.read_list.remove(&read_id).expect("pending read");
        if let Some(servers) = decoded_from {
            self.stats.decodes += 1;
            fx.events.push(ServerEvent::Decoded {
                read_id,
                object,
                tag,
                servers,
                recovery: pr.origin == ReadOrigin::Recovery,
            });
        }
        fx.out.extend(self.broadcast(Message::ReadHelpDone { read_id }));
        match pr.origin {
            ReadOrigin::Client { client, op } => {
                fx.out.push(self.to_client(client, Message::ReadResp { op, object, tag, value, deps }));
            }
            ReadOrigin::Recovery => {
                self.stats.recoveries += 1;
                if self.symbol.encoded_tags[object] == tag && !self.history[object].contains_key(&tag) {
                    self.history[object].insert(tag, HistoryEntry { object, tag, value, deps });
                }
            }
        }
        fx
    }

    /// Best recovery set among the collected symbols: members must agree on
    /// every object they encode, and the agreed version of the target object
    /// must satisfy the read. Returns that version and the member servers.
    fn find_decodable(&self, pr: &PendingRead) -> Option<(Tag, Vec<ServerId>)> {
        let spec = self.book.spec();
        let sys = self.book.systematic_server(pr.object);
        let mut best: Option<(Tag, Vec<ServerId>)> = None;
        for rs in self.book.recovery_sets(pr.object) {
            // the systematic server's symbol arrives as a plain value instead
            if rs.servers.len() == 1 && rs.servers.first().copied() == sys {
                continue;
            }
            if !rs.servers.iter().all(|s| pr.collected.contains_key(s)) {
                continue;
            }
            let symbols: Vec<&CodewordSymbol> = rs.servers.iter().map(|s| &pr.collected[s]).collect();
            let Some(agreed) = agreed_tags(&self.book, &symbols) else { continue };
            let Some(tag) = agreed[pr.object] else { continue };
            if !pr.want.accepts(tag) {
                continue;
            }
            if best.as_ref().is_none_or(|(b, _)| tag > *b) {
                best = Some((tag, rs.servers.iter().copied().collect()));
            }
        }
        debug_assert!(best.as_ref().is_none_or(|(_, s)| crate::codec::can_decode(spec, pr.object, s)));
        best
    }

    /// A systematic server moved past `entry.tag`. Parity servers still
    /// encoding that version take the plain value back into their history.
    pub fn on_displaced(&mut self, from: ServerId, entry: HistoryEntry, encoded: Vec<Tag>) -> Effects {
        if self.halted || entry.object >= self.k() {
            return Effects::default();
        }
        self.merge_view(from, &encoded);
        let o = entry.object;
        let needed = self.book.spec().supports(self.id, o)
            && !self.is_systematic_for(o)
            && self.symbol.encoded_tags[o] == entry.tag
            && !self.history[o].contains_key(&entry.tag);
        if needed {
            self.history[o].insert(entry.tag, entry);
            return self.retry_reads_for(o);
        }
        Effects::default()
    }

    fn merge_view(&mut self, server: ServerId, tags: &[Tag]) {
        if server == self.id || server >= self.encoded_up_to.len() {
            return;
        }
        for (mine, theirs) in self.encoded_up_to[server].iter_mut().zip(tags) {
            if theirs > mine {
                *mine = *theirs;
            }
        }
    }

    // ---- internal actions -----------------------------------------------

    /// Folds newly applied versions into the stored symbol, one object at a
    /// time. A parity server whose old plain value is gone waits for the
    /// systematic server to hand it over, or recovers it by decoding when
    /// that server is down.
    pub fn internal_encode(&mut self, alive: &[bool]) -> Effects {
        let mut fx = Effects::default();
        if self.halted {
            return fx;
        }
        self.observe_membership(alive);
        let book = Arc::clone(&self.book);
        let spec = book.spec();
        let mut support_changed = false;
        let mut displaced = Vec::new();
        for x in 0..spec.k() {
            let cur = self.symbol.encoded_tags[x];
            let target = self.applied[x];
            if !spec.supports(self.id, x) {
                self.symbol.encoded_tags[x] = target;
                continue;
            }
            if target == cur {
                continue;
            }
            let Some(new) = self.history[x].get(&target).cloned() else {
                // applied versions stay in history until this server encodes them
                debug_assert!(false, "s{} lost applied version {target:?} of o{x}", self.id);
                continue;
            };
            if self.is_systematic_for(x) {
                let old_payload = std::mem::replace(&mut self.symbol.payload, new.value.clone());
                displaced.push(HistoryEntry {
                    object: x,
                    tag: cur,
                    value: old_payload,
                    deps: self.symbol.deps.clone(),
                });
            } else if let Some(old) = self.history[x].get(&cur) {
                let delta: Vec<u8> = old.value.iter().zip(&new.value).map(|(a, b)| a ^ b).collect();
                mul_add_into(&mut self.symbol.payload, spec.coefficient(self.id, x), &delta);
            } else {
                let holder = self.book.systematic_server(x);
                let holder_up = holder.is_some_and(|j| self.alive[j]);
                let recovering = self
                    .read_list
                    .values()
                    .any(|r| r.origin == ReadOrigin::Recovery && r.object == x && r.want == ReadTarget::Exact(cur));
                if !holder_up && !recovering {
                    fx.extend(self.start_remote_read(x, ReadOrigin::Recovery, ReadTarget::Exact(cur)));
                }
                continue;
            }
            self.symbol.encoded_tags[x] = target;
            self.symbol.deps.merge_from(&new.deps);
            self.symbol.deps.observe(x, target);
            support_changed = true;
        }
        if support_changed {
            self.stats.encodes += 1;
            let encoded = self.symbol.encoded_tags.clone();
            for entry in displaced {
                fx.out.extend(self.broadcast(Message::Displaced { entry, encoded: encoded.clone() }));
            }
            fx.extend(self.refresh_reads());
        }
        fx
    }

    /// After the symbol changed: answer every watched request again and let
    /// this server's own pending reads see the new symbol.
    fn refresh_reads(&mut self) -> Effects {
        let mut fx = Effects::default();
        let watchers: Vec<_> = self.watchers.iter().map(|(k, v)| (*k, *v)).collect();
        for ((requester, read_id), (object, want)) in watchers {
            let plain = self.plain_matches(object, want);
            let msg = Message::ReadHelpResp { read_id, symbol: self.symbol.clone(), plain };
            fx.out.push(self.to_server(requester, msg));
        }
        let ids: Vec<ReadId> = self.read_list.keys().copied().collect();
        for id in ids {
            if let Some(pr) = self.read_list.get_mut(&id) {
                pr.collected.insert(self.id, self.symbol.clone());
            }
            fx.extend(self.try_complete(id));
        }
        fx
    }

    /// Announces this server's encoded tag tuple when it changed since the
    /// last announcement (and once at start).
    pub fn internal_gossip(&mut self) -> Effects {
        if self.halted || self.last_gossiped.as_ref() == Some(&self.symbol.encoded_tags) {
            return Effects::default();
        }
        let tags = self.symbol.encoded_tags.clone();
        self.last_gossiped = Some(tags.clone());
        Effects { out: self.broadcast(Message::EncodedUpTo { server: self.id, tags }), events: vec![] }
    }

    /// Whether version `tag` of `object` is no longer needed anywhere: every
    /// live server encoding the object is at or past it, and any server still
    /// exactly at it can obtain the plain value from the live systematic
    /// server (or will recover it by decoding if that server is down).
    pub fn droppable(&self, object: ObjectId, tag: Tag) -> bool {
        let spec = self.book.spec();
        let views: Vec<(ServerId, Tag)> = (0..spec.n())
            .filter(|&s| spec.supports(s, object) && (s == self.id || self.alive[s]))
            .map(|s| (s, self.view_of(s)[object]))
            .collect();
        if views.is_empty() || views.iter().any(|(_, t)| *t < tag) {
            return false;
        }
        if views.iter().all(|(_, t)| *t > tag) {
            return true;
        }
        match self.book.systematic_server(object) {
            Some(j) if j == self.id || self.alive[j] => self.view_of(j)[object] == tag,
            _ => true,
        }
    }

    /// Drops every history version that [`Server::droppable`] allows. The
    /// stored symbol is never dropped.
    pub fn garbage_collect(&mut self, alive: &[bool]) {
        if self.halted {
            return;
        }
        self.observe_membership(alive);
        for o in 0..self.k() {
            let drop: Vec<Tag> = self.history[o].keys().copied().filter(|t| self.droppable(o, *t)).collect();
            for t in drop {
                self.history[o].remove(&t);
                self.stats.gc_dropped += 1;
            }
        }
    }

    // ---- quiescence support ---------------------------------------------

    /// True if an encode or garbage-collection step would change this
    /// server's state, or it is holding work that waits on dependencies.
    pub fn has_local_work(&self) -> bool {
        if self.halted {
            return false;
        }
        if !self.parked.is_empty() || !self.blocked.is_empty() {
            return true;
        }
        let spec = self.book.spec();
        for x in 0..spec.k() {
            let cur = self.symbol.encoded_tags[x];
            let target = self.applied[x];
            if target == cur {
                continue;
            }
            if !spec.supports(self.id, x) || self.is_systematic_for(x) || self.history[x].contains_key(&cur) {
                return true;
            }
            let holder_up = self.book.systematic_server(x).is_some_and(|j| self.alive[j]);
            let recovering = self.read_list.values().any(|r| r.origin == ReadOrigin::Recovery && r.object == x);
            if !holder_up && !recovering {
                return true;
            }
        }
        (0..spec.k()).any(|o| self.history[o].keys().any(|t| self.droppable(o, *t)))
            || self.last_gossiped.as_ref() != Some(&self.symbol.encoded_tags)
    }
}

/// Per object, the version agreed on by every symbol that encodes it; `None`
/// if some pair disagrees.
fn agreed_tags(book: &Codebook, symbols: &[&CodewordSymbol]) -> Option<Vec<Option<Tag>>> {
    let spec = book.spec();
    let mut agreed: Vec<Option<Tag>> = vec![None; spec.k()];
    for s in symbols {
        for (x, slot) in agreed.iter_mut().enumerate() {
            if !spec.supports(s.server, x) {
                continue;
            }
            let t = s.encoded_tags[x];
            match slot {
                None => *slot = Some(t),
                Some(prev) if *prev != t => return None,
                _ => {}
            }
        }
    }
    Some(agreed)
}

/// Pre-decode check: symbols that encode the same object encode the same
/// version of it.
pub fn tags_agree(book: &Codebook, symbols: &[&CodewordSymbol]) -> Result<(), String> {
    let spec = book.spec();
    for (i, a) in symbols.iter().enumerate() {
        for b in &symbols[i + 1..] {
            for x in 0..spec.k() {
                if spec.supports(a.server, x) && spec.supports(b.server, x) && a.encoded_tags[x] != b.encoded_tags[x] {
                    return Err(format!(
                        "s{} and s{} encode o{x} at {:?} and {:?}",
                        a.server, b.server, a.encoded_tags[x], b.encoded_tags[x]
                    ));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::make_code;

    const A: [u8; 2] = [0x11, 0x22];
    const B: [u8; 2] = [0x33, 0x44];

    /// (4,2) code: s0 and s1 store o0 and o1, s2 and s3 store parities.
    fn cluster() -> Vec<Server> {
        let book = Arc::new(Codebook::new(make_code(4, 2, 2).unwrap()).unwrap());
        (0..4).map(|s| Server::init(s, Arc::clone(&book), &[A.to_vec(), B.to_vec()]).unwrap()).collect()
    }

    fn to_server(env: &Envelope) -> Option<ServerId> {
        match env.to {
            Node::Server(s) => Some(s),
            Node::Client(_) => None,
        }
    }

    fn take(out: &mut Vec<Envelope>, to: ServerId, kind: &str) -> Envelope {
        let i = out.iter().position(|e| to_server(e) == Some(to) && e.msg.kind() == kind).expect("message present");
        out.remove(i)
    }

    fn deliver(servers: &mut [Server], env: Envelope) -> Effects {
        let s = to_server(&env).unwrap();
        servers[s].handle(env)
    }

    fn kinds(fx: &Effects) -> Vec<&'static str> {
        fx.out.iter().map(|e| e.msg.kind()).collect()
    }

    fn none() -> DependencyContext {
        DependencyContext::new()
    }

    #[test]
    fn init_identity_code() {
        let book = Arc::new(Codebook::new(make_code(3, 3, 4).unwrap()).unwrap());
        let zeros = vec![vec![0u8; 4]; 3];
        let s = Server::init(0, book, &zeros).unwrap();
        assert_eq!(s.symbol().payload, vec![0; 4]);
        assert!(s.applied().iter().all(|t| *t == Tag::INITIAL));
        assert!(s.read_list().is_empty());
        assert_eq!(s.bytes_history(), 0);
    }

    #[test]
    fn init_parity_matches_encoder() {
        let servers = cluster();
        let spec = make_code(4, 2, 2).unwrap();
        for s in &servers {
            let expected = encode_symbol(&spec, s.id(), &[&A, &B]).unwrap();
            assert_eq!(s.symbol().payload, expected);
            assert_eq!(s.symbol().encoded_tags, vec![Tag::INITIAL; 2]);
        }
        // independent evaluation of the s3 row
        let (c0, c1) = (spec.coefficient(3, 0), spec.coefficient(3, 1));
        let by_hand: Vec<u8> = (0..2)
            .map(|i| (crate::gf256::field_mul(c0, A[i].into()) + crate::gf256::field_mul(c1, B[i].into())).0)
            .collect();
        assert_eq!(servers[3].symbol().payload, by_hand);
    }

    #[test]
    fn writes_are_local_everywhere() {
        let mut servers = cluster();
        let fx = servers[2].on_client_write(7, 0, 1, vec![9, 9], none());
        assert_eq!(kinds(&fx), ["WriteAck", "Propagate", "Propagate", "Propagate"]);
        let Message::WriteAck { tag, .. } = fx.out[0].msg else { panic!() };
        assert_eq!(tag, Tag::new(1, 2));
        let fx = servers[2].on_client_write(7, 1, 1, vec![8, 8], none());
        let Message::WriteAck { tag, .. } = fx.out[0].msg else { panic!() };
        assert_eq!(tag, Tag::new(2, 2));
        // parity server buffers both versions
        assert_eq!(servers[2].history(1).count(), 2);
        assert_eq!(servers[2].applied()[1], Tag::new(2, 2));
        assert_eq!(servers[2].bytes_history(), 4);
    }

    #[test]
    fn halted_server_is_inert() {
        let mut servers = cluster();
        servers[1].halt();
        assert!(servers[1].on_client_write(0, 0, 0, vec![1, 1], none()).out.is_empty());
        assert!(servers[1].on_client_read(0, 0, 0, none()).out.is_empty());
        assert!(servers[1].internal_gossip().out.is_empty());
        assert!(!servers[1].has_local_work());
    }

    #[test]
    fn local_reads() {
        let mut servers = cluster();
        // systematic server answers from its symbol
        let fx = servers[0].on_client_read(0, 0, 0, none());
        assert_eq!(kinds(&fx), ["ReadResp"]);
        let Message::ReadResp { tag, value, .. } = &fx.out[0].msg else { panic!() };
        assert_eq!((*tag, value.as_slice()), (Tag::INITIAL, &A[..]));

        // parity server answers from history after a write it buffered
        servers[3].on_client_write(0, 0, 0, vec![5, 5], none());
        let fx = servers[3].on_client_read(1, 0, 0, none());
        assert_eq!(kinds(&fx), ["ReadResp"]);
        let Message::ReadResp { tag, value, deps, .. } = &fx.out[0].msg else { panic!() };
        assert_eq!((*tag, value.as_slice()), (Tag::new(1, 3), &[5u8, 5][..]));
        assert_eq!(deps.get(0), Some(Tag::new(1, 3)));
        assert!(fx.events.is_empty());
    }

    #[test]
    fn remote_read_completes_from_plain_value() {
        let mut servers = cluster();
        let mut fx = servers[0].on_client_read(4, 0, 1, none());
        assert_eq!(kinds(&fx), ["ReadHelpReq"; 3]);
        assert_eq!(servers[0].read_list().len(), 1);
        let req = take(&mut fx.out, 1, "ReadHelpReq");
        let mut resp = deliver(&mut servers, req).out;
        let Message::ReadHelpResp { plain, .. } = &resp[0].msg else { panic!() };
        assert_eq!(plain.len(), 1);
        let done = deliver(&mut servers, resp.remove(0));
        let resp = done.out.iter().find(|e| e.msg.kind() == "ReadResp").unwrap();
        let Message::ReadResp { value, tag, .. } = &resp.msg else { panic!() };
        assert_eq!((value.as_slice(), *tag), (&B[..], Tag::INITIAL));
        assert!(done.events.is_empty(), "no decode needed");
        assert!(servers[0].read_list().is_empty());
    }

    #[test]
    fn remote_read_decodes_from_recovery_set() {
        let mut servers = cluster();
        let mut fx = servers[0].on_client_read(4, 0, 1, none());
        // only the parity server s2 answers; with s0's own symbol that is {s0, s2}
        let req = take(&mut fx.out, 2, "ReadHelpReq");
        let mut resp = deliver(&mut servers, req).out;
        let done = deliver(&mut servers, resp.remove(0));
        let read = done.out.iter().find(|e| e.msg.kind() == "ReadResp").unwrap();
        let Message::ReadResp { value, .. } = &read.msg else { panic!() };
        assert_eq!(value.as_slice(), &B[..]);
        assert!(
            matches!(&done.events[..], [ServerEvent::Decoded { servers, recovery: false, .. }] if servers == &vec![0, 2])
        );
    }

    #[test]
    fn propagate_gating_and_duplicates() {
        let mut servers = cluster();
        let first = HistoryEntry { object: 0, tag: Tag::new(1, 1), value: vec![1, 1], deps: none() };
        let dep: DependencyContext = [(0, Tag::new(1, 1))].into_iter().collect();
        let second = HistoryEntry { object: 1, tag: Tag::new(1, 1), value: vec![2, 2], deps: dep };

        // the dependent write arrives first and waits
        servers[3].on_propagate(second.clone());
        assert_eq!(servers[3].applied()[1], Tag::INITIAL);
        assert!(servers[3].has_local_work());
        assert_eq!(servers[3].bytes_history(), 2);

        servers[3].on_propagate(first.clone());
        assert_eq!(servers[3].applied(), &[Tag::new(1, 1), Tag::new(1, 1)]);
        assert_eq!(servers[3].history(1).count(), 1);

        let before: Vec<HistoryEntry> = servers[3].history(0).chain(servers[3].history(1)).cloned().collect();
        servers[3].on_propagate(first);
        servers[3].on_propagate(second);
        let after: Vec<HistoryEntry> = servers[3].history(0).chain(servers[3].history(1)).cloned().collect();
        assert_eq!(before, after);
        assert_eq!(servers[3].bytes_history(), 4);
    }

    #[test]
    fn blocked_read_waits_for_context() {
        let mut servers = cluster();
        let ctx: DependencyContext = [(1, Tag::new(1, 0))].into_iter().collect();
        assert!(servers[1].on_client_read(0, 0, 1, ctx).out.is_empty());
        let entry = HistoryEntry { object: 1, tag: Tag::new(1, 0), value: vec![6, 6], deps: none() };
        let fx = servers[1].on_propagate(entry);
        let Message::ReadResp { tag, value, .. } = &fx.out[0].msg else { panic!() };
        assert_eq!((*tag, value.as_slice()), (Tag::new(1, 0), &[6u8, 6][..]));
    }

    /// Writes both objects at their systematic servers and lets every server
    /// apply and encode them. Returns the cluster after the Displaced handoff.
    fn write_both_and_encode(servers: &mut [Server], alive: &[bool]) {
        for (s, o, v) in [(0, 0, [0xa0, 0xa1]), (1, 1, [0xb0, 0xb1])] {
            let fx = servers[s].on_client_write(0, 0, o, v.to_vec(), none());
            for env in fx.out.into_iter().filter(|e| e.msg.kind() == "Propagate") {
                deliver(servers, env);
            }
        }
        for s in 0..2 {
            let fx = servers[s].internal_encode(alive);
            assert_eq!(kinds(&fx), ["Displaced"; 3]);
            for env in fx.out {
                deliver(servers, env);
            }
        }
    }

    #[test]
    fn encode_parity_matches_full_encoder() {
        let mut servers = cluster();
        let alive = [true; 4];
        write_both_and_encode(&mut servers, &alive);
        assert_eq!(servers[0].symbol().payload, vec![0xa0, 0xa1]);
        for (s, srv) in servers.iter_mut().enumerate().skip(2) {
            srv.internal_encode(&alive);
            let spec = make_code(4, 2, 2).unwrap();
            let expected = encode_symbol(&spec, s, &[&[0xa0, 0xa1], &[0xb0, 0xb1]]).unwrap();
            assert_eq!(srv.symbol().payload, expected);
            assert_eq!(srv.symbol().encoded_tags, vec![Tag::new(1, 0), Tag::new(1, 1)]);
            // fixed point
            let again = srv.internal_encode(&alive);
            assert!(again.out.is_empty());
            assert_eq!(srv.symbol().payload, expected);
        }
    }

    #[test]
    fn gossip_and_garbage_collection() {
        let mut servers = cluster();
        let alive = [true; 4];
        let fx = servers[3].internal_gossip();
        assert_eq!(kinds(&fx), ["EncodedUpTo"; 3]);
        assert!(matches!(&fx.out[0].msg, Message::EncodedUpTo { tags, .. } if tags == &vec![Tag::INITIAL; 2]));
        assert!(servers[3].internal_gossip().out.is_empty(), "unchanged tuple is not re-announced");

        write_both_and_encode(&mut servers, &alive);
        servers[2].internal_encode(&alive);
        // s3 lags: nothing of either object may go
        servers[2].garbage_collect(&alive);
        assert!(servers[2].history(0).count() > 0 && servers[2].history(1).count() > 0);

        servers[3].internal_encode(&alive);
        for s in 0..4 {
            for env in servers[s].internal_gossip().out {
                deliver(&mut servers, env);
            }
        }
        assert_eq!(servers[2].view_of(3), &[Tag::new(1, 0), Tag::new(1, 1)]);
        for (s, srv) in servers.iter_mut().enumerate() {
            srv.garbage_collect(&alive);
            assert_eq!(srv.bytes_history(), 0, "s{s}");
            assert!(!srv.has_local_work());
        }
    }

    #[test]
    fn mismatched_symbols_wait_for_reencode() {
        let mut servers = cluster();
        let alive = [true; 4];
        // s0 writes o1; s1 and s2 apply it
        let mut fx = servers[0].on_client_write(0, 0, 1, vec![0xcc, 0xdd], none());
        for to in [1, 2] {
            let p = take(&mut fx.out, to, "Propagate");
            deliver(&mut servers, p);
        }
        // s1 reads o0 (not stored there), then moves its own symbol to the new o1
        let mut read = servers[1].on_client_read(9, 0, 0, none());
        let mut enc = servers[1].internal_encode(&alive);
        assert!(enc.out.iter().all(|e| e.msg.kind() == "Displaced"));

        // s2 still encodes the old o1: {s1, s2} disagree, so no decode yet
        let req = take(&mut read.out, 2, "ReadHelpReq");
        let mut resp = deliver(&mut servers, req).out;
        let waiting = deliver(&mut servers, resp.remove(0));
        assert!(waiting.out.is_empty() && waiting.events.is_empty());
        assert_eq!(servers[1].read_list().len(), 1);

        // s2 gets the displaced value, re-encodes and answers again
        let handoff = take(&mut enc.out, 2, "Displaced");
        deliver(&mut servers, handoff);
        let mut again = servers[2].internal_encode(&alive).out;
        assert_eq!(again.len(), 1, "one re-response to the watching reader");
        let done = deliver(&mut servers, again.remove(0));
        let resp = done.out.iter().find(|e| e.msg.kind() == "ReadResp").unwrap();
        let Message::ReadResp { tag, value, .. } = &resp.msg else { panic!() };
        assert_eq!((*tag, value.as_slice()), (Tag::INITIAL, &A[..]));
        assert!(matches!(&done.events[..], [ServerEvent::Decoded { .. }]));
        assert!(done.out.iter().any(|e| e.msg.kind() == "ReadHelpDone"));
    }

    #[test]
    fn parity_recovers_old_value_when_systematic_server_is_down() {
        let mut servers = cluster();
        let mut alive = [true; 4];
        // everyone applies a write of o0, then its systematic server s0 dies
        let fx = servers[1].on_client_write(0, 0, 0, vec![0x5a, 0x5b], none());
        for env in fx.out.into_iter().filter(|e| e.msg.kind() == "Propagate") {
            deliver(&mut servers, env);
        }
        servers[0].halt();
        alive[0] = false;
        for s in &mut servers {
            s.observe_membership(&alive);
        }
        assert!(servers[2].has_local_work());
        let mut fx = servers[2].internal_encode(&alive);
        assert_eq!(kinds(&fx), ["ReadHelpReq"; 3]);
        // s1 and s3 answer; s2's own symbol plus theirs decodes the old o0
        for to in [1, 3] {
            let req = take(&mut fx.out, to, "ReadHelpReq");
            let mut resp = deliver(&mut servers, req).out;
            let done = deliver(&mut servers, resp.remove(0));
            if !done.events.is_empty() {
                assert!(
                    matches!(&done.events[..], [ServerEvent::Decoded { recovery: true, tag, .. }] if *tag == Tag::INITIAL)
                );
            }
        }
        assert_eq!(servers[2].stats().recoveries, 1);
        servers[2].internal_encode(&alive);
        let spec = make_code(4, 2, 2).unwrap();
        assert_eq!(servers[2].symbol().payload, encode_symbol(&spec, 2, &[&[0x5a, 0x5b], &B]).unwrap());
    }

    #[test]
    fn tags_agree_only_checks_shared_objects() {
        let servers = cluster();
        let book = Arc::clone(&servers[0].book);
        let mut s0 = servers[0].symbol().clone();
        let s1 = servers[1].symbol().clone();
        let s2 = servers[2].symbol().clone();
        // s0 does not store o1, so its tag for o1 is irrelevant
        s0.encoded_tags[1] = Tag::new(4, 0);
        assert!(tags_agree(&book, &[&s0, &s1]).is_ok());
        assert!(tags_agree(&book, &[&s0, &s2]).is_ok());
        s0.encoded_tags[0] = Tag::new(4, 0);
        assert!(tags_agree(&book, &[&s0, &s2]).is_err());
    }
}

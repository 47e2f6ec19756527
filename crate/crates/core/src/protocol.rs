//! Tags, dependency contexts, history entries and the message algebra shared by
//! clients, servers, the simulator and the checker.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub type ServerId = usize;
pub type ObjectId = usize;
pub type ClientId = usize;

/// Version identifier of one write: per-object logical counter, ties broken
/// by the id of the server that accepted the write.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Tag {
    pub seq: u64,
    pub writer: ServerId,
}

impl Tag {
    /// Tag of the initial value of every object.
    pub const INITIAL: Tag = Tag { seq: 0, writer: 0 };

    pub fn new(seq: u64, writer: ServerId) -> Self {
        Tag { seq, writer }
    }
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},s{})", self.seq, self.writer)
    }
}

pub fn tag_compare(a: Tag, b: Tag) -> Ordering {
    (a.seq, a.writer).cmp(&(b.seq, b.writer))
}

/// Latest known tag per object. A missing object means no dependency.
#[derive(Clone, PartialEq, Eq, Default, Serialize)]
#[serde(transparent)]
pub struct DependencyContext(pub BTreeMap<ObjectId, Tag>);

// JSON object keys may reach us as strings even when they hold integers
// (serde buffers them that way inside tagged enums).
impl<'de> Deserialize<'de> for DependencyContext {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(PartialEq, Eq, PartialOrd, Ord)]
        struct Key(ObjectId);
        impl<'de> Deserialize<'de> for Key {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                struct V;
                impl serde::de::Visitor<'_> for V {
                    type Value = Key;
                    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                        f.write_str("an object id")
                    }
                    fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<Key, E> {
                        usize::try_from(v).map(Key).map_err(E::custom)
                    }
                    fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Key, E> {
                        v.parse().map(Key).map_err(E::custom)
                    }
                }
                d.deserialize_any(V)
            }
        }
        let raw = BTreeMap::<Key, Tag>::deserialize(d);
        raw.map(|m| DependencyContext(m.into_iter().map(|(k, t)| (k.0, t)).collect()))
    }
}

impl fmt::Debug for DependencyContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.0.iter()).finish()
    }
}

impl DependencyContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, object: ObjectId) -> Option<Tag> {
        self.0.get(&object).copied()
    }

    /// Raises the entry for `object` to at least `tag`.
    pub fn observe(&mut self, object: ObjectId, tag: Tag) {
        let e = self.0.entry(object).or_insert(tag);
        if tag > *e {
            *e = tag;
        }
    }

    pub fn merge_from(&mut self, other: &DependencyContext) {
        for (&o, &t) in &other.0 {
            self.observe(o, t);
        }
    }

    /// Pointwise `self <= other`: every dependency here is met by `other`.
    pub fn dominated_by(&self, other: &DependencyContext) -> bool {
        self.0.iter().all(|(o, t)| other.get(*o).is_some_and(|u| u >= *t))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ObjectId, Tag)> + '_ {
        self.0.iter().map(|(o, t)| (*o, *t))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(ObjectId, Tag)> for DependencyContext {
    fn from_iter<I: IntoIterator<Item = (ObjectId, Tag)>>(iter: I) -> Self {
        let mut ctx = DependencyContext::new();
        for (o, t) in iter {
            ctx.observe(o, t);
        }
        ctx
    }
}

/// Per-object maximum of two contexts.
pub fn ctx_merge(a: &DependencyContext, b: &DependencyContext) -> DependencyContext {
    let mut out = a.clone();
    out.merge_from(b);
    out
}

/// True iff every dependency in `ctx` has been applied.
pub fn ctx_satisfied(ctx: &DependencyContext, applied: &[Tag]) -> bool {
    ctx.iter().all(|(o, t)| applied.get(o).is_some_and(|a| *a >= t))
}

/// One retained version of an object.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub object: ObjectId,
    pub tag: Tag,
    #[serde(with = "hex_bytes")]
    pub value: Vec<u8>,
    pub deps: DependencyContext,
}

impl fmt::Debug for HistoryEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HistoryEntry")
            .field("object", &self.object)
            .field("tag", &self.tag)
            .field("value", &hex::encode(&self.value))
            .field("deps", &self.deps)
            .finish()
    }
}

/// A server's stored codeword symbol together with the version of every
/// object it encodes and the union of those versions' dependencies.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CodewordSymbol {
    pub server: ServerId,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub encoded_tags: Vec<Tag>,
    pub deps: DependencyContext,
}

/// Identifies a pending remote read: the requesting server and its local counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReadId {
    pub origin: ServerId,
    pub seq: u64,
}

/// Which versions can satisfy a remote read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReadTarget {
    /// Any version at or above the tag (client reads).
    AtLeast(Tag),
    /// Exactly this version (a server recovering an encoded value).
    Exact(Tag),
}

impl ReadTarget {
    pub fn accepts(&self, tag: Tag) -> bool {
        match *self {
            ReadTarget::AtLeast(floor) => tag >= floor,
            ReadTarget::Exact(want) => tag == want,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Node {
    Server(ServerId),
    Client(ClientId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    WriteReq {
        op: u64,
        object: ObjectId,
        value: Vec<u8>,
        ctx: DependencyContext,
    },
    WriteAck {
        op: u64,
        object: ObjectId,
        tag: Tag,
    },
    ReadReq {
        op: u64,
        object: ObjectId,
        ctx: DependencyContext,
    },
    ReadResp {
        op: u64,
        object: ObjectId,
        tag: Tag,
        value: Vec<u8>,
        deps: DependencyContext,
    },
    Propagate(HistoryEntry),
    ReadHelpReq {
        read_id: ReadId,
        object: ObjectId,
        want: ReadTarget,
    },
    ReadHelpResp {
        read_id: ReadId,
        symbol: CodewordSymbol,
        plain: Vec<HistoryEntry>,
    },
    ReadHelpDone {
        read_id: ReadId,
    },
    EncodedUpTo {
        server: ServerId,
        tags: Vec<Tag>,
    },
    /// A systematic server moved its object past `entry.tag`; `encoded` is
    /// its tag tuple after the move.
    Displaced {
        entry: HistoryEntry,
        encoded: Vec<Tag>,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::WriteReq { .. } => "WriteReq",
            Message::WriteAck { .. } => "WriteAck",
            Message::ReadReq { .. } => "ReadReq",
            Message::ReadResp { .. } => "ReadResp",
            Message::Propagate(_) => "Propagate",
            Message::ReadHelpReq { .. } => "ReadHelpReq",
            Message::ReadHelpResp { .. } => "ReadHelpResp",
            Message::ReadHelpDone { .. } => "ReadHelpDone",
            Message::EncodedUpTo { .. } => "EncodedUpTo",
            Message::Displaced { .. } => "Displaced",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub from: Node,
    pub to: Node,
    pub msg: Message,
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

//! Causally consistent key-value storage over a cross-object erasure code,
//! with a deterministic simulator and an offline consistency checker.

pub mod checker;
pub mod client;
pub mod codec;
pub mod gf256;
pub mod protocol;
pub mod server;
pub mod sim;

pub mod trace;
pub mod wire;

pub use client::{Client, ClientError, Completion, OpKind};
pub use codec::{decode, encode_symbol, make_code, recovery_sets, CodeSpec, Codebook, CodecError, RecoverySet};
pub use protocol::{ctx_merge, ctx_satisfied, tag_compare, DependencyContext, HistoryEntry, Message, Tag};
pub use server::{Server, ServerEvent, ViolationKind};
pub use trace::{ExecutionTrace, TraceEvent};

//! Execution traces: the simulator's append-only record and its JSON-lines
//! and CSV renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::client::OpKind;
use crate::protocol::{ClientId, DependencyContext, Node, ObjectId, ServerId, Tag};
use crate::server::ViolationKind;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum TraceEvent {
    Header {
        n: usize,
        k: usize,
        value_len: usize,
        clients: usize,
        f: usize,
        seed: u64,
        /// Hex-encoded initial value of every object.
        initial: Vec<String>,
    },
    Invoke {
        step: u64,
        client: ClientId,
        op: u64,
        kind: OpKind,
        object: ObjectId,
        server: ServerId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<String>,
        ctx: DependencyContext,
        #[serde(default, skip_serializing_if = "is_false")]
        probe: bool,
    },
    Respond {
        step: u64,
        client: ClientId,
        op: u64,
        kind: OpKind,
        object: ObjectId,
        server: ServerId,
        tag: Tag,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deps: Option<DependencyContext>,
        ctx: DependencyContext,
        #[serde(default, skip_serializing_if = "is_false")]
        probe: bool,
    },
    Send {
        step: u64,
        id: u64,
        from: Node,
        to: Node,
        kind: String,
        /// Canonical binary encoding of the envelope, hex.
        bytes: String,
    },
    Deliver {
        step: u64,
        id: u64,
    },
    Drop {
        step: u64,
        id: u64,
    },
    Crash {
        step: u64,
        server: ServerId,
    },
    Decode {
        step: u64,
        server: ServerId,
        object: ObjectId,
        tag: Tag,
        from: Vec<ServerId>,
        recovery: bool,
    },
    Violation {
        step: u64,
        server: ServerId,
        kind: ViolationKind,
        detail: String,
    },
    Snapshot {
        step: u64,
        server: ServerId,
        bytes_symbol: usize,
        bytes_history: usize,
    },
    Quiescent {
        step: u64,
        phase: Phase,
    },
    StepLimit {
        step: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Client workload finished and the system settled.
    Workload,
    /// Probe reads finished and the system settled again.
    Probes,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("trace has no header")]
    MissingHeader,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecutionTrace {
    pub events: Vec<TraceEvent>,
}

impl ExecutionTrace {
    pub fn push(&mut self, ev: TraceEvent) {
        self.events.push(ev);
    }

    /// One JSON object per line, fields in declaration order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::with_capacity(self.events.len() * 96);
        for ev in &self.events {
            out.push_str(&serde_json::to_string(ev).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        let events = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|source| TraceError::Parse { line: i + 1, source }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExecutionTrace { events })
    }

    /// `step,server,bytes_symbol,bytes_history` rows for every snapshot.
    pub fn storage_csv(&self) -> String {
        let mut out = String::from("step,server,bytes_symbol,bytes_history\n");
        for ev in &self.events {
            if let TraceEvent::Snapshot { step, server, bytes_symbol, bytes_history } = ev {
                let _ = writeln!(out, "{step},{server},{bytes_symbol},{bytes_history}");
            }
        }
        out
    }

    pub fn header(&self) -> Option<&TraceEvent> {
        self.events.iter().find(|e| matches!(e, TraceEvent::Header { .. }))
    }

    /// Whether the run settled after its probe reads.
    pub fn is_quiescent(&self) -> bool {
        self.events.iter().any(|e| matches!(e, TraceEvent::Quiescent { phase: Phase::Probes, .. }))
            || (self.events.iter().any(|e| matches!(e, TraceEvent::Quiescent { phase: Phase::Workload, .. }))
                && !self.events.iter().any(|e| matches!(e, TraceEvent::Invoke { probe: true, .. })))
    }

    pub fn decode_count(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, TraceEvent::Decode { .. })).count()
    }

    pub fn violations(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| matches!(e, TraceEvent::Violation { .. }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_field_order() {
        let mut t = ExecutionTrace::default();
        t.push(TraceEvent::Header {
            n: 4,
            k: 2,
            value_len: 2,
            clients: 1,
            f: 0,
            seed: 3,
            initial: vec!["0000".into(); 2],
        });
        t.push(TraceEvent::Respond {
            step: 7,
            client: 0,
            op: 1,
            kind: OpKind::Read,
            object: 1,
            server: 2,
            tag: Tag::new(2, 3),
            value: Some("abcd".into()),
            deps: Some([(0, Tag::new(1, 0))].into_iter().collect()),
            ctx: [(1, Tag::new(2, 3))].into_iter().collect(),
            probe: false,
        });
        t.push(TraceEvent::Snapshot { step: 9, server: 1, bytes_symbol: 2, bytes_history: 0 });
        let text = t.to_jsonl();
        assert!(text.lines().nth(1).unwrap().starts_with(
            r#"{"ev":"respond","step":7,"client":0,"op":1,"kind":"read","object":1,"server":2,"tag":{"seq":2,"writer":3}"#
        ));
        assert_eq!(ExecutionTrace::from_jsonl(&text).unwrap(), t);
        assert_eq!(t.storage_csv(), "step,server,bytes_symbol,bytes_history\n9,1,2,0\n");
    }

    #[test]
    fn parse_error_names_line() {
        let err = ExecutionTrace::from_jsonl("{\"ev\":\"deliver\",\"step\":1,\"id\":2}\nnot json\n").unwrap_err();
        assert!(matches!(err, TraceError::Parse { line: 2, .. }));
    }
}

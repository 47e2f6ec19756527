//! Client session automaton: one outstanding operation at a time, with the
//! session's dependency context carried on every request.

use thiserror::Error;

use crate::protocol::{ClientId, DependencyContext, Envelope, Message, Node, ObjectId, ServerId, Tag};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("client {0} already has an outstanding operation")]
    Busy(ClientId),
    #[error("value of {actual} bytes exceeds the object size {limit}")]
    ValueTooLong { actual: usize, limit: usize },
    #[error("client {client} got an unexpected {kind}")]
    UnexpectedResponse { client: ClientId, kind: &'static str },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Write,
    Read,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutstandingOp {
    pub op: u64,
    pub kind: OpKind,
    pub object: ObjectId,
    pub server: ServerId,
}

/// Result of a completed operation, as seen by the client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub op: u64,
    pub kind: OpKind,
    pub object: ObjectId,
    pub tag: Tag,
    /// Value returned by a read.
    pub value: Option<Vec<u8>>,
    /// Dependencies reported with a read's value.
    pub deps: DependencyContext,
    pub ctx_after: DependencyContext,
}

#[derive(Clone, Debug)]
pub struct Client {
    id: ClientId,
    ctx: DependencyContext,
    pending: Option<OutstandingOp>,
    server: ServerId,
    value_len: usize,
    next_op: u64,
}

impl Client {
    pub fn new(id: ClientId, server: ServerId, value_len: usize) -> Self {
        Client { id, ctx: DependencyContext::new(), pending: None, server, value_len, next_op: 0 }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn ctx(&self) -> &DependencyContext {
        &self.ctx
    }

    pub fn server(&self) -> ServerId {
        self.server
    }

    pub fn pending(&self) -> Option<&OutstandingOp> {
        self.pending.as_ref()
    }

    /// Switches the server that receives subsequent requests. The causal
    /// context stays with the client.
    pub fn attach(&mut self, server: ServerId) {
        self.server = server;
    }

    fn begin(&mut self, kind: OpKind, object: ObjectId) -> Result<u64, ClientError> {
        if self.pending.is_some() {
            return Err(ClientError::Busy(self.id));
        }
        let op = self.next_op;
        self.next_op += 1;
        self.pending = Some(OutstandingOp { op, kind, object, server: self.server });
        Ok(op)
    }

    /// Issues a write; values shorter than the object size are zero-padded.
    pub fn issue_write(&mut self, object: ObjectId, value: &[u8]) -> Result<Envelope, ClientError> {
        if value.len() > self.value_len {
            return Err(ClientError::ValueTooLong { actual: value.len(), limit: self.value_len });
        }
        let op = self.begin(OpKind::Write, object)?;
        let mut padded = value.to_vec();
        padded.resize(self.value_len, 0);
        Ok(Envelope {
            from: Node::Client(self.id),
            to: Node::Server(self.server),
            msg: Message::WriteReq { op, object, value: padded, ctx: self.ctx.clone() },
        })
    }

    pub fn issue_read(&mut self, object: ObjectId) -> Result<Envelope, ClientError> {
        let op = self.begin(OpKind::Read, object)?;
        Ok(Envelope {
            from: Node::Client(self.id),
            to: Node::Server(self.server),
            msg: Message::ReadReq { op, object, ctx: self.ctx.clone() },
        })
    }

    /// Consumes a server response and folds what it reveals into the context.
    pub fn on_response(&mut self, msg: Message) -> Result<Completion, ClientError> {
        let unexpected = |kind| ClientError::UnexpectedResponse { client: self.id, kind };
        let Some(p) = self.pending.clone() else { return Err(unexpected(msg.kind())) };
        let completion = match msg {
            Message::WriteAck { op, object, tag } if op == p.op && p.kind == OpKind::Write && object == p.object => {
                self.ctx.observe(object, tag);
                Completion {
                    op,
                    kind: OpKind::Write,
                    object,
                    tag,
                    value: None,
                    deps: DependencyContext::new(),
                    ctx_after: self.ctx.clone(),
                }
            }
            Message::ReadResp { op, object, tag, value, deps }
                if op == p.op && p.kind == OpKind::Read && object == p.object =>
            {
                self.ctx.merge_from(&deps);
                self.ctx.observe(object, tag);
                Completion {
                    op,
                    kind: OpKind::Read,
                    object,
                    tag,
                    value: Some(value),
                    deps,
                    ctx_after: self.ctx.clone(),
                }
            }
            other => return Err(unexpected(other.kind())),
        };
        self.pending = None;
        Ok(completion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_ack_extends_context() {
        let mut c = Client::new(0, 1, 4);
        let env = c.issue_write(0, b"ab").unwrap();
        let Message::WriteReq { value, ctx, op, .. } = env.msg else { panic!() };
        assert_eq!(value, b"ab\0\0");
        assert!(ctx.is_empty());
        let done = c.on_response(Message::WriteAck { op, object: 0, tag: Tag::new(1, 1) }).unwrap();
        assert_eq!(done.ctx_after.get(0), Some(Tag::new(1, 1)));

        // the next write carries the first one as a dependency
        let env = c.issue_write(2, b"x").unwrap();
        let Message::WriteReq { ctx, .. } = env.msg else { panic!() };
        assert_eq!(ctx.get(0), Some(Tag::new(1, 1)));
    }

    #[test]
    fn read_merges_reported_dependencies() {
        let mut c = Client::new(3, 0, 2);
        let env = c.issue_read(1).unwrap();
        let Message::ReadReq { op, .. } = env.msg else { panic!() };
        let deps: DependencyContext = [(0, Tag::new(4, 2))].into_iter().collect();
        let done =
            c.on_response(Message::ReadResp { op, object: 1, tag: Tag::new(2, 0), value: vec![1, 2], deps }).unwrap();
        assert_eq!(done.ctx_after.get(0), Some(Tag::new(4, 2)));
        assert_eq!(done.ctx_after.get(1), Some(Tag::new(2, 0)));
        // a later write depends on what was read
        let Message::WriteReq { ctx, .. } = c.issue_write(2, b"z").unwrap().msg else { panic!() };
        assert_eq!(ctx.get(1), Some(Tag::new(2, 0)));
    }

    #[test]
    fn one_outstanding_operation() {
        let mut c = Client::new(0, 0, 4);
        c.issue_read(0).unwrap();
        assert_eq!(c.issue_write(0, b"").unwrap_err(), ClientError::Busy(0));
        assert_eq!(c.issue_read(1).unwrap_err(), ClientError::Busy(0));
    }

    #[test]
    fn rejects_oversized_and_mismatched() {
        let mut c = Client::new(0, 0, 2);
        assert!(matches!(c.issue_write(0, b"abc"), Err(ClientError::ValueTooLong { .. })));
        assert!(c.pending().is_none());
        c.issue_read(0).unwrap();
        let wrong = Message::WriteAck { op: 0, object: 0, tag: Tag::new(1, 0) };
        assert!(c.on_response(wrong).is_err());
        assert!(c.pending().is_some());
    }

    #[test]
    fn context_never_decreases() {
        let mut c = Client::new(0, 0, 1);
        let Message::WriteReq { op, .. } = c.issue_write(0, b"a").unwrap().msg else { panic!() };
        c.on_response(Message::WriteAck { op, object: 0, tag: Tag::new(5, 0) }).unwrap();
        let Message::ReadReq { op, .. } = c.issue_read(0).unwrap().msg else { panic!() };
        // a response can never lower the context
        c.on_response(Message::ReadResp {
            op,
            object: 0,
            tag: Tag::new(3, 0),
            value: vec![0],
            deps: Default::default(),
        })
        .unwrap();
        assert_eq!(c.ctx().get(0), Some(Tag::new(5, 0)));
    }
}

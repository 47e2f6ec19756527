//! Canonical binary form of envelopes: one variant byte, then fields in
//! declaration order. Integers are little-endian; byte strings and lists carry
//! a `u32` length prefix. Ids are written as `u32`.

use thiserror::Error;

use crate::protocol::{
    CodewordSymbol, DependencyContext, Envelope, HistoryEntry, Message, Node, ReadId, ReadTarget, Tag,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("input truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown {what} discriminant {value}")]
    UnknownVariant { what: &'static str, value: u8 },
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("id {0} does not fit in 32 bits")]
    IdOverflow(usize),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn id(&mut self, v: usize) -> Result<(), WireError> {
        let v = u32::try_from(v).map_err(|_| WireError::IdOverflow(v))?;
        self.u32(v);
        Ok(())
    }

    fn len(&mut self, v: usize) -> Result<(), WireError> {
        self.id(v)
    }

    fn bytes(&mut self, b: &[u8]) -> Result<(), WireError> {
        self.len(b.len())?;
        self.buf.extend_from_slice(b);
        Ok(())
    }

    fn tag(&mut self, t: Tag) -> Result<(), WireError> {
        self.u64(t.seq);
        self.id(t.writer)
    }

    fn tags(&mut self, ts: &[Tag]) -> Result<(), WireError> {
        self.len(ts.len())?;
        ts.iter().try_for_each(|t| self.tag(*t))
    }

    fn ctx(&mut self, c: &DependencyContext) -> Result<(), WireError> {
        self.len(c.0.len())?;
        for (o, t) in c.iter() {
            self.id(o)?;
            self.tag(t)?;
        }
        Ok(())
    }

    fn entry(&mut self, e: &HistoryEntry) -> Result<(), WireError> {
        self.id(e.object)?;
        self.tag(e.tag)?;
        self.bytes(&e.value)?;
        self.ctx(&e.deps)
    }

    fn node(&mut self, n: Node) -> Result<(), WireError> {
        match n {
            Node::Server(s) => {
                self.u8(0);
                self.id(s)
            }
            Node::Client(c) => {
                self.u8(1);
                self.id(c)
            }
        }
    }

    fn read_id(&mut self, r: ReadId) -> Result<(), WireError> {
        self.id(r.origin)?;
        self.u64(r.seq);
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or(WireError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn id(&mut self) -> Result<usize, WireError> {
        Ok(self.u32()? as usize)
    }

    fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.id()?;
        Ok(self.take(n)?.to_vec())
    }

    fn tag(&mut self) -> Result<Tag, WireError> {
        let seq = self.u64()?;
        Ok(Tag::new(seq, self.id()?))
    }

    fn tags(&mut self) -> Result<Vec<Tag>, WireError> {
        let n = self.id()?;
        (0..n).map(|_| self.tag()).collect()
    }

    fn ctx(&mut self) -> Result<DependencyContext, WireError> {
        let n = self.id()?;
        let mut c = DependencyContext::new();
        for _ in 0..n {
            let o = self.id()?;
            c.0.insert(o, self.tag()?);
        }
        Ok(c)
    }

    fn entry(&mut self) -> Result<HistoryEntry, WireError> {
        Ok(HistoryEntry { object: self.id()?, tag: self.tag()?, value: self.bytes()?, deps: self.ctx()? })
    }

    fn node(&mut self) -> Result<Node, WireError> {
        match self.u8()? {
            0 => Ok(Node::Server(self.id()?)),
            1 => Ok(Node::Client(self.id()?)),
            value => Err(WireError::UnknownVariant { what: "node", value }),
        }
    }

    fn read_id(&mut self) -> Result<ReadId, WireError> {
        Ok(ReadId { origin: self.id()?, seq: self.u64()? })
    }
}

pub fn encode_message(m: &Message) -> Result<Vec<u8>, WireError> {
    let mut w = Writer { buf: Vec::with_capacity(64) };
    write_message(&mut w, m)?;
    Ok(w.buf)
}

pub fn encode_envelope(env: &Envelope) -> Result<Vec<u8>, WireError> {
    let mut w = Writer { buf: Vec::with_capacity(64) };
    w.node(env.from)?;
    w.node(env.to)?;
    write_message(&mut w, &env.msg)?;
    Ok(w.buf)
}

pub fn decode_envelope(buf: &[u8]) -> Result<Envelope, WireError> {
    let mut r = Reader { buf, pos: 0 };
    let from = r.node()?;
    let to = r.node()?;
    let msg = read_message(&mut r)?;
    if r.pos != buf.len() {
        return Err(WireError::TrailingBytes(buf.len() - r.pos));
    }
    Ok(Envelope { from, to, msg })
}

pub fn decode_message(buf: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader { buf, pos: 0 };
    let msg = read_message(&mut r)?;
    if r.pos != buf.len() {
        return Err(WireError::TrailingBytes(buf.len() - r.pos));
    }
    Ok(msg)
}

fn write_message(w: &mut Writer, m: &Message) -> Result<(), WireError> {
    match m {
        Message::WriteReq { op, object, value, ctx } => {
            w.u8(0);
            w.u64(*op);
            w.id(*object)?;
            w.bytes(value)?;
            w.ctx(ctx)?;
        }
        Message::WriteAck { op, object, tag } => {
            w.u8(1);
            w.u64(*op);
            w.id(*object)?;
            w.tag(*tag)?;
        }
        Message::ReadReq { op, object, ctx } => {
            w.u8(2);
            w.u64(*op);
            w.id(*object)?;
            w.ctx(ctx)?;
        }
        Message::ReadResp { op, object, tag, value, deps } => {
            w.u8(3);
            w.u64(*op);
            w.id(*object)?;
            w.tag(*tag)?;
            w.bytes(value)?;
            w.ctx(deps)?;
        }
        Message::Propagate(e) => {
            w.u8(4);
            w.entry(e)?;
        }
        Message::ReadHelpReq { read_id, object, want } => {
            w.u8(5);
            w.read_id(*read_id)?;
            w.id(*object)?;
            match want {
                ReadTarget::AtLeast(t) => {
                    w.u8(0);
                    w.tag(*t)?;
                }
                ReadTarget::Exact(t) => {
                    w.u8(1);
                    w.tag(*t)?;
                }
            }
        }
        Message::ReadHelpResp { read_id, symbol, plain } => {
            w.u8(6);
            w.read_id(*read_id)?;
            w.id(symbol.server)?;
            w.bytes(&symbol.payload)?;
            w.tags(&symbol.encoded_tags)?;
            w.ctx(&symbol.deps)?;
            w.len(plain.len())?;
            plain.iter().try_for_each(|e| w.entry(e))?;
        }
        Message::ReadHelpDone { read_id } => {
            w.u8(7);
            w.read_id(*read_id)?;
        }
        Message::EncodedUpTo { server, tags } => {
            w.u8(8);
            w.id(*server)?;
            w.tags(tags)?;
        }
        Message::Displaced { entry, encoded } => {
            w.u8(9);
            w.entry(entry)?;
            w.tags(encoded)?;
        }
    }
    Ok(())
}

fn read_message(r: &mut Reader<'_>) -> Result<Message, WireError> {
    Ok(match r.u8()? {
        0 => Message::WriteReq { op: r.u64()?, object: r.id()?, value: r.bytes()?, ctx: r.ctx()? },
        1 => Message::WriteAck { op: r.u64()?, object: r.id()?, tag: r.tag()? },
        2 => Message::ReadReq { op: r.u64()?, object: r.id()?, ctx: r.ctx()? },
        3 => Message::ReadResp { op: r.u64()?, object: r.id()?, tag: r.tag()?, value: r.bytes()?, deps: r.ctx()? },
        4 => Message::Propagate(r.entry()?),
        5 => {
            let read_id = r.read_id()?;
            let object = r.id()?;
            let want = match r.u8()? {
                0 => ReadTarget::AtLeast(r.tag()?),
                1 => ReadTarget::Exact(r.tag()?),
                value => return Err(WireError::UnknownVariant { what: "read target", value }),
            };
            Message::ReadHelpReq { read_id, object, want }
        }
        6 => {
            let read_id = r.read_id()?;
            let symbol =
                CodewordSymbol { server: r.id()?, payload: r.bytes()?, encoded_tags: r.tags()?, deps: r.ctx()? };
            let n = r.id()?;
            let plain = (0..n).map(|_| r.entry()).collect::<Result<_, _>>()?;
            Message::ReadHelpResp { read_id, symbol, plain }
        }
        7 => Message::ReadHelpDone { read_id: r.read_id()? },
        8 => Message::EncodedUpTo { server: r.id()?, tags: r.tags()? },
        9 => Message::Displaced { entry: r.entry()?, encoded: r.tags()? },
        value => return Err(WireError::UnknownVariant { what: "message", value }),
    })
}

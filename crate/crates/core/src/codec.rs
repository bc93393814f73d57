//! Canonical byte encoding shared by the simulator, the socket transport and
//! the dump files.
//!
//! All integers are little-endian and fixed width. Lists carry a `u32` count
//! prefix, byte strings a `u32` length prefix. A wire frame is a one-byte tag,
//! a `u32` payload length and the payload.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::types::{
    Batch, BatchId, EpochId, Procedure, ReadEntry, ReadSource, ReplicaId, TxnId, TxnRecord,
    WriteEntry, WriteOp,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("invalid tag {tag} for {what} at offset {offset}")]
    BadTag {
        what: &'static str,
        tag: u8,
        offset: usize,
    },
    #[error("invalid utf-8 in {0}")]
    Utf8(&'static str),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

#[derive(Default, Debug, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        Encoder {
            buf: Vec::with_capacity(cap),
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn count(&mut self, n: usize) -> &mut Self {
        self.u32(n as u32)
    }

    pub fn put<T: Wire + ?Sized>(&mut self, v: &T) -> &mut Self {
        v.encode(self);
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Decoder { data, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated(self.pos));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        let mut b = [0u8; 4];
        b.copy_from_slice(self.take(4)?);
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(b))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn string(&mut self, what: &'static str) -> Result<String, DecodeError> {
        String::from_utf8(self.bytes()?).map_err(|_| DecodeError::Utf8(what))
    }

    pub fn count(&mut self) -> Result<usize, DecodeError> {
        Ok(self.u32()? as usize)
    }

    pub fn get<T: Wire>(&mut self) -> Result<T, DecodeError> {
        T::decode(self)
    }

    pub fn bad_tag(&self, what: &'static str, tag: u8) -> DecodeError {
        DecodeError::BadTag {
            what,
            tag,
            offset: self.pos.saturating_sub(1),
        }
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }
}

/// Types with a canonical byte encoding.
pub trait Wire: Sized {
    fn encode(&self, enc: &mut Encoder);
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    fn from_bytes(data: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(data);
        let v = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(v)
    }
}

impl Wire for ReplicaId {
    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(ReplicaId(dec.u32()?))
    }
}

impl Wire for TxnId {
    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.rid.0).u64(self.seq);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(TxnId {
            rid: ReplicaId(dec.u32()?),
            seq: dec.u64()?,
        })
    }
}

impl Wire for EpochId {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(EpochId(dec.u64()?))
    }
}

impl Wire for BatchId {
    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.rid.0).u64(self.bid);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(BatchId {
            rid: ReplicaId(dec.u32()?),
            bid: dec.u64()?,
        })
    }
}

impl Wire for Procedure {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(self.name.as_bytes()).bytes(&self.params);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Procedure {
            name: dec.string("procedure name")?,
            params: dec.bytes()?,
        })
    }
}

impl Wire for ReadEntry {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.key);
        match self.source {
            ReadSource::Snapshot(None) => {
                enc.u8(0);
            }
            ReadSource::Snapshot(Some(e)) => {
                enc.u8(1).u64(e.0);
            }
            ReadSource::Temp(t) => {
                enc.u8(2).put(&t);
            }
            ReadSource::Declared => {
                enc.u8(3);
            }
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let key = dec.bytes()?;
        let source = match dec.u8()? {
            0 => ReadSource::Snapshot(None),
            1 => ReadSource::Snapshot(Some(EpochId(dec.u64()?))),
            2 => ReadSource::Temp(dec.get()?),
            3 => ReadSource::Declared,
            t => return Err(dec.bad_tag("read source", t)),
        };
        Ok(ReadEntry { key, source })
    }
}

impl Wire for WriteEntry {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.key);
        match &self.op {
            WriteOp::Delete => {
                enc.u8(0);
            }
            WriteOp::Put(v) => {
                enc.u8(1).bytes(v);
            }
            WriteOp::Declared => {
                enc.u8(2);
            }
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let key = dec.bytes()?;
        let op = match dec.u8()? {
            0 => WriteOp::Delete,
            1 => WriteOp::Put(dec.bytes()?),
            2 => WriteOp::Declared,
            t => return Err(dec.bad_tag("write op", t)),
        };
        Ok(WriteEntry { key, op })
    }
}

impl<T: Wire> Wire for Vec<T> {
    fn encode(&self, enc: &mut Encoder) {
        enc.count(self.len());
        for item in self {
            item.encode(enc);
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let n = dec.count()?;
        // Cap the preallocation so a corrupt count cannot exhaust memory.
        let mut out = Vec::with_capacity(n.min(dec.remaining()));
        for _ in 0..n {
            out.push(T::decode(dec)?);
        }
        Ok(out)
    }
}

impl Wire for TxnRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.tid)
            .put(&self.input)
            .put(&self.read_set)
            .put(&self.write_set);
        enc.count(self.dependencies.len());
        for d in &self.dependencies {
            enc.put(d);
        }
        enc.u64(self.client_tag);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tid = dec.get()?;
        let input = dec.get()?;
        let read_set = dec.get()?;
        let write_set = dec.get()?;
        let n = dec.count()?;
        let mut dependencies = BTreeSet::new();
        for _ in 0..n {
            dependencies.insert(dec.get::<TxnId>()?);
        }
        Ok(TxnRecord {
            tid,
            input,
            read_set,
            write_set,
            dependencies,
            client_tag: dec.u64()?,
        })
    }
}

impl Wire for Batch {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.id)
            .u8(self.hc_flag as u8)
            .put(&self.txns);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let id = dec.get()?;
        let hc_flag = match dec.u8()? {
            0 => false,
            1 => true,
            t => return Err(dec.bad_tag("hc flag", t)),
        };
        Ok(Batch {
            id,
            hc_flag,
            txns: dec.get()?,
        })
    }
}

/// Encoded size of a record, without encoding it.
pub fn record_len(r: &TxnRecord) -> usize {
    let tid = 12;
    let bytes = |b: &[u8]| 4 + b.len();
    let input = bytes(r.input.name.as_bytes()) + bytes(&r.input.params);
    let reads: usize = r
        .read_set
        .iter()
        .map(|e| {
            bytes(&e.key)
                + 1
                + match e.source {
                    ReadSource::Snapshot(Some(_)) => 8,
                    ReadSource::Temp(_) => 12,
                    _ => 0,
                }
        })
        .sum();
    let writes: usize = r
        .write_set
        .iter()
        .map(|w| {
            bytes(&w.key)
                + 1
                + match &w.op {
                    WriteOp::Put(v) => bytes(v),
                    _ => 0,
                }
        })
        .sum();
    tid + input + 4 + reads + 4 + writes + 4 + 12 * r.dependencies.len() + 8
}

/// Encoded size of an empty batch header.
pub const BATCH_HEADER_LEN: usize = 12 + 1 + 4;

/// Frame header: tag byte plus `u32` payload length.
pub const FRAME_HEADER_LEN: usize = 5;

pub fn encode_frame(tag: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits one frame off the front of `data`. Returns the tag, payload and the
/// number of bytes consumed, or `None` if the frame is incomplete.
pub fn split_frame(data: &[u8]) -> Option<(u8, &[u8], usize)> {
    if data.len() < FRAME_HEADER_LEN {
        return None;
    }
    let len = u32::from_le_bytes([data[1], data[2], data[3], data[4]]) as usize;
    let end = FRAME_HEADER_LEN + len;
    if data.len() < end {
        return None;
    }
    Some((data[0], &data[FRAME_HEADER_LEN..end], end))
}

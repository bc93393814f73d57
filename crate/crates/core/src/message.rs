//! Replica-to-replica messages and their tagged frame encoding.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::codec::{encode_frame, split_frame, DecodeError, Decoder, Encoder, Wire};
use crate::cutlog::{ConsensusMsg, CutDecision, RaftMsg};
use crate::types::{Batch, BatchId, EpochId, SharedBatch};

pub mod tag {
    pub const BATCH: u8 = 1;
    pub const ACK: u8 = 2;
    pub const POA: u8 = 3;
    pub const FETCH_REQ: u8 = 4;
    pub const FETCH_RESP: u8 = 5;
    pub const CUT_PROPOSE: u8 = 6;
    pub const VOTE_REQ: u8 = 7;
    pub const VOTE_RESP: u8 = 8;
    pub const APPEND: u8 = 9;
    pub const APPEND_RESP: u8 = 10;
    pub const PROGRESS: u8 = 11;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Batch(SharedBatch),
    Ack(BatchId),
    Poa(BatchId),
    FetchReq(BatchId),
    FetchResp(SharedBatch),
    Consensus(ConsensusMsg),
    /// Periodic gossip: latest locally committed epoch and own PoA head.
    Progress {
        committed: Option<EpochId>,
        poa_head: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dest {
    To(crate::types::ReplicaId),
    /// Every replica except the sender.
    AllPeers,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outbound {
    pub dest: Dest,
    pub msg: Message,
}

impl Outbound {
    pub fn all(msg: Message) -> Self {
        Outbound {
            dest: Dest::AllPeers,
            msg,
        }
    }

    pub fn to(rid: crate::types::ReplicaId, msg: Message) -> Self {
        Outbound {
            dest: Dest::To(rid),
            msg,
        }
    }
}

fn opt_u64(enc: &mut Encoder, v: Option<u64>) {
    enc.u64(v.unwrap_or(u64::MAX));
}

fn get_opt_u64(dec: &mut Decoder<'_>) -> Result<Option<u64>, DecodeError> {
    let v = dec.u64()?;
    Ok((v != u64::MAX).then_some(v))
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Batch(_) => tag::BATCH,
            Message::Ack(_) => tag::ACK,
            Message::Poa(_) => tag::POA,
            Message::FetchReq(_) => tag::FETCH_REQ,
            Message::FetchResp(_) => tag::FETCH_RESP,
            Message::Consensus(ConsensusMsg::Decided(_)) => tag::CUT_PROPOSE,
            Message::Consensus(ConsensusMsg::Raft(r)) => match r {
                RaftMsg::VoteReq { .. } => tag::VOTE_REQ,
                RaftMsg::VoteResp { .. } => tag::VOTE_RESP,
                RaftMsg::Append { .. } => tag::APPEND,
                RaftMsg::AppendResp { .. } => tag::APPEND_RESP,
            },
            Message::Progress { .. } => tag::PROGRESS,
        }
    }

    pub fn encode_payload(&self, enc: &mut Encoder) {
        match self {
            Message::Batch(b) | Message::FetchResp(b) => b.encode(enc),
            Message::Ack(id) | Message::Poa(id) | Message::FetchReq(id) => id.encode(enc),
            Message::Consensus(ConsensusMsg::Decided(d)) => d.encode(enc),
            Message::Consensus(ConsensusMsg::Raft(r)) => match r {
                RaftMsg::VoteReq {
                    term,
                    last_index,
                    last_term,
                } => {
                    enc.u64(*term).u64(*last_index).u64(*last_term);
                }
                RaftMsg::VoteResp { term, granted } => {
                    enc.u64(*term).u8(*granted as u8);
                }
                RaftMsg::Append {
                    term,
                    prev_index,
                    prev_term,
                    entries,
                    commit,
                } => {
                    enc.u64(*term)
                        .u64(*prev_index)
                        .u64(*prev_term)
                        .put(entries)
                        .u64(*commit);
                }
                RaftMsg::AppendResp {
                    term,
                    success,
                    last_index,
                } => {
                    enc.u64(*term).u8(*success as u8).u64(*last_index);
                }
            },
            Message::Progress {
                committed,
                poa_head,
            } => {
                opt_u64(enc, committed.map(|e| e.0));
                opt_u64(enc, *poa_head);
            }
        }
    }

    pub fn decode_payload(t: u8, payload: &[u8]) -> Result<Message, DecodeError> {
        let mut dec = Decoder::new(payload);
        let bool_of = |dec: &mut Decoder<'_>| -> Result<bool, DecodeError> {
            match dec.u8()? {
                0 => Ok(false),
                1 => Ok(true),
                b => Err(dec.bad_tag("bool", b)),
            }
        };
        let m = match t {
            tag::BATCH => Message::Batch(Arc::new(Batch::decode(&mut dec)?)),
            tag::ACK => Message::Ack(dec.get()?),
            tag::POA => Message::Poa(dec.get()?),
            tag::FETCH_REQ => Message::FetchReq(dec.get()?),
            tag::FETCH_RESP => Message::FetchResp(Arc::new(Batch::decode(&mut dec)?)),
            tag::CUT_PROPOSE => Message::Consensus(ConsensusMsg::Decided(CutDecision::decode(&mut dec)?)),
            tag::VOTE_REQ => Message::Consensus(ConsensusMsg::Raft(RaftMsg::VoteReq {
                term: dec.u64()?,
                last_index: dec.u64()?,
                last_term: dec.u64()?,
            })),
            tag::VOTE_RESP => Message::Consensus(ConsensusMsg::Raft(RaftMsg::VoteResp {
                term: dec.u64()?,
                granted: bool_of(&mut dec)?,
            })),
            tag::APPEND => Message::Consensus(ConsensusMsg::Raft(RaftMsg::Append {
                term: dec.u64()?,
                prev_index: dec.u64()?,
                prev_term: dec.u64()?,
                entries: dec.get()?,
                commit: dec.u64()?,
            })),
            tag::APPEND_RESP => Message::Consensus(ConsensusMsg::Raft(RaftMsg::AppendResp {
                term: dec.u64()?,
                success: bool_of(&mut dec)?,
                last_index: dec.u64()?,
            })),
            tag::PROGRESS => Message::Progress {
                committed: get_opt_u64(&mut dec)?.map(EpochId),
                poa_head: get_opt_u64(&mut dec)?,
            },
            other => return Err(DecodeError::BadTag {
                what: "message",
                tag: other,
                offset: 0,
            }),
        };
        dec.finish()?;
        Ok(m)
    }

    pub fn to_frame(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_payload(&mut enc);
        encode_frame(self.tag(), &enc.finish())
    }

    /// Decodes one frame from the front of `data`; `Ok(None)` if incomplete.
    pub fn from_frame(data: &[u8]) -> Result<Option<(Message, usize)>, DecodeError> {
        match split_frame(data) {
            None => Ok(None),
            Some((t, payload, used)) => Ok(Some((Message::decode_payload(t, payload)?, used))),
        }
    }

    /// Encoded frame size without building it.
    pub fn frame_len(&self) -> usize {
        let mut enc = Encoder::new();
        self.encode_payload(&mut enc);
        crate::codec::FRAME_HEADER_LEN + enc.len()
    }
}

//! Consistent cuts over the per-replica batch logs, ordered by a pluggable
//! consensus layer.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::codec::{DecodeError, Decoder, Encoder, Wire};
use crate::message::Outbound;
use crate::time::Micros;
use crate::types::{EpochId, ReplicaId};

mod raft;
mod sequencer;

pub use raft::{LogEntry, RaftConfig, RaftLite, RaftMsg, Role};
pub use sequencer::Sequencer;

/// Per-replica highest included bid; `None` means no batch yet.
pub type CutVector = Vec<Option<u64>>;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CutProposal {
    pub cut: CutVector,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CutDecision {
    pub epoch: EpochId,
    pub cut: CutVector,
}

fn encode_cut(cut: &[Option<u64>], enc: &mut Encoder) {
    enc.count(cut.len());
    for c in cut {
        enc.u64(c.map_or(u64::MAX, |b| b));
    }
}

fn decode_cut(dec: &mut Decoder<'_>) -> Result<CutVector, DecodeError> {
    let n = dec.count()?;
    let mut cut = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let v = dec.u64()?;
        cut.push(if v == u64::MAX { None } else { Some(v) });
    }
    Ok(cut)
}

// The -1 sentinel is stored as all-ones, which is the two's complement
// reading of an i64 -1.
impl Wire for CutProposal {
    fn encode(&self, enc: &mut Encoder) {
        encode_cut(&self.cut, enc);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(CutProposal {
            cut: decode_cut(dec)?,
        })
    }
}

impl Wire for CutDecision {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.epoch);
        encode_cut(&self.cut, enc);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(CutDecision {
            epoch: dec.get()?,
            cut: decode_cut(dec)?,
        })
    }
}

/// Component-wise max of two cut vectors.
pub fn cut_max(a: &[Option<u64>], b: &[Option<u64>]) -> CutVector {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x).max(*y)).collect()
}

/// `a >= b` in every component.
pub fn cut_dominates(a: &[Option<u64>], b: &[Option<u64>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x >= y)
}

/// The coordinator's proposal rule: clamp the observed PoA heads to be no
/// lower than the previous cut, and skip if nothing moved.
pub fn next_cut(prev: &[Option<u64>], poa_heads: &[Option<u64>]) -> Option<CutProposal> {
    let cut = cut_max(prev, poa_heads);
    if cut.as_slice() == prev {
        None
    } else {
        Some(CutProposal { cut })
    }
}

/// Ordering layer for cut proposals. Implementations are event driven and
/// never block.
pub trait Consensus: Send {
    fn is_leader(&self) -> bool;
    fn leader_hint(&self) -> Option<ReplicaId>;
    /// Appends a proposal. Only meaningful on the leader.
    fn submit(&mut self, now: Micros, proposal: CutProposal) -> Vec<Outbound>;
    fn handle(&mut self, now: Micros, from: ReplicaId, msg: ConsensusMsg) -> Vec<Outbound>;
    fn tick(&mut self, now: Micros) -> Vec<Outbound>;
    fn next_wake(&self) -> Option<Micros>;
    /// Newly decided proposals, in decision order.
    fn take_decided(&mut self) -> Vec<CutProposal>;
    /// Last cut in the local log, decided or not. Proposals clamp against it.
    fn last_cut(&self) -> Option<&CutVector>;
    /// True right after this replica became leader; cleared by the call.
    fn take_leadership_change(&mut self) -> bool;
    fn peer_crashed(&mut self, _rid: ReplicaId) {}
    fn peer_recovered(&mut self, _rid: ReplicaId) {}
    fn rejoin(&mut self, now: Micros);
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConsensusMsg {
    Raft(RaftMsg),
    Decided(CutDecision),
}

/// Which consensus implementation a replica runs.
#[derive(Clone, Debug, PartialEq)]
pub enum ConsensusKind {
    Raft(RaftConfig),
    Sequencer,
}

pub fn build(kind: &ConsensusKind, id: ReplicaId, n: usize, seed: u64, now: Micros) -> Box<dyn Consensus> {
    match kind {
        ConsensusKind::Raft(cfg) => Box::new(RaftLite::new(id, n, cfg.clone(), seed, now)),
        ConsensusKind::Sequencer => Box::new(Sequencer::new(id, n)),
    }
}

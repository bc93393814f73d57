//! Fixed single sequencer at replica 0. Decides instantly and broadcasts.
//! For tests; it does not survive a sequencer crash.

use alloc::vec::Vec;

use super::{Consensus, ConsensusMsg, CutDecision, CutProposal, CutVector};
use crate::message::{Dest, Message, Outbound};
use crate::time::Micros;
use crate::types::{EpochId, ReplicaId};

pub struct Sequencer {
    id: ReplicaId,
    next_epoch: u64,
    last: Option<CutVector>,
    decided: Vec<CutProposal>,
    announced: bool,
}

impl Sequencer {
    pub const LEADER: ReplicaId = ReplicaId(0);

    pub fn new(id: ReplicaId, _n: usize) -> Self {
        Sequencer {
            id,
            next_epoch: 0,
            last: None,
            decided: Vec::new(),
            announced: false,
        }
    }
}

impl Consensus for Sequencer {
    fn is_leader(&self) -> bool {
        self.id == Self::LEADER
    }

    fn leader_hint(&self) -> Option<ReplicaId> {
        Some(Self::LEADER)
    }

    fn submit(&mut self, _now: Micros, proposal: CutProposal) -> Vec<Outbound> {
        if !self.is_leader() {
            return Vec::new();
        }
        let d = CutDecision {
            epoch: EpochId(self.next_epoch),
            cut: proposal.cut.clone(),
        };
        self.next_epoch += 1;
        self.last = Some(proposal.cut.clone());
        self.decided.push(proposal);
        alloc::vec![Outbound {
            dest: Dest::AllPeers,
            msg: Message::Consensus(ConsensusMsg::Decided(d)),
        }]
    }

    fn handle(&mut self, _now: Micros, _from: ReplicaId, msg: ConsensusMsg) -> Vec<Outbound> {
        if let ConsensusMsg::Decided(d) = msg {
            assert_eq!(d.epoch.0, self.next_epoch, "sequencer decisions arrive in order");
            self.next_epoch += 1;
            self.last = Some(d.cut.clone());
            self.decided.push(CutProposal { cut: d.cut });
        }
        Vec::new()
    }

    fn tick(&mut self, _now: Micros) -> Vec<Outbound> {
        Vec::new()
    }

    fn next_wake(&self) -> Option<Micros> {
        None
    }

    fn take_decided(&mut self) -> Vec<CutProposal> {
        core::mem::take(&mut self.decided)
    }

    fn last_cut(&self) -> Option<&CutVector> {
        self.last.as_ref()
    }

    fn take_leadership_change(&mut self) -> bool {
        let first = self.is_leader() && !self.announced;
        self.announced = true;
        first
    }

    fn rejoin(&mut self, _now: Micros) {}
}

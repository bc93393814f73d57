//! A small Raft: elections with randomized timeouts, one sequential log of
//! cut proposals, no compaction and no membership changes.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::{Consensus, ConsensusMsg, CutProposal, CutVector};
use crate::codec::{DecodeError, Decoder, Encoder, Wire};
use crate::message::{Dest, Message, Outbound};
use crate::time::Micros;
use crate::types::ReplicaId;

#[derive(Clone, Debug, PartialEq)]
pub struct RaftConfig {
    pub heartbeat: Micros,
    pub election_min: Micros,
    pub election_max: Micros,
    /// How long the leader waits for every live follower before committing
    /// on a bare majority.
    pub ack_wait: Micros,
}

impl Default for RaftConfig {
    fn default() -> Self {
        RaftConfig {
            heartbeat: Micros::from_ms(400),
            election_min: Micros::from_ms(800),
            election_max: Micros::from_ms(1200),
            ack_wait: Micros::from_ms(50),
        }
    }
}

/// `cut == None` is the no-op a new leader appends to commit older entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub term: u64,
    pub cut: Option<CutProposal>,
}

impl Wire for LogEntry {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.term);
        match &self.cut {
            None => {
                enc.u8(0);
            }
            Some(c) => {
                enc.u8(1).put(c);
            }
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let term = dec.u64()?;
        let cut = match dec.u8()? {
            0 => None,
            1 => Some(dec.get()?),
            t => return Err(dec.bad_tag("log entry", t)),
        };
        Ok(LogEntry { term, cut })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RaftMsg {
    VoteReq {
        term: u64,
        last_index: u64,
        last_term: u64,
    },
    VoteResp {
        term: u64,
        granted: bool,
    },
    /// Log indices are 1-based; 0 is the empty prefix.
    Append {
        term: u64,
        prev_index: u64,
        prev_term: u64,
        entries: Vec<LogEntry>,
        commit: u64,
    },
    AppendResp {
        term: u64,
        success: bool,
        /// On success the follower's match index, otherwise a hint for where
        /// the leader should retry.
        last_index: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

pub struct RaftLite {
    id: ReplicaId,
    n: usize,
    cfg: RaftConfig,
    rng: ChaCha8Rng,
    term: u64,
    voted_for: Option<ReplicaId>,
    log: Vec<LogEntry>,
    commit: usize,
    applied: usize,
    role: Role,
    leader: Option<ReplicaId>,
    election_deadline: Micros,
    votes: BTreeSet<ReplicaId>,
    next_index: Vec<usize>,
    match_index: Vec<usize>,
    appended_at: Vec<Micros>,
    last_sent: Vec<Micros>,
    removed: BTreeSet<ReplicaId>,
    became_leader: bool,
}

impl RaftLite {
    pub fn new(id: ReplicaId, n: usize, cfg: RaftConfig, seed: u64, now: Micros) -> Self {
        assert!(cfg.election_min > cfg.heartbeat, "election timeout must exceed heartbeat");
        assert!(cfg.election_max >= cfg.election_min);
        let mut r = RaftLite {
            id,
            n,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (0x5241_4654 + id.0 as u64)),
            term: 0,
            voted_for: None,
            log: Vec::new(),
            commit: 0,
            applied: 0,
            role: Role::Follower,
            leader: None,
            election_deadline: Micros::ZERO,
            votes: BTreeSet::new(),
            next_index: vec![1; n],
            match_index: vec![0; n],
            appended_at: Vec::new(),
            last_sent: vec![Micros::ZERO; n],
            removed: BTreeSet::new(),
            became_leader: false,
        };
        r.reset_election(now);
        r
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn commit_index(&self) -> usize {
        self.commit
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    fn majority(&self) -> usize {
        self.n / 2 + 1
    }

    fn last_term(&self) -> u64 {
        self.log.last().map_or(0, |e| e.term)
    }

    fn term_at(&self, index: usize) -> u64 {
        if index == 0 {
            0
        } else {
            self.log[index - 1].term
        }
    }

    fn reset_election(&mut self, now: Micros) {
        let span = self.cfg.election_max.0 - self.cfg.election_min.0;
        let jitter = if span == 0 {
            0
        } else {
            self.rng.next_u64() % (span + 1)
        };
        self.election_deadline = now + Micros(self.cfg.election_min.0 + jitter);
    }

    fn send(&self, to: ReplicaId, m: RaftMsg) -> Outbound {
        Outbound {
            dest: Dest::To(to),
            msg: Message::Consensus(ConsensusMsg::Raft(m)),
        }
    }

    fn peers(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        (0..self.n as u32).map(ReplicaId).filter(move |r| *r != self.id)
    }

    fn step_down(&mut self, term: u64, now: Micros) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
        }
        if self.role != Role::Follower {
            self.role = Role::Follower;
            self.reset_election(now);
        }
        self.votes.clear();
    }

    fn start_election(&mut self, now: Micros) -> Vec<Outbound> {
        self.term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.leader = None;
        self.votes.clear();
        self.votes.insert(self.id);
        self.reset_election(now);
        if self.votes.len() >= self.majority() {
            return self.become_leader(now);
        }
        let req = RaftMsg::VoteReq {
            term: self.term,
            last_index: self.log.len() as u64,
            last_term: self.last_term(),
        };
        self.peers().map(|p| self.send(p, req.clone())).collect()
    }

    fn become_leader(&mut self, now: Micros) -> Vec<Outbound> {
        self.role = Role::Leader;
        self.leader = Some(self.id);
        self.became_leader = true;
        self.push_entry(now, None);
        let next = self.log.len();
        for i in 0..self.n {
            self.next_index[i] = next;
            self.match_index[i] = 0;
        }
        self.match_index[self.id.index()] = self.log.len();
        let mut out = self.broadcast_append(now);
        out.extend(self.advance_commit(now));
        out
    }

    fn push_entry(&mut self, now: Micros, cut: Option<CutProposal>) {
        self.log.push(LogEntry {
            term: self.term,
            cut,
        });
        self.appended_at.resize(self.log.len() - 1, now);
        self.appended_at.push(now);
        self.match_index[self.id.index()] = self.log.len();
    }

    fn append_to(&mut self, peer: ReplicaId, now: Micros) -> Outbound {
        let p = peer.index();
        let next = self.next_index[p].clamp(1, self.log.len() + 1);
        let prev_index = next - 1;
        let entries = self.log[prev_index..].to_vec();
        self.next_index[p] = self.log.len() + 1;
        self.last_sent[p] = now;
        self.send(
            peer,
            RaftMsg::Append {
                term: self.term,
                prev_index: prev_index as u64,
                prev_term: self.term_at(prev_index),
                entries,
                commit: self.commit as u64,
            },
        )
    }

    fn broadcast_append(&mut self, now: Micros) -> Vec<Outbound> {
        let peers: Vec<ReplicaId> = self.peers().collect();
        peers.into_iter().map(|p| self.append_to(p, now)).collect()
    }

    fn advance_commit(&mut self, now: Micros) -> Vec<Outbound> {
        if self.role != Role::Leader {
            return Vec::new();
        }
        let mut new_commit = self.commit;
        for idx in self.commit + 1..=self.log.len() {
            if self.log[idx - 1].term != self.term {
                continue;
            }
            let mut acked = 0;
            let mut all_live = true;
            for r in 0..self.n {
                if self.match_index[r] >= idx {
                    acked += 1;
                } else if !self.removed.contains(&ReplicaId(r as u32)) {
                    all_live = false;
                }
            }
            let waited = now >= self.appended_at[idx - 1] + self.cfg.ack_wait;
            if acked >= self.majority() && (all_live || waited) {
                new_commit = idx;
            }
        }
        if new_commit > self.commit {
            self.commit = new_commit;
            // Tell followers right away instead of waiting for the next
            // proposal or heartbeat.
            return self.broadcast_append(now);
        }
        Vec::new()
    }

    fn on_vote_req(
        &mut self,
        now: Micros,
        from: ReplicaId,
        term: u64,
        last_index: u64,
        last_term: u64,
    ) -> Vec<Outbound> {
        if term > self.term {
            self.step_down(term, now);
        }
        let up_to_date = last_term > self.last_term()
            || (last_term == self.last_term() && last_index >= self.log.len() as u64);
        let granted = term == self.term
            && self.voted_for.is_none_or(|v| v == from)
            && up_to_date;
        if granted {
            self.voted_for = Some(from);
            self.reset_election(now);
        }
        vec![self.send(
            from,
            RaftMsg::VoteResp {
                term: self.term,
                granted,
            },
        )]
    }

    fn on_vote_resp(&mut self, now: Micros, from: ReplicaId, term: u64, granted: bool) -> Vec<Outbound> {
        if term > self.term {
            self.step_down(term, now);
            return Vec::new();
        }
        if self.role == Role::Candidate && term == self.term && granted {
            self.votes.insert(from);
            if self.votes.len() >= self.majority() {
                return self.become_leader(now);
            }
        }
        Vec::new()
    }

    fn on_append(
        &mut self,
        now: Micros,
        from: ReplicaId,
        term: u64,
        prev_index: u64,
        prev_term: u64,
        entries: Vec<LogEntry>,
        commit: u64,
    ) -> Vec<Outbound> {
        if term < self.term {
            return vec![self.send(
                from,
                RaftMsg::AppendResp {
                    term: self.term,
                    success: false,
                    last_index: self.log.len() as u64,
                },
            )];
        }
        if term > self.term || self.role != Role::Follower {
            self.step_down(term, now);
        }
        self.leader = Some(from);
        self.reset_election(now);
        let prev = prev_index as usize;
        if prev > self.log.len() || self.term_at(prev) != prev_term {
            let hint = self.log.len().min(prev.saturating_sub(1));
            return vec![self.send(
                from,
                RaftMsg::AppendResp {
                    term: self.term,
                    success: false,
                    last_index: hint as u64,
                },
            )];
        }
        let matched = prev + entries.len();
        for (k, e) in entries.into_iter().enumerate() {
            let idx = prev + 1 + k;
            if idx <= self.log.len() {
                if self.log[idx - 1].term == e.term {
                    continue;
                }
                debug_assert!(idx > self.commit, "committed entry overwritten");
                self.log.truncate(idx - 1);
            }
            self.log.push(e);
        }
        // Entries past what the leader sent may be stale leftovers; only the
        // prefix the leader vouched for counts as matched.
        let vouched = (commit as usize).min(matched);
        if vouched > self.commit {
            self.commit = vouched;
        }
        vec![self.send(
            from,
            RaftMsg::AppendResp {
                term: self.term,
                success: true,
                last_index: matched as u64,
            },
        )]
    }

    fn on_append_resp(
        &mut self,
        now: Micros,
        from: ReplicaId,
        term: u64,
        success: bool,
        last_index: u64,
    ) -> Vec<Outbound> {
        if term > self.term {
            self.step_down(term, now);
            return Vec::new();
        }
        if self.role != Role::Leader || term != self.term {
            return Vec::new();
        }
        let p = from.index();
        let last = (last_index as usize).min(self.log.len());
        if success {
            self.match_index[p] = self.match_index[p].max(last);
            self.advance_commit(now)
        } else {
            self.next_index[p] = (last + 1).min(self.next_index[p]).max(1);
            vec![self.append_to(from, now)]
        }
    }
}

impl Consensus for RaftLite {
    fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    fn leader_hint(&self) -> Option<ReplicaId> {
        self.leader
    }

    fn submit(&mut self, now: Micros, proposal: CutProposal) -> Vec<Outbound> {
        if self.role != Role::Leader {
            return Vec::new();
        }
        self.push_entry(now, Some(proposal));
        let mut out = self.broadcast_append(now);
        out.extend(self.advance_commit(now));
        out
    }

    fn handle(&mut self, now: Micros, from: ReplicaId, msg: ConsensusMsg) -> Vec<Outbound> {
        let ConsensusMsg::Raft(m) = msg else {
            return Vec::new();
        };
        match m {
            RaftMsg::VoteReq {
                term,
                last_index,
                last_term,
            } => self.on_vote_req(now, from, term, last_index, last_term),
            RaftMsg::VoteResp { term, granted } => self.on_vote_resp(now, from, term, granted),
            RaftMsg::Append {
                term,
                prev_index,
                prev_term,
                entries,
                commit,
            } => self.on_append(now, from, term, prev_index, prev_term, entries, commit),
            RaftMsg::AppendResp {
                term,
                success,
                last_index,
            } => self.on_append_resp(now, from, term, success, last_index),
        }
    }

    fn tick(&mut self, now: Micros) -> Vec<Outbound> {
        match self.role {
            Role::Leader => {
                let mut out = self.advance_commit(now);
                let due: Vec<ReplicaId> = self
                    .peers()
                    .filter(|p| now >= self.last_sent[p.index()] + self.cfg.heartbeat)
                    .collect();
                for p in due {
                    out.push(self.append_to(p, now));
                }
                out
            }
            _ if now >= self.election_deadline => self.start_election(now),
            _ => Vec::new(),
        }
    }

    fn next_wake(&self) -> Option<Micros> {
        match self.role {
            Role::Leader => {
                let hb = self
                    .peers()
                    .map(|p| self.last_sent[p.index()] + self.cfg.heartbeat)
                    .min();
                // Only entries already holding a majority can be committed by
                // the ack-wait timer.
                let ack = (self.commit + 1..=self.log.len())
                    .filter(|&idx| {
                        self.log[idx - 1].term == self.term
                            && self.match_index.iter().filter(|&&m| m >= idx).count() >= self.majority()
                    })
                    .map(|idx| self.appended_at[idx - 1] + self.cfg.ack_wait)
                    .min();
                match (hb, ack) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                }
            }
            _ => Some(self.election_deadline),
        }
    }

    fn take_decided(&mut self) -> Vec<CutProposal> {
        let mut out = Vec::new();
        while self.applied < self.commit {
            if let Some(c) = &self.log[self.applied].cut {
                out.push(c.clone());
            }
            self.applied += 1;
        }
        out
    }

    fn last_cut(&self) -> Option<&CutVector> {
        self.log.iter().rev().find_map(|e| e.cut.as_ref().map(|c| &c.cut))
    }

    fn take_leadership_change(&mut self) -> bool {
        core::mem::take(&mut self.became_leader)
    }

    fn peer_crashed(&mut self, rid: ReplicaId) {
        self.removed.insert(rid);
    }

    fn peer_recovered(&mut self, rid: ReplicaId) {
        self.removed.remove(&rid);
    }

    fn rejoin(&mut self, now: Micros) {
        self.reset_election(now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::VecDeque;

    struct Net {
        nodes: Vec<RaftLite>,
        down: BTreeSet<usize>,
        queue: VecDeque<(ReplicaId, ReplicaId, RaftMsg)>,
    }

    impl Net {
        fn new(n: usize) -> Self {
            Net {
                nodes: (0..n)
                    .map(|i| RaftLite::new(ReplicaId(i as u32), n, RaftConfig::default(), 3, Micros::ZERO))
                    .collect(),
                down: BTreeSet::new(),
                queue: VecDeque::new(),
            }
        }

        fn push(&mut self, from: usize, out: Vec<Outbound>) {
            for o in out {
                let Dest::To(to) = o.dest else { panic!() };
                let Message::Consensus(ConsensusMsg::Raft(m)) = o.msg else { panic!() };
                self.queue.push_back((ReplicaId(from as u32), to, m));
            }
        }

        // Zero-latency delivery, then time advances in 1 ms steps.
        fn run_until(&mut self, t0: u64, t1: u64) {
            for ms in t0..t1 {
                let now = Micros::from_ms(ms);
                for i in 0..self.nodes.len() {
                    if !self.down.contains(&i) {
                        let out = self.nodes[i].tick(now);
                        self.push(i, out);
                    }
                }
                while let Some((from, to, m)) = self.queue.pop_front() {
                    if self.down.contains(&to.index()) {
                        continue;
                    }
                    let out = self.nodes[to.index()].handle(now, from, ConsensusMsg::Raft(m));
                    self.push(to.index(), out);
                }
            }
        }

        fn leader(&self) -> Option<usize> {
            (0..self.nodes.len()).find(|i| !self.down.contains(i) && self.nodes[*i].is_leader())
        }
    }

    fn cut(v: u64) -> CutProposal {
        CutProposal {
            cut: vec![Some(v)],
        }
    }

    #[test]
    fn elects_one_leader_and_replicates() {
        let mut net = Net::new(5);
        net.run_until(0, 1500);
        let l = net.leader().expect("leader elected");
        let leaders = (0..5).filter(|i| net.nodes[*i].is_leader()).count();
        assert_eq!(leaders, 1);
        for v in 0..10 {
            let out = net.nodes[l].submit(Micros::from_ms(1500), cut(v));
            net.push(l, out);
        }
        net.run_until(1500, 1600);
        for node in &mut net.nodes {
            let d = node.take_decided();
            assert_eq!(d, (0..10).map(cut).collect::<Vec<_>>());
        }
    }

    #[test]
    fn failover_preserves_decided_prefix() {
        let mut net = Net::new(5);
        net.run_until(0, 1500);
        let l = net.leader().unwrap();
        for v in 0..5 {
            let out = net.nodes[l].submit(Micros::from_ms(1500), cut(v));
            net.push(l, out);
        }
        net.run_until(1500, 1510);
        net.down.insert(l);
        net.run_until(1510, 3000);
        let l2 = net.leader().expect("new leader");
        assert_ne!(l, l2);
        let out = net.nodes[l2].submit(Micros::from_ms(3000), cut(5));
        net.push(l2, out);
        net.run_until(3000, 3100);
        for (i, node) in net.nodes.iter_mut().enumerate() {
            if i != l {
                assert_eq!(node.take_decided(), (0..6).map(cut).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn commit_waits_for_all_live_then_majority() {
        let mut net = Net::new(3);
        net.run_until(0, 1500);
        let l = net.leader().unwrap();
        let other = (0..3).find(|i| *i != l).unwrap();
        net.down.insert(other);
        let out = net.nodes[l].submit(Micros::from_ms(1500), cut(1));
        net.push(l, out);
        net.run_until(1500, 1540);
        assert!(net.nodes[l].take_decided().is_empty(), "still waiting for the slow follower");
        net.run_until(1540, 1560);
        assert_eq!(net.nodes[l].take_decided(), vec![cut(1)]);

        net.nodes[l].peer_crashed(ReplicaId(other as u32));
        let out = net.nodes[l].submit(Micros::from_ms(1560), cut(2));
        net.push(l, out);
        net.run_until(1560, 1561);
        assert_eq!(net.nodes[l].take_decided(), vec![cut(2)]);
    }
}

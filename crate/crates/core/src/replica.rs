//! One replica as an event-driven state machine.
//!
//! Work happens atomically at the instant of the input that triggers it. The
//! cost model only decides when the next piece of work on the same resource
//! may start, and when its results leave the replica. The optimistic executor
//! and the commit pipeline are separate resources, so execution of new
//! transactions overlaps with committing old epochs.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::commit::{
    run_epoch, CommitAck, CommitParams, EpochCommitReport, EpochRecord, GcState, HcConfig, HcController,
};
use crate::cutlog::{self, next_cut, Consensus, ConsensusKind, CutDecision, CutVector};
use crate::dissemination::{AckQuorum, DissemConfig, LogView};
use crate::message::{Message, Outbound};
use crate::occ::{ExecError, ExecMode, Executor, ExecutorConfig};
use crate::procedure::{ProcError, Registry};
use crate::storage::{ReplicaStore, SnapshotStore};
use crate::time::Micros;
use crate::types::{EpochId, Procedure, ReplicaId, SharedBatch};

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaConfig {
    pub n: usize,
    pub f: usize,
    pub exec: ExecutorConfig,
    pub ack_quorum: AckQuorum,
    pub fetch_retry: Micros,
    pub consensus: ConsensusKind,
    pub epoch_interval: Micros,
    pub progress_interval: Micros,
    pub commit: CommitParams,
    pub hc: HcConfig,
    /// Reference mode: a new own batch is only cut once every earlier own
    /// batch has committed.
    pub sync_broadcast: bool,
    pub gc: bool,
}

impl ReplicaConfig {
    pub fn new(n: usize, f: usize) -> Self {
        ReplicaConfig {
            n,
            f,
            exec: ExecutorConfig::default(),
            ack_quorum: AckQuorum::default(),
            fetch_retry: Micros::from_ms(100),
            consensus: ConsensusKind::Raft(Default::default()),
            epoch_interval: Micros::from_ms(15),
            progress_interval: Micros::from_ms(100),
            commit: CommitParams::default(),
            hc: HcConfig::default(),
            sync_broadcast: false,
            gc: true,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Input {
    Client { input: Procedure, tag: u64 },
    Deliver { from: ReplicaId, msg: Message },
    /// Timer wake-up; see [`Replica::next_wake`].
    Tick,
    PeerCrashed(ReplicaId),
    PeerRecovered(ReplicaId),
    /// Back after a crash. State survived; timers and peers did not wait.
    Rejoin,
}

#[derive(Clone, Debug)]
pub enum Output {
    Send(Outbound),
    Ack(CommitAck),
    /// The procedure itself failed; nothing was recorded.
    Rejected { tag: u64, error: ProcError },
    Epoch(Box<(EpochCommitReport, EpochRecord)>),
    Decided(CutDecision),
}

/// An output and the virtual time it leaves the replica.
#[derive(Clone, Debug)]
pub struct Timed {
    pub at: Micros,
    pub out: Output,
}

pub struct Replica {
    id: ReplicaId,
    cfg: ReplicaConfig,
    registry: Registry,
    store: ReplicaStore,
    exec: Executor,
    log: LogView,
    consensus: Box<dyn Consensus>,
    hc: HcController,
    gc: GcState,
    queue: VecDeque<(Procedure, u64)>,
    decided_epochs: u64,
    decisions: VecDeque<CutDecision>,
    exec_free: Micros,
    commit_free: Micros,
    next_propose: Micros,
    next_progress: Micros,
    committed: Option<EpochId>,
    /// The head decision is waiting for fetched batches.
    gather_blocked: bool,
    stats: ReplicaStats,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplicaStats {
    pub executed: u64,
    pub deferred: u64,
    pub proposals: u64,
    pub epochs: u64,
    pub batches: u64,
}

impl Replica {
    pub fn new(id: ReplicaId, cfg: ReplicaConfig, initial: SnapshotStore, seed: u64, now: Micros) -> Self {
        assert!(cfg.n >= 2 * cfg.f + 1, "need n >= 2f + 1");
        let log = LogView::new(
            id,
            DissemConfig {
                n: cfg.n,
                f: cfg.f,
                ack_quorum: cfg.ack_quorum,
                fetch_retry: cfg.fetch_retry,
            },
        );
        Replica {
            id,
            registry: Registry::with_builtins(),
            store: ReplicaStore::new(id, initial),
            exec: Executor::new(id, cfg.exec.clone()),
            log,
            consensus: cutlog::build(&cfg.consensus, id, cfg.n, seed, now),
            hc: HcController::new(cfg.hc.clone()),
            gc: GcState::new(cfg.n),
            queue: VecDeque::new(),
            decided_epochs: 0,
            decisions: VecDeque::new(),
            exec_free: now,
            commit_free: now,
            next_propose: now + cfg.epoch_interval,
            next_progress: now + cfg.progress_interval,
            committed: None,
            gather_blocked: false,
            stats: ReplicaStats::default(),
            cfg,
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn snapshot(&self) -> &SnapshotStore {
        &self.store.snapshot
    }

    pub fn log(&self) -> &LogView {
        &self.log
    }

    pub fn is_leader(&self) -> bool {
        self.consensus.is_leader()
    }

    pub fn mode(&self) -> ExecMode {
        self.exec.mode()
    }

    pub fn committed_epoch(&self) -> Option<EpochId> {
        self.committed
    }

    pub fn stats(&self) -> &ReplicaStats {
        &self.stats
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    /// Handles one input at `now` and runs whatever work became possible.
    pub fn step(&mut self, now: Micros, input: Input) -> Vec<Timed> {
        let mut out = Vec::new();
        match input {
            Input::Client { input, tag } => self.queue.push_back((input, tag)),
            Input::Deliver { from, msg } => self.deliver(now, from, msg, &mut out),
            Input::Tick => {}
            Input::PeerCrashed(r) => self.consensus.peer_crashed(r),
            Input::PeerRecovered(r) => self.consensus.peer_recovered(r),
            Input::Rejoin => self.rejoin(now, &mut out),
        }
        self.run(now, &mut out);
        out
    }

    /// Earliest time something is due, if anything is.
    pub fn next_wake(&self) -> Option<Micros> {
        let mut w = vec![self.next_progress];
        if self.consensus.is_leader() {
            w.push(self.next_propose);
        }
        if !self.queue.is_empty() && !self.exec.batch_full() {
            w.push(self.exec_free);
        }
        if !self.decisions.is_empty() && !self.gather_blocked {
            w.push(self.commit_free);
        }
        if !self.sync_blocked() {
            w.extend(self.exec.cut_deadline());
        }
        w.extend(self.consensus.next_wake());
        w.extend(self.log.next_fetch_deadline());
        w.into_iter().min()
    }

    fn send(now: Micros, out: &mut Vec<Timed>, msgs: Vec<Outbound>) {
        out.extend(msgs.into_iter().map(|m| Timed {
            at: now,
            out: Output::Send(m),
        }));
    }

    fn deliver(&mut self, now: Micros, from: ReplicaId, msg: Message, out: &mut Vec<Timed>) {
        let msgs = match msg {
            Message::Batch(b) => {
                self.gather_blocked = false;
                self.log.on_batch_received(b)
            }
            Message::Ack(id) => self.log.on_ack(id, from),
            Message::Poa(id) => self.log.on_poa(id, now),
            Message::FetchReq(id) => self.log.on_fetch_request(id, from),
            Message::FetchResp(b) => {
                self.gather_blocked = false;
                self.log.on_fetch_response(b);
                Vec::new()
            }
            Message::Consensus(m) => self.consensus.handle(now, from, m),
            Message::Progress { committed, poa_head } => {
                self.gc.report(from, committed);
                self.log.on_poa_head(from, poa_head);
                Vec::new()
            }
        };
        Self::send(now, out, msgs);
    }

    fn rejoin(&mut self, now: Micros, out: &mut Vec<Timed>) {
        self.consensus.rejoin(now);
        let fetches = self.log.restart_fetches(now);
        Self::send(now, out, fetches);
        for b in self.log.own_unacked() {
            Self::send(now, out, vec![Outbound::all(Message::Batch(b))]);
        }
        self.exec_free = self.exec_free.max(now);
        self.commit_free = self.commit_free.max(now);
        self.next_propose = now + self.cfg.epoch_interval;
        self.next_progress = now;
    }

    fn run(&mut self, now: Micros, out: &mut Vec<Timed>) {
        let msgs = self.consensus.tick(now);
        Self::send(now, out, msgs);
        let msgs = self.log.tick(now);
        Self::send(now, out, msgs);
        self.collect_decisions(out, now);
        self.coordinate(now, out);
        self.commit(now, out);
        self.execute(now, out);
        self.cut_batch(now, out);
        if now >= self.next_progress {
            self.next_progress = now + self.cfg.progress_interval;
            let poa_head = self.log.poa_heads()[self.id.index()];
            Self::send(
                now,
                out,
                vec![Outbound::all(Message::Progress {
                    committed: self.committed,
                    poa_head,
                })],
            );
            self.garbage_collect();
        }
    }

    fn collect_decisions(&mut self, out: &mut Vec<Timed>, now: Micros) {
        for p in self.consensus.take_decided() {
            let d = CutDecision {
                epoch: EpochId(self.decided_epochs),
                cut: p.cut,
            };
            self.decided_epochs += 1;
            out.push(Timed {
                at: now,
                out: Output::Decided(d.clone()),
            });
            self.decisions.push_back(d);
        }
    }

    fn coordinate(&mut self, now: Micros, out: &mut Vec<Timed>) {
        let fresh = self.consensus.take_leadership_change();
        if !self.consensus.is_leader() || !(fresh || now >= self.next_propose) {
            return;
        }
        self.next_propose = now + self.cfg.epoch_interval;
        let prev: CutVector = self.consensus.last_cut().cloned().unwrap_or_else(|| vec![None; self.cfg.n]);
        if let Some(p) = next_cut(&prev, self.log.poa_heads()) {
            self.stats.proposals += 1;
            let msgs = self.consensus.submit(now, p);
            Self::send(now, out, msgs);
            self.collect_decisions(out, now);
        }
    }

    fn commit(&mut self, now: Micros, out: &mut Vec<Timed>) {
        while now >= self.commit_free {
            let Some(d) = self.decisions.front() else { return };
            let batches = match self.log.gather(&d.cut, now) {
                Ok(b) => b,
                Err((_, fetches)) => {
                    self.gather_blocked = true;
                    Self::send(now, out, fetches);
                    return;
                }
            };
            let d = self.decisions.pop_front().expect("front");
            let outcome = run_epoch(&mut self.store, &self.registry, &self.cfg.commit, &d, batches);
            self.log.mark_committed(&d.cut);
            self.committed = Some(d.epoch);
            self.gc.record_cut(d.epoch, d.cut.clone());
            self.gc.report(self.id, self.committed);
            self.stats.epochs += 1;
            let done = now + outcome.report.busy();
            self.commit_free = done;
            for ack in outcome.acks.into_iter().filter(|a| a.tid.rid == self.id) {
                out.push(Timed {
                    at: done,
                    out: Output::Ack(ack),
                });
            }
            let fraction = outcome.report.normal_reexec_fraction();
            out.push(Timed {
                at: done,
                out: Output::Epoch(Box::new((outcome.report, outcome.record))),
            });
            if let Some(mode) = self.hc.update(now, fraction) {
                if let Some(b) = self.exec.set_mode(mode) {
                    self.emit_batch(b, now, out);
                }
            }
            let retry = self.exec.take_deferred();
            for t in retry.into_iter().rev() {
                self.queue.push_front(t);
            }
        }
    }

    fn execute(&mut self, now: Micros, out: &mut Vec<Timed>) {
        // A full batch is cut right away unless sync mode holds it back.
        while now >= self.exec_free && !self.exec.batch_full() {
            let Some((input, tag)) = self.queue.pop_front() else { return };
            let res = match self.exec.mode() {
                ExecMode::Normal => self.exec.execute_transaction(&mut self.store, &self.registry, input, tag, now),
                ExecMode::HighContention => self.exec.submit_probed(&self.registry, input, tag, now),
            };
            match res {
                Ok(r) => {
                    self.stats.executed += 1;
                    let ops = r.read_set.len() + r.write_set.len();
                    self.exec_free = now + self.cfg.commit.cost.execution(ops);
                }
                Err(ExecError::Procedure(error)) => {
                    self.exec_free = now + self.cfg.commit.cost.execution(0);
                    out.push(Timed {
                        at: self.exec_free,
                        out: Output::Rejected { tag, error },
                    });
                }
                Err(ExecError::Deferred { .. }) => self.stats.deferred += 1,
                Err(ExecError::WrongMode(_)) => unreachable!("mode checked above"),
            }
            self.cut_batch(now, out);
        }
    }

    fn sync_blocked(&self) -> bool {
        self.cfg.sync_broadcast
            && self.log.last_committed()[self.id.index()].map_or(0, |b| b + 1) < self.exec.next_bid()
    }

    fn cut_batch(&mut self, now: Micros, out: &mut Vec<Timed>) {
        if self.sync_blocked() {
            return;
        }
        if let Some(b) = self.exec.maybe_cut_batch(now) {
            self.emit_batch(b, now, out);
        }
    }

    fn emit_batch(&mut self, b: crate::types::Batch, now: Micros, out: &mut Vec<Timed>) {
        self.stats.batches += 1;
        let b: SharedBatch = Arc::new(b);
        let msgs = self.log.on_local_batch(b);
        Self::send(now, out, msgs);
    }

    fn garbage_collect(&mut self) {
        if !self.cfg.gc {
            return;
        }
        if let Some(cut) = self.gc.collectable() {
            self.log.truncate(&cut);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::Dest;
    use crate::procedure::increment;
    use alloc::collections::BTreeMap;

    fn counter(r: &Replica, key: &[u8]) -> i64 {
        crate::procedure::decode_counter(key, r.snapshot().get(key).map(|v| v.as_slice())).unwrap()
    }

    /// Tiny zero-latency driver: messages delivered in send order.
    struct Net {
        reps: Vec<Replica>,
        acks: Vec<CommitAck>,
        decided: BTreeMap<u64, CutVector>,
    }

    impl Net {
        fn new(n: usize, kind: ConsensusKind) -> Self {
            let mut cfg = ReplicaConfig::new(n, (n - 1) / 2);
            cfg.consensus = kind;
            let reps = (0..n)
                .map(|i| Replica::new(ReplicaId(i as u32), cfg.clone(), SnapshotStore::new(), i as u64, Micros::ZERO))
                .collect();
            Net {
                reps,
                acks: Vec::new(),
                decided: BTreeMap::new(),
            }
        }

        fn route(&mut self, now: Micros, from: usize, outs: Vec<Timed>, q: &mut VecDeque<(usize, usize, Message)>) {
            for t in outs {
                match t.out {
                    Output::Send(o) => match o.dest {
                        Dest::To(r) => q.push_back((from, r.index(), o.msg)),
                        Dest::AllPeers => {
                            for r in 0..self.reps.len() {
                                if r != from {
                                    q.push_back((from, r, o.msg.clone()));
                                }
                            }
                        }
                    },
                    Output::Ack(a) => self.acks.push(a),
                    Output::Decided(d) => {
                        let prev = self.decided.insert(d.epoch.0, d.cut.clone());
                        assert!(prev.is_none_or(|p| p == d.cut));
                    }
                    _ => {}
                }
            }
            let _ = now;
        }

        fn step(&mut self, now: Micros, r: usize, input: Input) {
            let mut q = VecDeque::new();
            let outs = self.reps[r].step(now, input);
            self.route(now, r, outs, &mut q);
            while let Some((from, to, msg)) = q.pop_front() {
                let outs = self.reps[to].step(
                    now,
                    Input::Deliver {
                        from: ReplicaId(from as u32),
                        msg,
                    },
                );
                self.route(now, to, outs, &mut q);
            }
        }

        fn run_until(&mut self, end: Micros) {
            let mut now = Micros::ZERO;
            while now < end {
                for r in 0..self.reps.len() {
                    self.step(now, r, Input::Tick);
                }
                now = now + Micros::from_ms(1);
            }
        }
    }

    #[test]
    fn counters_converge_and_every_txn_acks_once() {
        let mut net = Net::new(3, ConsensusKind::Sequencer);
        let mut tag = 0;
        for r in 0..3 {
            for i in 0..20 {
                let key = [b'k', (i % 4) as u8];
                net.step(Micros::ZERO, r, Input::Client { input: increment(&key), tag });
                tag += 1;
            }
        }
        net.run_until(Micros::from_ms(400));
        let mut tags: Vec<u64> = net.acks.iter().map(|a| a.client_tag).collect();
        tags.sort();
        assert_eq!(tags, (0..60).collect::<Vec<_>>());
        let d0 = net.reps[0].snapshot().digest();
        assert!(net.reps.iter().all(|r| r.snapshot().digest() == d0));
        let total: i64 = (0..4u8).map(|i| counter(&net.reps[0], &[b'k', i])).sum();
        assert_eq!(total, 60);
    }

    #[test]
    fn raft_cluster_elects_and_commits() {
        let mut net = Net::new(3, ConsensusKind::Raft(Default::default()));
        net.run_until(Micros::from_ms(1500));
        assert_eq!(net.reps.iter().filter(|r| r.is_leader()).count(), 1);
        for i in 0..10 {
            net.step(Micros::from_ms(1500), i % 3, Input::Client { input: increment(b"x"), tag: i as u64 });
        }
        let mut now = Micros::from_ms(1500);
        while now < Micros::from_ms(2500) {
            for r in 0..3 {
                net.step(now, r, Input::Tick);
            }
            now = now + Micros::from_ms(1);
        }
        assert_eq!(net.acks.len(), 10);
        for r in &net.reps {
            assert_eq!(counter(r, b"x"), 10);
        }
    }
}

//! Per-epoch commit: filter, apply the valid set, re-execute the rest in
//! global order, advance the epoch. Also the high-contention controller and
//! log garbage collection bookkeeping.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::conflict::{filter_conflicts, MwisConfig, SolverKind};
use crate::cutlog::{CutDecision, CutVector};
use crate::detlock::{schedule_and_execute, Plan, Reexecuted};
use crate::occ::ExecMode;
use crate::procedure::Registry;
use crate::storage::ReplicaStore;
use crate::time::Micros;
use crate::types::{EpochId, Priorities, ReplicaId, SharedBatch, TxnId, TxnRecord, WriteEntry};

/// Virtual CPU cost of protocol work, in microseconds per unit.
#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub exec_per_txn: u64,
    pub exec_per_op: u64,
    pub chain_per_txn: u64,
    pub stale_per_check: u64,
    pub graph_per_key: u64,
    pub graph_per_edge: u64,
    pub mwis_per_step: u64,
    pub apply_per_write: u64,
    pub reexec_per_txn: u64,
    pub reexec_per_op: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            exec_per_txn: 40,
            exec_per_op: 10,
            chain_per_txn: 2,
            stale_per_check: 1,
            graph_per_key: 1,
            graph_per_edge: 1,
            mwis_per_step: 1,
            apply_per_write: 1,
            reexec_per_txn: 40,
            reexec_per_op: 10,
        }
    }
}

impl CostModel {
    pub fn execution(&self, ops: usize) -> Micros {
        Micros(self.exec_per_txn + self.exec_per_op * ops as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommitParams {
    pub priorities: Priorities,
    pub solver: SolverKind,
    pub mwis: MwisConfig,
    pub cost: CostModel,
}

impl Default for CommitParams {
    fn default() -> Self {
        CommitParams {
            priorities: Priorities::default(),
            solver: SolverKind::Exact,
            mwis: MwisConfig::default(),
            cost: CostModel::default(),
        }
    }
}

/// Per-epoch accounting. Column order of the metrics CSV follows the field
/// order here.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EpochCommitReport {
    pub eid: EpochId,
    pub total: u64,
    pub valid: u64,
    pub stale: u64,
    pub conflicting: u64,
    pub re_executed: u64,
    pub chain_build: Micros,
    pub stale_check: Micros,
    pub graph_build: Micros,
    pub mwis: Micros,
    pub apply: Micros,
    pub reexec: Micros,
    /// Transactions from high-contention batches, routed straight to
    /// re-execution. `total = valid + stale + conflicting + hc_routed`.
    pub hc_routed: u64,
    pub greedy_fallbacks: u64,
}

impl EpochCommitReport {
    pub fn busy(&self) -> Micros {
        self.chain_build + self.stale_check + self.graph_build + self.mwis + self.apply + self.reexec
    }

    /// Share of optimistically executed transactions that had to re-execute.
    pub fn normal_reexec_fraction(&self) -> Option<f64> {
        let normal = self.total - self.hc_routed;
        (normal > 0).then(|| (self.stale + self.conflicting) as f64 / normal as f64)
    }
}

/// What one replica committed in one epoch: enough to replay it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochRecord {
    pub eid: EpochId,
    pub cut: CutVector,
    pub batches: Vec<SharedBatch>,
    /// Valid chains by chain id, members by seq.
    pub valid_chains: Vec<Vec<TxnId>>,
    /// Re-executed transactions in global order with what they wrote.
    pub reexec: Vec<Reexecuted>,
}

impl EpochRecord {
    pub fn find(&self, tid: TxnId) -> Option<&TxnRecord> {
        self.batches
            .iter()
            .filter(|b| b.id.rid == tid.rid)
            .flat_map(|b| b.txns.iter())
            .find(|t| t.tid == tid)
    }
}

/// Client-visible result of one committed transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitAck {
    pub tid: TxnId,
    pub client_tag: u64,
    pub writes: Vec<WriteEntry>,
    pub reexecuted: bool,
}

pub struct EpochOutcome {
    pub report: EpochCommitReport,
    pub record: EpochRecord,
    pub acks: Vec<CommitAck>,
}

/// Commits one decided epoch. `batches` are the gathered batches in
/// canonical (rid, bid) order.
///
/// Panics if the store is not at `decision.epoch` or if a re-executed
/// procedure escapes its lock set; both mean the replica can no longer be
/// trusted to stay in step with its peers.
pub fn run_epoch(
    store: &mut ReplicaStore,
    registry: &Registry,
    params: &CommitParams,
    decision: &CutDecision,
    batches: Vec<SharedBatch>,
) -> EpochOutcome {
    let eid = decision.epoch;
    assert_eq!(store.snapshot.current_eid(), eid, "epochs commit in order");
    debug_assert!(batches.windows(2).all(|w| w[0].id < w[1].id));
    let cost = &params.cost;
    let no_prior = BTreeSet::new();

    let filtered = filter_conflicts(&batches, &store.snapshot, &no_prior, params.solver, &params.mwis);
    let mut report = EpochCommitReport {
        eid,
        total: batches.iter().map(|b| b.txns.len() as u64).sum(),
        stale: filtered.stale.len() as u64,
        conflicting: filtered.conflicting.len() as u64,
        greedy_fallbacks: filtered.stats.mwis.greedy_fallbacks,
        chain_build: Micros(cost.chain_per_txn * filtered.stats.txns),
        stale_check: Micros(cost.stale_per_check * filtered.stats.stale_checks),
        graph_build: Micros(
            cost.graph_per_key * filtered.stats.graph_keys + cost.graph_per_edge * filtered.stats.graph_edges,
        ),
        mwis: Micros(cost.mwis_per_step * filtered.stats.mwis.steps),
        ..Default::default()
    };

    // Valid chains are key-disjoint, so any order gives the same state; the
    // canonical tid order keeps it byte-reproducible.
    let mut valid: Vec<&TxnRecord> = filtered.valid.iter().flat_map(|c| c.members.iter().copied()).collect();
    valid.sort_by_key(|t| t.tid);
    report.valid = valid.len() as u64;
    let mut writes = 0u64;
    for t in &valid {
        store.snapshot.apply_committed(&t.write_set, eid);
        writes += t.write_set.len() as u64;
    }
    report.apply = Micros(cost.apply_per_write * writes);

    let mut invalid: Vec<&TxnRecord> = filtered.stale.iter().chain(filtered.conflicting.iter()).copied().collect();
    let hc: Vec<&TxnRecord> = batches.iter().filter(|b| b.hc_flag).flat_map(|b| b.txns.iter()).collect();
    report.hc_routed = hc.len() as u64;
    invalid.extend(hc);
    invalid.sort_by_key(|t| params.priorities.key(t.tid));
    report.re_executed = invalid.len() as u64;

    let plan = Plan::new(invalid, registry).expect("batched procedures are registered");
    let ops: u64 = plan.sets.iter().map(|s| (s.reads.len() + s.writes.len()) as u64).sum();
    report.reexec = Micros(cost.reexec_per_txn * plan.txns.len() as u64 + cost.reexec_per_op * ops);
    let reexec = schedule_and_execute(&plan, registry, &mut store.snapshot, eid)
        .unwrap_or_else(|e| panic!("deterministic re-execution failed: {e}"));

    let mut acks: Vec<CommitAck> = valid
        .iter()
        .map(|t| CommitAck {
            tid: t.tid,
            client_tag: t.client_tag,
            writes: t.write_set.clone(),
            reexecuted: false,
        })
        .collect();
    acks.extend(plan.txns.iter().zip(&reexec).map(|(t, r)| CommitAck {
        tid: t.tid,
        client_tag: t.client_tag,
        writes: r.writes.clone(),
        reexecuted: true,
    }));

    let valid_chains = filtered
        .valid
        .iter()
        .map(|c| c.members.iter().map(|t| t.tid).collect())
        .collect();
    drop(plan);
    store.advance_epoch();

    EpochOutcome {
        report,
        record: EpochRecord {
            eid,
            cut: decision.cut.clone(),
            batches,
            valid_chains,
            reexec,
        },
        acks,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HcConfig {
    pub enabled: bool,
    pub threshold: f64,
    pub sustain: Micros,
    pub cooldown: Micros,
}

impl Default for HcConfig {
    fn default() -> Self {
        HcConfig {
            enabled: true,
            threshold: 0.5,
            sustain: Micros::from_ms(200),
            cooldown: Micros::from_ms(1000),
        }
    }
}

/// Switches to high-contention mode when the re-execution fraction stays
/// above the threshold for the sustain window, and back after the cooldown.
/// Epochs without optimistic transactions neither extend nor break a streak.
#[derive(Clone, Debug)]
pub struct HcController {
    cfg: HcConfig,
    mode: ExecMode,
    above_since: Option<Micros>,
    entered_at: Option<Micros>,
}

impl HcController {
    pub fn new(cfg: HcConfig) -> Self {
        HcController {
            cfg,
            mode: ExecMode::Normal,
            above_since: None,
            entered_at: None,
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    /// Time the current streak of high fractions started, if any.
    pub fn streak_start(&self) -> Option<Micros> {
        self.above_since
    }

    /// Feeds one epoch's fraction, observed at `now`. Returns the new mode if
    /// it changed. Only called at epoch boundaries.
    pub fn update(&mut self, now: Micros, fraction: Option<f64>) -> Option<ExecMode> {
        if !self.cfg.enabled {
            return None;
        }
        match self.mode {
            ExecMode::HighContention => {
                let since = self.entered_at.expect("entry time");
                if now.saturating_sub(since) >= self.cfg.cooldown {
                    self.mode = ExecMode::Normal;
                    self.entered_at = None;
                    self.above_since = None;
                    return Some(ExecMode::Normal);
                }
                None
            }
            ExecMode::Normal => {
                let f = fraction?;
                if f > self.cfg.threshold {
                    let start = *self.above_since.get_or_insert(now);
                    if now.saturating_sub(start) >= self.cfg.sustain {
                        self.mode = ExecMode::HighContention;
                        self.entered_at = Some(now);
                        self.above_since = None;
                        return Some(ExecMode::HighContention);
                    }
                } else {
                    self.above_since = None;
                }
                None
            }
        }
    }
}

/// Latest committed epoch reported by each replica and the cut of every
/// locally committed epoch not yet collected.
#[derive(Clone, Debug)]
pub struct GcState {
    reported: Vec<Option<EpochId>>,
    cuts: BTreeMap<EpochId, CutVector>,
}

impl GcState {
    pub fn new(n: usize) -> Self {
        GcState {
            reported: alloc::vec![None; n],
            cuts: BTreeMap::new(),
        }
    }

    pub fn record_cut(&mut self, eid: EpochId, cut: CutVector) {
        self.cuts.insert(eid, cut);
    }

    pub fn report(&mut self, rid: ReplicaId, eid: Option<EpochId>) {
        let r = &mut self.reported[rid.index()];
        *r = (*r).max(eid);
    }

    /// Highest epoch every replica has committed. Crashed replicas keep their
    /// last report, which holds the watermark back until they catch up.
    pub fn low_watermark(&self) -> Option<EpochId> {
        self.reported.iter().copied().min().flatten()
    }

    /// Cut up to which logs may be truncated, consuming the bookkeeping for
    /// epochs at or below the watermark.
    pub fn collectable(&mut self) -> Option<CutVector> {
        let w = self.low_watermark()?;
        let mut last = None;
        while let Some((&e, _)) = self.cuts.first_key_value() {
            if e > w {
                break;
            }
            last = self.cuts.pop_first().map(|(_, c)| c);
        }
        last
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedure::{add_from, encode_counter, put};
    use crate::storage::SnapshotStore;
    use crate::types::{Batch, BatchId, ReadEntry, ReadSource};
    use alloc::sync::Arc;
    use alloc::vec;
    use alloc::vec::Vec;

    fn batch(rid: u32, txns: Vec<TxnRecord>) -> SharedBatch {
        Arc::new(Batch {
            id: BatchId {
                rid: ReplicaId(rid),
                bid: 0,
            },
            txns,
            hc_flag: false,
        })
    }

    fn decision(eid: u64, n: usize) -> CutDecision {
        CutDecision {
            epoch: EpochId(eid),
            cut: vec![Some(0); n],
        }
    }

    #[test]
    fn conflict_free_epoch_applies_occ_writes() {
        let mut st = ReplicaStore::new(ReplicaId(0), SnapshotStore::new());
        let t = |rid, k: &[u8]| TxnRecord {
            tid: TxnId::new(rid, 1),
            input: put(k, b"v"),
            read_set: vec![],
            write_set: vec![WriteEntry::put(k, *b"v")],
            dependencies: BTreeSet::new(),
            client_tag: 7,
        };
        let out = run_epoch(
            &mut st,
            &Registry::with_builtins(),
            &CommitParams::default(),
            &decision(0, 2),
            vec![batch(0, vec![t(0, b"a")]), batch(1, vec![t(1, b"b")])],
        );
        assert_eq!(out.report.re_executed, 0);
        assert_eq!(out.report.valid, 2);
        assert_eq!(st.snapshot.get(b"a"), Some(&b"v".to_vec()));
        assert_eq!(st.snapshot.current_eid(), EpochId(1));
        assert_eq!(out.acks.len(), 2);
    }

    // Replica A: X <- 2. Replica B: Y <- X + 1 having read X = 1.
    fn write_skew(priorities: Priorities) -> (SnapshotStore, EpochOutcome) {
        let init = SnapshotStore::preloaded([(b"X".to_vec(), encode_counter(1)), (b"Y".to_vec(), encode_counter(0))]);
        let mut st = ReplicaStore::new(ReplicaId(0), init);
        let t1 = TxnRecord {
            tid: TxnId::new(0, 1),
            input: put(b"X", &encode_counter(2)),
            read_set: vec![],
            write_set: vec![WriteEntry::put(*b"X", encode_counter(2))],
            dependencies: BTreeSet::new(),
            client_tag: 0,
        };
        let t2 = TxnRecord {
            tid: TxnId::new(1, 1),
            input: add_from(b"X", b"Y", 1),
            read_set: vec![ReadEntry {
                key: b"X".to_vec(),
                source: ReadSource::Snapshot(None),
            }],
            write_set: vec![WriteEntry::put(*b"Y", encode_counter(2))],
            dependencies: BTreeSet::new(),
            client_tag: 0,
        };
        let params = CommitParams {
            priorities,
            ..Default::default()
        };
        let out = run_epoch(
            &mut st,
            &Registry::with_builtins(),
            &params,
            &decision(0, 2),
            vec![batch(0, vec![t1]), batch(1, vec![t2])],
        );
        (st.snapshot, out)
    }

    #[test]
    fn write_skew_is_detected_and_serialized() {
        let (snap, out) = write_skew(Priorities::default());
        assert_eq!(out.report.conflicting, 1);
        assert_eq!(out.report.re_executed, 1);
        // Tie on weight: the lower chain id (replica A) stays valid, so B
        // re-executes after it and sees X = 2.
        assert_eq!(snap.get(b"X"), Some(&encode_counter(2)));
        assert_eq!(snap.get(b"Y"), Some(&encode_counter(3)));
    }

    #[test]
    fn report_accounting_identity() {
        let (_, out) = write_skew(Priorities::new(vec![1, 0]));
        let r = out.report;
        assert_eq!(r.valid + r.stale + r.conflicting + r.hc_routed, r.total);
        assert_eq!(r.re_executed, r.stale + r.conflicting);
    }

    #[test]
    fn hc_enters_after_sustained_high_fraction() {
        let mut h = HcController::new(HcConfig::default());
        assert_eq!(h.update(Micros::from_ms(0), Some(0.6)), None);
        assert_eq!(h.update(Micros::from_ms(100), Some(0.6)), None);
        assert_eq!(h.update(Micros::from_ms(200), Some(0.6)), Some(ExecMode::HighContention));
        assert_eq!(h.update(Micros::from_ms(700), None), None);
        assert_eq!(h.update(Micros::from_ms(1200), None), Some(ExecMode::Normal));
    }

    #[test]
    fn hc_streak_broken_by_low_fraction() {
        let mut h = HcController::new(HcConfig::default());
        h.update(Micros::from_ms(0), Some(0.6));
        h.update(Micros::from_ms(100), Some(0.2));
        assert_eq!(h.update(Micros::from_ms(250), Some(0.6)), None);
        assert_eq!(h.mode(), ExecMode::Normal);
    }

    #[test]
    fn gc_watermark_is_min_report() {
        let mut g = GcState::new(3);
        for e in 0..12 {
            g.record_cut(EpochId(e), vec![Some(e); 3]);
        }
        g.report(ReplicaId(0), Some(EpochId(9)));
        g.report(ReplicaId(1), Some(EpochId(9)));
        assert_eq!(g.collectable(), None);
        g.report(ReplicaId(2), Some(EpochId(3)));
        assert_eq!(g.low_watermark(), Some(EpochId(3)));
        assert_eq!(g.collectable(), Some(vec![Some(3); 3]));
        g.report(ReplicaId(2), Some(EpochId(10)));
        assert_eq!(g.collectable(), Some(vec![Some(9); 3]));
        assert_eq!(g.collectable(), None);
    }
}

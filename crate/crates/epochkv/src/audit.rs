//! End-of-run checks over a simulation's outputs.

use std::collections::{BTreeMap, BTreeSet};

use epochkv_core::storage::SnapshotStore;
use epochkv_core::{EpochId, ReplicaId, TxnId, WriteEntry};

use crate::history::{CommitHistory, StoreDump};
use crate::oracle::{oracle_check, Violation};
use crate::sim::RunOutput;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditError {
    /// Assertions raised while the run was in progress.
    Runtime(Vec<String>),
    Oracle(Violation),
    /// A client saw a write-set other than the one committed, or an ack that
    /// names no committed transaction, or two acks for one transaction.
    Ack(String),
    /// Correct replicas ended at different epochs after the workload drained.
    Lagging { replica: ReplicaId },
}

impl std::fmt::Display for AuditError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AuditError::Runtime(v) => write!(f, "{} runtime violations, first: {}", v.len(), v[0]),
            AuditError::Oracle(v) => write!(f, "oracle: {v}"),
            AuditError::Ack(m) => write!(f, "ack audit: {m}"),
            AuditError::Lagging { replica } => write!(f, "replica {replica} did not finish the final epochs"),
        }
    }
}

impl std::error::Error for AuditError {}

impl RunOutput {
    /// The longest history held by a correct replica. Every other replica's
    /// history must be a prefix of it.
    pub fn history(&self) -> &CommitHistory {
        let i = self
            .correct_ids()
            .max_by_key(|&i| (self.histories[i].epochs.len(), std::cmp::Reverse(i)))
            .expect("at least one correct replica");
        &self.histories[i]
    }

    pub fn store_dump(&self) -> StoreDump {
        let len = self.history().epochs.len();
        StoreDump {
            replicas: self
                .correct_ids()
                .filter(|&i| self.histories[i].epochs.len() == len)
                .map(|i| (ReplicaId(i as u32), self.stores[i].clone()))
                .collect(),
        }
    }

    /// Runtime assertions, agreement, serial replay against every correct
    /// store, and the exactly-once acknowledgment audit. Correct replicas
    /// must end level when the workload drained; a run cut off mid-flight
    /// may leave some a few epochs behind, and each is then checked against
    /// the replay of its own prefix.
    pub fn verify(&self) -> Result<SnapshotStore, AuditError> {
        if !self.violations.is_empty() {
            return Err(AuditError::Runtime(self.violations.clone()));
        }
        let full = self.history();
        let len = full.epochs.len();
        if self.finished.is_some() {
            if let Some(i) = self.correct_ids().find(|&i| self.histories[i].epochs.len() != len) {
                return Err(AuditError::Lagging {
                    replica: ReplicaId(i as u32),
                });
            }
        }
        for (i, h) in self.histories.iter().enumerate() {
            let rid = ReplicaId(i as u32);
            if let Some(e) = full.epochs.iter().zip(&h.epochs).position(|(a, b)| a != b) {
                return Err(AuditError::Oracle(Violation::HistoryDivergence {
                    replica: rid,
                    eid: Some(EpochId(e as u64)),
                }));
            }
            if h.epochs.len() > len {
                return Err(AuditError::Oracle(Violation::HistoryDivergence { replica: rid, eid: None }));
            }
        }
        let flat = oracle_check(full, &self.store_dump()).map_err(AuditError::Oracle)?;
        for i in self.correct_ids().filter(|&i| self.histories[i].epochs.len() != len) {
            let dump = StoreDump {
                replicas: vec![(ReplicaId(i as u32), self.stores[i].clone())],
            };
            oracle_check(&self.histories[i], &dump).map_err(AuditError::Oracle)?;
        }
        self.audit_acks()?;
        Ok(flat)
    }

    fn audit_acks(&self) -> Result<(), AuditError> {
        let mut applied: BTreeMap<TxnId, &Vec<WriteEntry>> = BTreeMap::new();
        for e in &self.history().epochs {
            for t in e.valid.iter().flatten() {
                applied.insert(t.tid, &t.write_set);
            }
            for r in &e.reexec {
                applied.insert(r.txn.tid, &r.writes);
            }
        }
        let mut seen = BTreeSet::new();
        for a in &self.acks {
            if !seen.insert(a.ack.tid) || !seen.insert(TxnId::new(u32::MAX, a.tag)) {
                return Err(AuditError::Ack(format!("txn {} (tag {}) acknowledged twice", a.ack.tid, a.tag)));
            }
            match applied.get(&a.ack.tid) {
                None => return Err(AuditError::Ack(format!("acked txn {} is not in the history", a.ack.tid))),
                Some(w) if **w != a.ack.writes => {
                    return Err(AuditError::Ack(format!("txn {} acked with a different write-set", a.ack.tid)))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

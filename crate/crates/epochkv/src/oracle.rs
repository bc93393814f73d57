//! Serializability oracle: replays a commit history serially on one flat
//! store and checks it against what the replicas ended with.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use epochkv_core::procedure::{ProcError, ReadView, Registry};
use epochkv_core::storage::{SnapshotEntry, SnapshotStore};
use epochkv_core::{EpochId, Key, ReplicaId, TxnId, Value, WriteEntry};

use crate::history::{CommitHistory, StoreDump};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EpochOrder {
        position: usize,
        eid: EpochId,
    },
    DuplicateTxn {
        eid: EpochId,
        tid: TxnId,
    },
    /// Two valid chains of one epoch touch a common key and one writes it.
    ChainsConflict {
        eid: EpochId,
        key: Key,
        a: TxnId,
        b: TxnId,
    },
    /// A directly committed transaction does not reproduce its write-set
    /// when replayed at its serial position.
    ValidMismatch {
        eid: EpochId,
        tid: TxnId,
    },
    /// A re-executed transaction's recorded output differs from the replay.
    ReexecMismatch {
        eid: EpochId,
        tid: TxnId,
        position: usize,
    },
    StoreMismatch {
        replica: ReplicaId,
        key: Option<Key>,
    },
    HistoryDivergence {
        replica: ReplicaId,
        eid: Option<EpochId>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let key = |k: &[u8]| String::from_utf8_lossy(k).into_owned();
        match self {
            Violation::EpochOrder { position, eid } => {
                write!(f, "epoch {eid} found at history position {position}")
            }
            Violation::DuplicateTxn { eid, tid } => write!(f, "epoch {eid}: txn {tid} committed twice"),
            Violation::ChainsConflict { eid, key: k, a, b } => {
                write!(f, "epoch {eid}: valid txns {a} and {b} conflict on key {:?}", key(k))
            }
            Violation::ValidMismatch { eid, tid } => {
                write!(f, "epoch {eid}: valid txn {tid} does not replay to its write-set")
            }
            Violation::ReexecMismatch { eid, tid, position } => write!(
                f,
                "epoch {eid}: re-executed txn {tid} (position {position}) differs from serial replay"
            ),
            Violation::StoreMismatch { replica, key: Some(k) } => {
                write!(f, "replica {replica}: final store differs at key {:?}", key(k))
            }
            Violation::StoreMismatch { replica, key: None } => {
                write!(f, "replica {replica}: final store differs in epoch counter")
            }
            Violation::HistoryDivergence { replica, eid: Some(e) } => {
                write!(f, "replica {replica}: history diverges at epoch {e}")
            }
            Violation::HistoryDivergence { replica, eid: None } => {
                write!(f, "replica {replica}: history length differs")
            }
        }
    }
}

impl std::error::Error for Violation {}

struct StoreView<'a>(&'a SnapshotStore);

impl ReadView for StoreView<'_> {
    fn read(&mut self, key: &[u8]) -> Result<Option<Value>, ProcError> {
        Ok(self.0.get(key).cloned())
    }
}

fn run(reg: &Registry, store: &SnapshotStore, input: &epochkv_core::Procedure) -> Result<Vec<WriteEntry>, ProcError> {
    reg.run(input, &mut StoreView(store))
}

fn check_disjoint(e: &crate::history::EpochEntry) -> Result<(), Violation> {
    // key -> (chain index, tid) of the first writer and first reader seen.
    let mut writer: BTreeMap<&Key, (usize, TxnId)> = BTreeMap::new();
    let mut reader: BTreeMap<&Key, Vec<(usize, TxnId)>> = BTreeMap::new();
    for (ci, chain) in e.valid.iter().enumerate() {
        for t in chain {
            for w in &t.write_set {
                if let Some(&(c, other)) = writer.get(&w.key) {
                    if c != ci {
                        return Err(Violation::ChainsConflict {
                            eid: e.eid,
                            key: w.key.clone(),
                            a: other,
                            b: t.tid,
                        });
                    }
                } else {
                    writer.insert(&w.key, (ci, t.tid));
                }
            }
            for r in &t.read_set {
                reader.entry(&r.key).or_default().push((ci, t.tid));
            }
        }
    }
    for (k, readers) in reader {
        if let Some(&(wc, wt)) = writer.get(k) {
            if let Some(&(_, rt)) = readers.iter().find(|(c, _)| *c != wc) {
                return Err(Violation::ChainsConflict {
                    eid: e.eid,
                    key: k.clone(),
                    a: wt,
                    b: rt,
                });
            }
        }
    }
    Ok(())
}

/// Serial replay of `h`: per epoch, the valid set in canonical order, then
/// the re-executed set in global order. Returns the final flat store.
pub fn replay(h: &CommitHistory, reg: &Registry) -> Result<SnapshotStore, Violation> {
    let mut store = SnapshotStore::from_entries(EpochId(0), h.initial.iter().cloned());
    let mut seen: BTreeSet<TxnId> = BTreeSet::new();
    for (pos, e) in h.epochs.iter().enumerate() {
        if e.eid != EpochId(pos as u64) {
            return Err(Violation::EpochOrder { position: pos, eid: e.eid });
        }
        for t in e.valid.iter().flatten().chain(e.reexec.iter().map(|r| &r.txn)) {
            if !seen.insert(t.tid) {
                return Err(Violation::DuplicateTxn { eid: e.eid, tid: t.tid });
            }
        }
        check_disjoint(e)?;
        for t in e.valid_canonical() {
            match run(reg, &store, &t.input) {
                Ok(w) if w == t.write_set => {}
                _ => return Err(Violation::ValidMismatch { eid: e.eid, tid: t.tid }),
            }
            store.apply_committed(&t.write_set, e.eid);
        }
        for (i, r) in e.reexec.iter().enumerate() {
            let ok = match run(reg, &store, &r.txn.input) {
                Ok(w) => !r.failed && w == r.writes,
                Err(_) => r.failed && r.writes.is_empty(),
            };
            if !ok {
                return Err(Violation::ReexecMismatch {
                    eid: e.eid,
                    tid: r.txn.tid,
                    position: i,
                });
            }
            store.apply_committed(&r.writes, e.eid);
        }
        store.advance_epoch();
    }
    Ok(store)
}

fn first_difference(a: &SnapshotStore, b: &SnapshotStore) -> Option<Option<Key>> {
    let ea: Vec<SnapshotEntry> = a.entries().collect();
    let eb: Vec<SnapshotEntry> = b.entries().collect();
    for i in 0..ea.len().max(eb.len()) {
        match (ea.get(i), eb.get(i)) {
            (Some(x), Some(y)) if x == y => continue,
            (Some(x), Some(y)) => return Some(Some(x.key.clone().min(y.key.clone()))),
            (Some(x), None) | (None, Some(x)) => return Some(Some(x.key.clone())),
            (None, None) => unreachable!(),
        }
    }
    (a.current_eid() != b.current_eid()).then_some(None)
}

/// Full check: replay, then compare every dumped store to the replay.
pub fn oracle_check(h: &CommitHistory, stores: &StoreDump) -> Result<SnapshotStore, Violation> {
    let reg = Registry::with_builtins();
    let flat = replay(h, &reg)?;
    for (rid, s) in &stores.replicas {
        if let Some(key) = first_difference(&flat, s) {
            return Err(Violation::StoreMismatch { replica: *rid, key });
        }
    }
    Ok(flat)
}

/// Histories of correct replicas must be identical.
pub fn check_agreement(histories: &[(ReplicaId, &CommitHistory)]) -> Result<(), Violation> {
    let Some((_, first)) = histories.first() else { return Ok(()) };
    for (rid, h) in &histories[1..] {
        if let Some(i) = first.epochs.iter().zip(&h.epochs).position(|(a, b)| a != b) {
            return Err(Violation::HistoryDivergence {
                replica: *rid,
                eid: Some(EpochId(i as u64)),
            });
        }
        if first.epochs.len() != h.epochs.len() {
            return Err(Violation::HistoryDivergence { replica: *rid, eid: None });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::{EpochEntry, ReexecEntry};
    use epochkv_core::procedure::{encode_counter, increment, put};
    use epochkv_core::{ReadEntry, ReadSource, TxnRecord};

    fn rec(rid: u32, seq: u64, input: epochkv_core::Procedure, reads: &[&[u8]], writes: Vec<WriteEntry>) -> TxnRecord {
        TxnRecord {
            tid: TxnId::new(rid, seq),
            input,
            read_set: reads
                .iter()
                .map(|k| ReadEntry {
                    key: k.to_vec(),
                    source: ReadSource::Snapshot(None),
                })
                .collect(),
            write_set: writes,
            dependencies: BTreeSet::new(),
            client_tag: 0,
        }
    }

    fn history() -> CommitHistory {
        let mut h = CommitHistory::new(&SnapshotStore::new());
        h.epochs.push(EpochEntry {
            eid: EpochId(0),
            cut: vec![Some(0), Some(0)],
            valid: vec![
                vec![rec(0, 1, put(b"a", b"1"), &[], vec![WriteEntry::put(*b"a", *b"1")])],
                vec![rec(1, 1, increment(b"c"), &[b"c"], vec![WriteEntry::put(*b"c", encode_counter(1))])],
            ],
            reexec: vec![ReexecEntry {
                txn: rec(1, 2, increment(b"c"), &[b"c"], vec![WriteEntry::put(*b"c", encode_counter(1))]),
                writes: vec![WriteEntry::put(*b"c", encode_counter(2))],
                failed: false,
            }],
        });
        h
    }

    #[test]
    fn empty_history_passes() {
        let h = CommitHistory::default();
        let s = oracle_check(&h, &StoreDump::default()).unwrap();
        assert_eq!(s.current_eid(), EpochId(0));
    }

    #[test]
    fn good_history_passes() {
        let h = history();
        let flat = replay(&h, &Registry::with_builtins()).unwrap();
        assert_eq!(flat.get(b"c"), Some(&encode_counter(2)));
        let dump = StoreDump {
            replicas: vec![(ReplicaId(0), flat.clone())],
        };
        oracle_check(&h, &dump).unwrap();
    }

    #[test]
    fn forged_conflicting_valid_pair_is_caught() {
        let mut h = history();
        h.epochs[0].valid.push(vec![rec(
            2,
            1,
            put(b"a", b"2"),
            &[],
            vec![WriteEntry::put(*b"a", *b"2")],
        )]);
        assert!(matches!(
            replay(&h, &Registry::with_builtins()),
            Err(Violation::ChainsConflict { .. })
        ));
    }

    #[test]
    fn flipped_output_byte_is_located() {
        let mut h = history();
        h.epochs[0].reexec[0].writes[0] = WriteEntry::put(*b"c", encode_counter(3));
        assert_eq!(
            replay(&h, &Registry::with_builtins()),
            Err(Violation::ReexecMismatch {
                eid: EpochId(0),
                tid: TxnId::new(1, 2),
                position: 0
            })
        );
    }

    #[test]
    fn store_difference_is_located() {
        let h = history();
        let mut s = replay(&h, &Registry::with_builtins()).unwrap();
        s.apply_one(&WriteEntry::put(*b"b", *b"x"), EpochId(0));
        let err = oracle_check(
            &h,
            &StoreDump {
                replicas: vec![(ReplicaId(1), s)],
            },
        )
        .unwrap_err();
        assert_eq!(
            err,
            Violation::StoreMismatch {
                replica: ReplicaId(1),
                key: Some(b"b".to_vec())
            }
        );
    }
}

//! Identifiers, transaction records, batches and the global ordering shared by
//! every protocol module.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

/// Keys are arbitrary byte strings.
pub type Key = Vec<u8>;
/// Values are arbitrary byte strings, replaced wholesale on write.
pub type Value = Vec<u8>;

/// Index of a replica in the cluster configuration, `0..n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ReplicaId(pub u32);

impl ReplicaId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Globally unique transaction id: source replica plus a per-replica counter
/// that never resets for the lifetime of the replica.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxnId {
    pub rid: ReplicaId,
    pub seq: u64,
}

impl TxnId {
    pub const fn new(rid: u32, seq: u64) -> Self {
        TxnId {
            rid: ReplicaId(rid),
            seq,
        }
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.rid.0, self.seq)
    }
}

/// Epoch number; identical across replicas for the same decided cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct EpochId(pub u64);

impl EpochId {
    pub fn next(self) -> EpochId {
        EpochId(self.0 + 1)
    }
}

impl fmt::Display for EpochId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// Position of a batch in its source replica's log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BatchId {
    pub rid: ReplicaId,
    pub bid: u64,
}

/// A registered deterministic one-shot procedure invocation.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Procedure {
    pub name: String,
    pub params: Vec<u8>,
}

impl Procedure {
    pub fn new(name: impl Into<String>, params: Vec<u8>) -> Self {
        Procedure {
            name: name.into(),
            params,
        }
    }
}

/// Where a read observed its value during optimistic execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReadSource {
    /// Committed snapshot; `None` is the "never written" version, older than
    /// every epoch.
    Snapshot(Option<EpochId>),
    /// Uncommitted write of an earlier local transaction in the same epoch.
    Temp(TxnId),
    /// Statically declared read (high-contention mode, not executed).
    Declared,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ReadEntry {
    pub key: Key,
    pub source: ReadSource,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum WriteOp {
    Put(Value),
    Delete,
    /// Declared write key without a value (high-contention mode).
    Declared,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WriteEntry {
    pub key: Key,
    pub op: WriteOp,
}

impl WriteEntry {
    pub fn put(key: impl Into<Key>, value: impl Into<Value>) -> Self {
        WriteEntry {
            key: key.into(),
            op: WriteOp::Put(value.into()),
        }
    }

    pub fn delete(key: impl Into<Key>) -> Self {
        WriteEntry {
            key: key.into(),
            op: WriteOp::Delete,
        }
    }
}

/// The unit of replication: a transaction's input, tagged read-set,
/// write-set and same-replica dependencies.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TxnRecord {
    pub tid: TxnId,
    pub input: Procedure,
    pub read_set: Vec<ReadEntry>,
    pub write_set: Vec<WriteEntry>,
    pub dependencies: BTreeSet<TxnId>,
    /// Carried for response correlation only; never consulted by the protocol.
    pub client_tag: u64,
}

impl TxnRecord {
    /// Writers this record read uncommitted values from.
    pub fn temp_writers(&self) -> BTreeSet<TxnId> {
        self.read_set
            .iter()
            .filter_map(|r| match r.source {
                ReadSource::Temp(w) => Some(w),
                _ => None,
            })
            .collect()
    }
}

/// An ordered group of records cut from one replica's executor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Batch {
    pub id: BatchId,
    pub txns: Vec<TxnRecord>,
    /// Produced in high-contention mode: records carry declared key sets only.
    pub hc_flag: bool,
}

pub type SharedBatch = Arc<Batch>;

/// Deterministic total order used for re-execution: replica priority, then
/// transaction id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GlobalOrderKey {
    pub priority: u32,
    pub tid: TxnId,
}

pub fn compare_global_order(a: &GlobalOrderKey, b: &GlobalOrderKey) -> Ordering {
    (a.priority, a.tid.rid, a.tid.seq).cmp(&(b.priority, b.tid.rid, b.tid.seq))
}

impl Ord for GlobalOrderKey {
    fn cmp(&self, other: &Self) -> Ordering {
        compare_global_order(self, other)
    }
}

impl PartialOrd for GlobalOrderKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Static replica priorities; lower value orders first. Defaults to the rid.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Priorities(Vec<u32>);

impl Priorities {
    pub fn new(values: Vec<u32>) -> Self {
        Priorities(values)
    }

    pub fn of(&self, rid: ReplicaId) -> u32 {
        self.0.get(rid.index()).copied().unwrap_or(rid.0)
    }

    pub fn key(&self, tid: TxnId) -> GlobalOrderKey {
        GlobalOrderKey {
            priority: self.of(tid.rid),
            tid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BatchViolation {
    UnorderedSeq { prev: TxnId, next: TxnId },
    ForeignRecord { tid: TxnId },
    ForeignDependency { tid: TxnId, dep: TxnId },
    DependencyNotEarlier { tid: TxnId, dep: TxnId },
    DependencyMismatch { tid: TxnId },
    DuplicateWriteKey { tid: TxnId, key: Key },
    ValueInContentionBatch { tid: TxnId },
}

/// Reports every violated batch invariant; `Ok` iff there are none.
pub fn validate_batch_structure(b: &Batch) -> Result<(), Vec<BatchViolation>> {
    let mut out = Vec::new();
    let rid = b.id.rid;
    for pair in b.txns.windows(2) {
        if pair[0].tid.seq >= pair[1].tid.seq {
            out.push(BatchViolation::UnorderedSeq {
                prev: pair[0].tid,
                next: pair[1].tid,
            });
        }
    }
    for txn in &b.txns {
        if txn.tid.rid != rid {
            out.push(BatchViolation::ForeignRecord { tid: txn.tid });
        }
        for dep in &txn.dependencies {
            if dep.rid != rid {
                out.push(BatchViolation::ForeignDependency {
                    tid: txn.tid,
                    dep: *dep,
                });
            } else if dep.seq >= txn.tid.seq {
                out.push(BatchViolation::DependencyNotEarlier {
                    tid: txn.tid,
                    dep: *dep,
                });
            }
        }
        if txn.temp_writers() != txn.dependencies {
            out.push(BatchViolation::DependencyMismatch { tid: txn.tid });
        }
        let mut seen = BTreeSet::new();
        for w in &txn.write_set {
            if !seen.insert(&w.key) {
                out.push(BatchViolation::DuplicateWriteKey {
                    tid: txn.tid,
                    key: w.key.clone(),
                });
            }
            if b.hc_flag && w.op != WriteOp::Declared {
                out.push(BatchViolation::ValueInContentionBatch { tid: txn.tid });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

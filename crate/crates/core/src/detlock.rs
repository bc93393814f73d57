//! Deterministic lock scheduling for re-execution: per-key FIFO queues filled
//! in global order before anything runs, shared reads, exclusive writes and a
//! dependency counter per transaction.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::procedure::{KeySets, ProcError, ReadView, Registry};
use crate::storage::SnapshotStore;
use crate::types::{EpochId, Key, TxnId, TxnRecord, Value, WriteEntry};

/// One lock request: key and whether it is exclusive.
pub type LockRequest = (Key, bool);

/// Lock set from declared key sets. A key both read and written takes a
/// single exclusive request.
pub fn lock_set(sets: &KeySets) -> Vec<LockRequest> {
    let mut m: BTreeMap<&Key, bool> = BTreeMap::new();
    for k in &sets.reads {
        m.insert(k, false);
    }
    for k in &sets.writes {
        m.insert(k, true);
    }
    m.into_iter().map(|(k, w)| (k.clone(), w)).collect()
}

#[derive(Clone, Debug)]
struct Req {
    txn: usize,
    write: bool,
    granted: bool,
}

#[derive(Clone, Debug)]
pub struct LockScheduler {
    queues: BTreeMap<Key, VecDeque<Req>>,
    requests: Vec<Vec<LockRequest>>,
    waiting: Vec<usize>,
    runnable: BTreeSet<usize>,
    running: BTreeSet<usize>,
    done: usize,
}

impl LockScheduler {
    /// Enqueues every request in transaction order, then grants what can be
    /// granted.
    pub fn new(requests: Vec<Vec<LockRequest>>) -> Self {
        let mut s = LockScheduler {
            queues: BTreeMap::new(),
            waiting: requests.iter().map(Vec::len).collect(),
            requests,
            runnable: BTreeSet::new(),
            running: BTreeSet::new(),
            done: 0,
        };
        for (i, reqs) in s.requests.iter().enumerate() {
            for (k, w) in reqs {
                s.queues.entry(k.clone()).or_default().push_back(Req {
                    txn: i,
                    write: *w,
                    granted: false,
                });
            }
        }
        for (i, w) in s.waiting.iter().enumerate() {
            if *w == 0 {
                s.runnable.insert(i);
            }
        }
        let keys: Vec<Key> = s.queues.keys().cloned().collect();
        for k in keys {
            s.grant(&k);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn is_done(&self) -> bool {
        self.done == self.requests.len()
    }

    /// Transactions whose counters reached zero and have not been taken.
    pub fn runnable(&self) -> &BTreeSet<usize> {
        &self.runnable
    }

    pub fn requests(&self, txn: usize) -> &[LockRequest] {
        &self.requests[txn]
    }

    /// Outstanding ungranted requests of `txn`.
    pub fn waiting(&self, txn: usize) -> usize {
        self.waiting[txn]
    }

    fn grant(&mut self, key: &[u8]) {
        let q = self.queues.get_mut(key).expect("queue");
        let mut newly = Vec::new();
        for (pos, r) in q.iter_mut().enumerate() {
            if r.write {
                if pos == 0 && !r.granted {
                    r.granted = true;
                    newly.push(r.txn);
                }
                break;
            }
            if !r.granted {
                r.granted = true;
                newly.push(r.txn);
            }
        }
        for t in newly {
            self.waiting[t] -= 1;
            if self.waiting[t] == 0 {
                self.runnable.insert(t);
            }
        }
    }

    /// Marks a runnable transaction as started.
    pub fn take(&mut self, txn: usize) {
        assert!(self.runnable.remove(&txn), "txn {txn} is not runnable");
        self.running.insert(txn);
    }

    /// Releases all locks of a finished transaction.
    pub fn complete(&mut self, txn: usize) {
        assert!(self.running.remove(&txn), "txn {txn} is not running");
        self.done += 1;
        let keys: Vec<Key> = self.requests[txn].iter().map(|(k, _)| k.clone()).collect();
        for k in keys {
            let q = self.queues.get_mut(&k).expect("queue");
            let pos = q.iter().position(|r| r.txn == txn).expect("request present");
            debug_assert!(q[pos].granted);
            q.remove(pos);
            if q.is_empty() {
                self.queues.remove(&k);
            } else {
                self.grant(&k);
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DetlockError {
    #[error("{tid} touched {key:?} outside its lock set")]
    LockViolation { tid: TxnId, key: Key },
    #[error("deadlock: {0} transactions can never run")]
    Stuck(usize),
}

/// Read view confined to a lock set.
pub struct LockedView<'a, F: FnMut(&[u8]) -> Option<Value>> {
    pub allowed: &'a BTreeSet<Key>,
    pub read: F,
}

impl<F: FnMut(&[u8]) -> Option<Value>> ReadView for LockedView<'_, F> {
    fn read(&mut self, key: &[u8]) -> Result<Option<Value>, ProcError> {
        if !self.allowed.contains(key) {
            return Err(ProcError::Undeclared { key: key.to_vec() });
        }
        Ok((self.read)(key))
    }
}

/// Outcome of re-executing one transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reexecuted {
    pub tid: TxnId,
    /// Writes applied. Empty when the procedure failed.
    pub writes: Vec<WriteEntry>,
    /// A deterministic procedure failure (bad stored value and the like).
    pub error: Option<ProcError>,
}

/// Prepared re-execution: lock sets probed from each procedure.
pub struct Plan<'a> {
    pub txns: Vec<&'a TxnRecord>,
    pub sets: Vec<KeySets>,
}

impl<'a> Plan<'a> {
    pub fn new(txns: Vec<&'a TxnRecord>, registry: &Registry) -> Result<Self, ProcError> {
        let sets = txns
            .iter()
            .map(|t| registry.probe(&t.input))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Plan { txns, sets })
    }

    pub fn scheduler(&self) -> LockScheduler {
        LockScheduler::new(self.sets.iter().map(lock_set).collect())
    }
}

/// Runs one transaction under its lock set. The caller holds the locks.
pub fn run_locked<F>(
    registry: &Registry,
    txn: &TxnRecord,
    sets: &KeySets,
    read: F,
) -> Result<Reexecuted, DetlockError>
where
    F: FnMut(&[u8]) -> Option<Value>,
{
    let allowed: BTreeSet<Key> = sets.all().cloned().collect();
    let mut view = LockedView {
        allowed: &allowed,
        read,
    };
    match registry.run(&txn.input, &mut view) {
        Ok(writes) => {
            if let Some(w) = writes.iter().find(|w| !sets.writes.contains(&w.key)) {
                return Err(DetlockError::LockViolation {
                    tid: txn.tid,
                    key: w.key.clone(),
                });
            }
            Ok(Reexecuted {
                tid: txn.tid,
                writes,
                error: None,
            })
        }
        Err(ProcError::Undeclared { key }) => Err(DetlockError::LockViolation { tid: txn.tid, key }),
        Err(e) => Ok(Reexecuted {
            tid: txn.tid,
            writes: Vec::new(),
            error: Some(e),
        }),
    }
}

/// Single-threaded driver. `pick` chooses which runnable transaction starts
/// next; any choice gives the same result. Outcomes are returned in input
/// order and their writes are applied to `store` stamped with `eid`.
pub fn schedule_and_execute_with<P>(
    plan: &Plan<'_>,
    registry: &Registry,
    store: &mut SnapshotStore,
    eid: EpochId,
    mut pick: P,
) -> Result<Vec<Reexecuted>, DetlockError>
where
    P: FnMut(&BTreeSet<usize>) -> usize,
{
    let mut sched = plan.scheduler();
    let mut out: Vec<Option<Reexecuted>> = vec![None; plan.txns.len()];
    while !sched.is_done() {
        if sched.runnable().is_empty() {
            return Err(DetlockError::Stuck(plan.txns.len() - out.iter().flatten().count()));
        }
        let i = pick(sched.runnable());
        sched.take(i);
        let r = run_locked(registry, plan.txns[i], &plan.sets[i], |k| store.get(k).cloned())?;
        store.apply_committed(&r.writes, eid);
        sched.complete(i);
        out[i] = Some(r);
    }
    Ok(out.into_iter().map(|r| r.expect("every txn ran")).collect())
}

/// Serial replay in the given order.
pub fn schedule_and_execute(
    plan: &Plan<'_>,
    registry: &Registry,
    store: &mut SnapshotStore,
    eid: EpochId,
) -> Result<Vec<Reexecuted>, DetlockError> {
    schedule_and_execute_with(plan, registry, store, eid, |r| *r.iter().next().expect("non-empty"))
}

//! Multi-threaded deterministic re-execution. The lock scheduler stays on the
//! calling thread; runnable transactions fan out to workers.

use std::sync::mpsc;
use std::sync::RwLock;

use epochkv_core::detlock::{run_locked, DetlockError, Plan, Reexecuted};
use epochkv_core::procedure::Registry;
use epochkv_core::storage::SnapshotStore;
use epochkv_core::EpochId;

/// Same contract as the serial scheduler: identical outputs and final store
/// for any worker count.
pub fn execute_parallel(
    plan: &Plan<'_>,
    registry: &Registry,
    store: &mut SnapshotStore,
    eid: EpochId,
    workers: usize,
) -> Result<Vec<Reexecuted>, DetlockError> {
    let workers = workers.max(1);
    let shared = RwLock::new(std::mem::take(store));
    let result = std::thread::scope(|s| {
        let (done_tx, done_rx) = mpsc::channel::<(usize, Result<Reexecuted, DetlockError>)>();
        let mut job_txs = Vec::with_capacity(workers);
        for _ in 0..workers {
            let (tx, rx) = mpsc::channel::<usize>();
            job_txs.push(tx);
            let done_tx = done_tx.clone();
            let shared = &shared;
            s.spawn(move || {
                for i in rx {
                    // Only keys this txn holds locks on are read, and every
                    // earlier holder has already been applied.
                    let r = run_locked(registry, plan.txns[i], &plan.sets[i], |k| {
                        shared.read().expect("store lock").get(k).cloned()
                    });
                    if done_tx.send((i, r)).is_err() {
                        return;
                    }
                }
            });
        }
        drop(done_tx);

        let mut sched = plan.scheduler();
        let mut out: Vec<Option<Reexecuted>> = vec![None; plan.txns.len()];
        let mut in_flight = 0usize;
        let mut next_worker = 0usize;
        let mut failure = None;
        while !sched.is_done() {
            if failure.is_none() {
                let ready: Vec<usize> = sched.runnable().iter().copied().collect();
                for i in ready {
                    sched.take(i);
                    job_txs[next_worker].send(i).expect("worker alive");
                    next_worker = (next_worker + 1) % workers;
                    in_flight += 1;
                }
            }
            if in_flight == 0 {
                if failure.is_none() {
                    let left = out.iter().filter(|r| r.is_none()).count();
                    failure = Some(DetlockError::Stuck(left));
                }
                break;
            }
            let (i, r) = done_rx.recv().expect("worker result");
            in_flight -= 1;
            match r {
                Ok(r) => {
                    shared.write().expect("store lock").apply_committed(&r.writes, eid);
                    sched.complete(i);
                    out[i] = Some(r);
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        drop(job_txs);
        match failure {
            Some(e) => Err(e),
            None => Ok(out.into_iter().map(|r| r.expect("every txn ran")).collect()),
        }
    });
    *store = shared.into_inner().expect("store lock");
    result
}

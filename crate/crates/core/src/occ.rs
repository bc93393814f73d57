//! Optimistic local execution against the snapshot plus temp overlay,
//! dependency tracking and batch cutting.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use thiserror::Error;

use crate::codec::{record_len, BATCH_HEADER_LEN};
use crate::procedure::{ProcError, ReadView, Registry};
use crate::storage::ReplicaStore;
use crate::time::Micros;
use crate::types::{
    Batch, BatchId, Key, Procedure, ReadEntry, ReadSource, ReplicaId, TxnId, TxnRecord, Value,
    WriteEntry, WriteOp,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutorConfig {
    /// Cut when the encoded batch reaches this many bytes.
    pub batch_size_bytes: usize,
    /// Cut a non-empty batch once it is this old.
    pub batch_timeout: Micros,
    /// Local validation retries before the transaction is deferred.
    pub max_local_retries: u32,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            batch_size_bytes: 4 * 1024 * 1024,
            batch_timeout: Micros::from_ms(5),
            max_local_retries: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Normal,
    HighContention,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error(transparent)]
    Procedure(#[from] ProcError),
    #[error("local validation failed {attempts} times; deferred to the next epoch")]
    Deferred { attempts: u32 },
    #[error("operation not allowed in {0:?} mode")]
    WrongMode(ExecMode),
}

/// Local validation failure: a read's provenance changed before install.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalConflict {
    pub key: Key,
}

/// Outcome of the read/compute phase, not yet installed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: Procedure,
    pub read_set: Vec<ReadEntry>,
    pub write_set: Vec<WriteEntry>,
}

struct RecordingView<'a> {
    store: &'a ReplicaStore,
    reads: BTreeMap<Key, ReadSource>,
    order: Vec<Key>,
}

impl ReadView for RecordingView<'_> {
    fn read(&mut self, key: &[u8]) -> Result<Option<Value>, ProcError> {
        let r = self.store.read(key);
        if !self.reads.contains_key(key) {
            self.reads.insert(key.to_vec(), r.source);
            self.order.push(key.to_vec());
        }
        Ok(r.value)
    }
}

/// Per-replica optimistic executor and batch builder.
#[derive(Clone, Debug)]
pub struct Executor {
    rid: ReplicaId,
    cfg: ExecutorConfig,
    next_seq: u64,
    next_bid: u64,
    current: Vec<TxnRecord>,
    current_bytes: usize,
    current_hc: bool,
    opened_at: Option<Micros>,
    mode: ExecMode,
    deferred: Vec<(Procedure, u64)>,
}

impl Executor {
    pub fn new(rid: ReplicaId, cfg: ExecutorConfig) -> Self {
        Executor {
            rid,
            cfg,
            next_seq: 1,
            next_bid: 0,
            current: Vec::new(),
            current_bytes: BATCH_HEADER_LEN,
            current_hc: false,
            opened_at: None,
            mode: ExecMode::Normal,
            deferred: Vec::new(),
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.cfg
    }

    /// Id the next emitted batch will get.
    pub fn next_bid(&self) -> u64 {
        self.next_bid
    }

    pub fn pending_len(&self) -> usize {
        self.current.len()
    }

    pub fn pending_bytes(&self) -> usize {
        self.current_bytes
    }

    /// Read and compute phase. Reads record their provenance; the first read
    /// of a key fixes it.
    pub fn prepare(
        &self,
        store: &ReplicaStore,
        registry: &Registry,
        input: Procedure,
    ) -> Result<Prepared, ProcError> {
        let mut view = RecordingView {
            store,
            reads: BTreeMap::new(),
            order: Vec::new(),
        };
        let write_set = registry.run(&input, &mut view)?;
        let read_set = view
            .order
            .into_iter()
            .map(|key| {
                let source = view.reads[&key];
                ReadEntry { key, source }
            })
            .collect();
        Ok(Prepared {
            input,
            read_set,
            write_set,
        })
    }

    /// Validate-and-install critical section. On success the writes are in the
    /// temp overlay and the record is appended to the open batch.
    pub fn install(
        &mut self,
        store: &mut ReplicaStore,
        prepared: Prepared,
        client_tag: u64,
        now: Micros,
    ) -> Result<TxnRecord, LocalConflict> {
        for r in &prepared.read_set {
            if store.provenance(&r.key) != r.source {
                return Err(LocalConflict { key: r.key.clone() });
            }
        }
        let tid = TxnId {
            rid: self.rid,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        for w in &prepared.write_set {
            let v = match &w.op {
                WriteOp::Put(v) => Some(v.clone()),
                _ => None,
            };
            store.temp_write(w.key.clone(), v, tid);
        }
        let dependencies: BTreeSet<TxnId> = prepared
            .read_set
            .iter()
            .filter_map(|r| match r.source {
                ReadSource::Temp(w) => Some(w),
                _ => None,
            })
            .collect();
        let record = TxnRecord {
            tid,
            input: prepared.input,
            read_set: prepared.read_set,
            write_set: prepared.write_set,
            dependencies,
            client_tag,
        };
        self.append(record.clone(), false, now);
        Ok(record)
    }

    /// Executes `input` optimistically, retrying local validation failures.
    pub fn execute_transaction(
        &mut self,
        store: &mut ReplicaStore,
        registry: &Registry,
        input: Procedure,
        client_tag: u64,
        now: Micros,
    ) -> Result<TxnRecord, ExecError> {
        if self.mode != ExecMode::Normal {
            return Err(ExecError::WrongMode(self.mode));
        }
        let mut attempts = 0;
        loop {
            let prepared = self.prepare(store, registry, input.clone())?;
            match self.install(store, prepared, client_tag, now) {
                Ok(r) => return Ok(r),
                Err(_) if attempts < self.cfg.max_local_retries => attempts += 1,
                Err(_) => {
                    self.deferred.push((input, client_tag));
                    return Err(ExecError::Deferred {
                        attempts: attempts + 1,
                    });
                }
            }
        }
    }

    /// Transactions whose local validation kept failing; retried by the
    /// caller after the next epoch transition.
    pub fn take_deferred(&mut self) -> Vec<(Procedure, u64)> {
        core::mem::take(&mut self.deferred)
    }

    /// High-contention path: the declared key sets stand in for execution.
    pub fn submit_probed(
        &mut self,
        registry: &Registry,
        input: Procedure,
        client_tag: u64,
        now: Micros,
    ) -> Result<TxnRecord, ExecError> {
        if self.mode != ExecMode::HighContention {
            return Err(ExecError::WrongMode(self.mode));
        }
        let sets = registry.probe(&input)?;
        let tid = TxnId {
            rid: self.rid,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        let record = TxnRecord {
            tid,
            input,
            read_set: sets
                .reads
                .into_iter()
                .map(|key| ReadEntry {
                    key,
                    source: ReadSource::Declared,
                })
                .collect(),
            write_set: sets
                .writes
                .into_iter()
                .map(|key| WriteEntry {
                    key,
                    op: WriteOp::Declared,
                })
                .collect(),
            dependencies: BTreeSet::new(),
            client_tag,
        };
        self.append(record.clone(), true, now);
        Ok(record)
    }

    fn append(&mut self, record: TxnRecord, hc: bool, now: Micros) {
        if self.current.is_empty() {
            self.opened_at = Some(now);
            self.current_hc = hc;
        }
        debug_assert_eq!(self.current_hc, hc, "batches never mix modes");
        self.current_bytes += record_len(&record);
        self.current.push(record);
    }

    /// Switches mode. A non-empty batch of the old mode is cut and returned so
    /// batches stay homogeneous.
    pub fn set_mode(&mut self, mode: ExecMode) -> Option<Batch> {
        if mode == self.mode {
            return None;
        }
        self.mode = mode;
        if self.current.is_empty() {
            None
        } else {
            Some(self.emit())
        }
    }

    /// The open batch has reached `batch_size_bytes` and takes no more
    /// transactions until it is cut.
    pub fn batch_full(&self) -> bool {
        self.current_bytes >= self.cfg.batch_size_bytes
    }

    /// Emits the open batch if it is non-empty and either full or old enough.
    pub fn maybe_cut_batch(&mut self, now: Micros) -> Option<Batch> {
        let opened = self.opened_at?;
        if self.current.is_empty() {
            return None;
        }
        let full = self.current_bytes >= self.cfg.batch_size_bytes;
        let aged = now.saturating_sub(opened) >= self.cfg.batch_timeout;
        if full || aged {
            Some(self.emit())
        } else {
            None
        }
    }

    /// When the open batch will time out, if one is open.
    pub fn cut_deadline(&self) -> Option<Micros> {
        if self.current.is_empty() {
            None
        } else {
            self.opened_at.map(|t| t + self.cfg.batch_timeout)
        }
    }

    fn emit(&mut self) -> Batch {
        let batch = Batch {
            id: BatchId {
                rid: self.rid,
                bid: self.next_bid,
            },
            txns: core::mem::take(&mut self.current),
            hc_flag: self.current_hc,
        };
        self.next_bid += 1;
        self.current_bytes = BATCH_HEADER_LEN;
        self.opened_at = None;
        batch
    }
}

//! Commit history and store dumps in a canonical byte encoding.

use std::path::Path;

use anyhow::{bail, Context};
use epochkv_core::codec::{DecodeError, Decoder, Encoder, Wire};
use epochkv_core::commit::EpochRecord;
use epochkv_core::cutlog::{CutDecision, CutVector};
use epochkv_core::storage::{SnapshotEntry, SnapshotStore};
use epochkv_core::{EpochId, ReplicaId, TxnRecord, WriteEntry};

const HISTORY_MAGIC: &[u8; 8] = b"EKVHIST1";
const STORE_MAGIC: &[u8; 8] = b"EKVSTOR1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReexecEntry {
    pub txn: TxnRecord,
    pub writes: Vec<WriteEntry>,
    pub failed: bool,
}

impl Wire for ReexecEntry {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.txn).put(&self.writes).u8(self.failed as u8);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let txn = dec.get()?;
        let writes = dec.get()?;
        let failed = match dec.u8()? {
            0 => false,
            1 => true,
            t => return Err(dec.bad_tag("failed flag", t)),
        };
        Ok(ReexecEntry { txn, writes, failed })
    }
}

/// One epoch as committed: valid chains, then the re-executed transactions
/// in global order with their outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochEntry {
    pub eid: EpochId,
    pub cut: CutVector,
    pub valid: Vec<Vec<TxnRecord>>,
    pub reexec: Vec<ReexecEntry>,
}

impl EpochEntry {
    pub fn from_record(r: &EpochRecord) -> Self {
        let find = |tid| r.find(tid).cloned().expect("record names a gathered txn");
        EpochEntry {
            eid: r.eid,
            cut: r.cut.clone(),
            valid: r.valid_chains.iter().map(|c| c.iter().map(|t| find(*t)).collect()).collect(),
            reexec: r
                .reexec
                .iter()
                .map(|x| ReexecEntry {
                    txn: find(x.tid),
                    writes: x.writes.clone(),
                    failed: x.error.is_some(),
                })
                .collect(),
        }
    }

    /// Valid transactions in canonical order.
    pub fn valid_canonical(&self) -> Vec<&TxnRecord> {
        let mut v: Vec<&TxnRecord> = self.valid.iter().flatten().collect();
        v.sort_by_key(|t| t.tid);
        v
    }

    pub fn txn_count(&self) -> usize {
        self.valid.iter().map(Vec::len).sum::<usize>() + self.reexec.len()
    }
}

impl Wire for EpochEntry {
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&CutDecision {
            epoch: self.eid,
            cut: self.cut.clone(),
        });
        enc.put(&self.valid).put(&self.reexec);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let d: CutDecision = dec.get()?;
        Ok(EpochEntry {
            eid: d.epoch,
            cut: d.cut,
            valid: dec.get()?,
            reexec: dec.get()?,
        })
    }
}

/// The serial history one replica committed, with the store it started from.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CommitHistory {
    pub initial: Vec<SnapshotEntry>,
    pub epochs: Vec<EpochEntry>,
}

impl CommitHistory {
    pub fn new(initial: &SnapshotStore) -> Self {
        CommitHistory {
            initial: initial.entries().collect(),
            epochs: Vec::new(),
        }
    }

    pub fn txn_count(&self) -> usize {
        self.epochs.iter().map(EpochEntry::txn_count).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        for b in HISTORY_MAGIC {
            enc.u8(*b);
        }
        enc.put(&self.initial).put(&self.epochs);
        enc.finish()
    }

    pub fn decode(data: &[u8]) -> anyhow::Result<Self> {
        let Some(body) = data.strip_prefix(HISTORY_MAGIC.as_slice()) else {
            bail!("not a history dump (bad magic)");
        };
        let mut dec = Decoder::new(body);
        let initial = dec.get().context("initial store")?;
        let epochs = dec.get().context("epochs")?;
        dec.finish()?;
        Ok(CommitHistory { initial, epochs })
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.encode()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let data = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::decode(&data).with_context(|| format!("decoding {}", path.display()))
    }
}

/// Final stores of the correct replicas.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StoreDump {
    pub replicas: Vec<(ReplicaId, SnapshotStore)>,
}

impl StoreDump {
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        for b in STORE_MAGIC {
            enc.u8(*b);
        }
        enc.count(self.replicas.len());
        for (rid, s) in &self.replicas {
            let entries: Vec<SnapshotEntry> = s.entries().collect();
            enc.put(rid).put(&s.current_eid()).put(&entries);
        }
        enc.finish()
    }

    pub fn decode(data: &[u8]) -> anyhow::Result<Self> {
        let Some(body) = data.strip_prefix(STORE_MAGIC.as_slice()) else {
            bail!("not a store dump (bad magic)");
        };
        let mut dec = Decoder::new(body);
        let n = dec.count()?;
        let mut replicas = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let rid: ReplicaId = dec.get()?;
            let eid: EpochId = dec.get()?;
            let entries: Vec<SnapshotEntry> = dec.get()?;
            replicas.push((rid, SnapshotStore::from_entries(eid, entries)));
        }
        dec.finish()?;
        Ok(StoreDump { replicas })
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.encode()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let data = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::decode(&data).with_context(|| format!("decoding {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use epochkv_core::procedure::put;
    use epochkv_core::{ReadEntry, ReadSource, TxnId};
    use std::collections::BTreeSet;

    fn txn(seq: u64) -> TxnRecord {
        TxnRecord {
            tid: TxnId::new(1, seq),
            input: put(b"k", b"v"),
            read_set: vec![ReadEntry {
                key: b"a".to_vec(),
                source: ReadSource::Snapshot(Some(EpochId(3))),
            }],
            write_set: vec![WriteEntry::put(*b"k", *b"v")],
            dependencies: BTreeSet::new(),
            client_tag: 9,
        }
    }

    #[test]
    fn history_roundtrip() {
        let mut h = CommitHistory::new(&SnapshotStore::preloaded([(b"a".to_vec(), b"1".to_vec())]));
        h.epochs.push(EpochEntry {
            eid: EpochId(0),
            cut: vec![None, Some(4)],
            valid: vec![vec![txn(1), txn(2)]],
            reexec: vec![ReexecEntry {
                txn: txn(3),
                writes: vec![],
                failed: true,
            }],
        });
        let bytes = h.encode();
        assert_eq!(CommitHistory::decode(&bytes).unwrap(), h);
        assert!(CommitHistory::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(CommitHistory::decode(b"garbage").is_err());
    }

    #[test]
    fn store_roundtrip() {
        let mut s = SnapshotStore::preloaded([(b"a".to_vec(), b"1".to_vec())]);
        s.apply_one(&WriteEntry::put(*b"b", *b"2"), EpochId(0));
        s.advance_epoch();
        let d = StoreDump {
            replicas: vec![(ReplicaId(0), s.clone()), (ReplicaId(2), s)],
        };
        assert_eq!(StoreDump::decode(&d.encode()).unwrap(), d);
    }
}

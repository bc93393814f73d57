//! Versioned committed snapshot plus the per-epoch overlay of uncommitted
//! local writes.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::hash::Hasher;

use fnv::FnvHasher;

use crate::codec::{DecodeError, Decoder, Encoder, Wire};
use crate::types::{EpochId, Key, ReadSource, ReplicaId, TxnId, Value, WriteEntry, WriteOp};

/// A committed item. `value == None` is a tombstone kept so that a delete
/// still bumps the key's version for staleness checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Versioned {
    pub value: Option<Value>,
    /// Epoch of the last committed write; `None` for preloaded data.
    pub version: Option<EpochId>,
}

/// One line of a snapshot dump.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotEntry {
    pub key: Key,
    pub value: Value,
    pub version: Option<EpochId>,
}

impl Wire for SnapshotEntry {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.key).bytes(&self.value);
        match self.version {
            None => enc.u8(0),
            Some(e) => enc.u8(1).u64(e.0),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let key = dec.bytes()?;
        let value = dec.bytes()?;
        let version = match dec.u8()? {
            0 => None,
            1 => Some(EpochId(dec.u64()?)),
            t => return Err(dec.bad_tag("version", t)),
        };
        Ok(SnapshotEntry {
            key,
            value,
            version,
        })
    }
}

fn entry_hash(key: &[u8], item: &Versioned) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&(key.len() as u64).to_le_bytes());
    h.write(key);
    match &item.value {
        Some(v) => {
            h.write_u8(1);
            h.write(&(v.len() as u64).to_le_bytes());
            h.write(v);
        }
        None => h.write_u8(0),
    }
    h.write_u64(item.version.map_or(u64::MAX, |e| e.0));
    h.finish()
}

/// The consistent snapshot: latest committed version of every key.
#[derive(Clone, Debug, Default)]
pub struct SnapshotStore {
    items: BTreeMap<Key, Versioned>,
    current_eid: EpochId,
    digest: u64,
}

impl PartialEq for SnapshotStore {
    fn eq(&self, other: &Self) -> bool {
        self.current_eid == other.current_eid && self.items == other.items
    }
}

impl Eq for SnapshotStore {}

impl SnapshotStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store preloaded with data that no transaction has written yet.
    pub fn preloaded<I: IntoIterator<Item = (Key, Value)>>(data: I) -> Self {
        let mut s = Self::new();
        for (k, v) in data {
            s.insert_item(
                k,
                Versioned {
                    value: Some(v),
                    version: None,
                },
            );
        }
        s
    }

    /// Rebuilds a store from dump entries.
    pub fn from_entries<I: IntoIterator<Item = SnapshotEntry>>(current: EpochId, it: I) -> Self {
        let mut s = Self::new();
        s.current_eid = current;
        for e in it {
            s.insert_item(
                e.key,
                Versioned {
                    value: Some(e.value),
                    version: e.version,
                },
            );
        }
        s
    }

    fn insert_item(&mut self, key: Key, item: Versioned) {
        let add = entry_hash(&key, &item);
        if let Some(old) = self.items.get(&key) {
            self.digest = self.digest.wrapping_sub(entry_hash(&key, old));
        }
        self.digest = self.digest.wrapping_add(add);
        self.items.insert(key, item);
    }

    pub fn current_eid(&self) -> EpochId {
        self.current_eid
    }

    /// Live value, ignoring tombstones.
    pub fn get(&self, key: &[u8]) -> Option<&Value> {
        self.items.get(key).and_then(|i| i.value.as_ref())
    }

    /// Version of the key's last committed write (tombstones included).
    pub fn version(&self, key: &[u8]) -> Option<EpochId> {
        self.items.get(key).and_then(|i| i.version)
    }

    pub fn item(&self, key: &[u8]) -> Option<&Versioned> {
        self.items.get(key)
    }

    /// Applies write-sets in order (later entries win), stamping `eid`.
    pub fn apply_committed<'a, I>(&mut self, writes: I, eid: EpochId)
    where
        I: IntoIterator<Item = &'a WriteEntry>,
    {
        for w in writes {
            self.apply_one(w, eid);
        }
    }

    pub fn apply_one(&mut self, w: &WriteEntry, eid: EpochId) {
        match &w.op {
            WriteOp::Put(v) => self.insert_item(
                w.key.clone(),
                Versioned {
                    value: Some(v.clone()),
                    version: Some(eid),
                },
            ),
            WriteOp::Delete => {
                if self.get(&w.key).is_some() {
                    self.insert_item(
                        w.key.clone(),
                        Versioned {
                            value: None,
                            version: Some(eid),
                        },
                    );
                }
            }
            WriteOp::Declared => {}
        }
    }

    /// Closes the current epoch; returns the new epoch id.
    pub fn advance_epoch(&mut self) -> EpochId {
        self.current_eid = self.current_eid.next();
        self.current_eid
    }

    /// Live entries in key order.
    pub fn entries(&self) -> impl Iterator<Item = SnapshotEntry> + '_ {
        self.items.iter().filter_map(|(k, i)| {
            i.value.as_ref().map(|v| SnapshotEntry {
                key: k.clone(),
                value: v.clone(),
                version: i.version,
            })
        })
    }

    pub fn live_len(&self) -> usize {
        self.items.values().filter(|i| i.value.is_some()).count()
    }

    /// Order-independent digest of all items including tombstones and versions.
    pub fn digest(&self) -> u64 {
        self.digest
    }

    /// Plain key → value view, for oracle comparison.
    pub fn to_map(&self) -> BTreeMap<Key, Value> {
        self.items
            .iter()
            .filter_map(|(k, i)| i.value.clone().map(|v| (k.clone(), v)))
            .collect()
    }
}

/// Uncommitted local writes of the current epoch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TempState {
    items: BTreeMap<Key, (Option<Value>, TxnId)>,
}

impl TempState {
    pub fn get(&self, key: &[u8]) -> Option<&(Option<Value>, TxnId)> {
        self.items.get(key)
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }
}

/// Result of an optimistic read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadResult {
    pub value: Option<Value>,
    /// `Temp(writer)` or `Snapshot(version)`.
    pub source: ReadSource,
}

/// A replica's storage: the committed snapshot with the temp overlay on top.
#[derive(Clone, Debug)]
pub struct ReplicaStore {
    rid: ReplicaId,
    pub snapshot: SnapshotStore,
    temp: TempState,
}

impl ReplicaStore {
    pub fn new(rid: ReplicaId, snapshot: SnapshotStore) -> Self {
        ReplicaStore {
            rid,
            snapshot,
            temp: TempState::default(),
        }
    }

    pub fn rid(&self) -> ReplicaId {
        self.rid
    }

    pub fn temp(&self) -> &TempState {
        &self.temp
    }

    pub fn read(&self, key: &[u8]) -> ReadResult {
        if let Some((value, writer)) = self.temp.get(key) {
            return ReadResult {
                value: value.clone(),
                source: ReadSource::Temp(*writer),
            };
        }
        ReadResult {
            value: self.snapshot.get(key).cloned(),
            source: ReadSource::Snapshot(self.snapshot.version(key)),
        }
    }

    /// Current provenance of a key, used by local validation.
    pub fn provenance(&self, key: &[u8]) -> ReadSource {
        match self.temp.get(key) {
            Some((_, w)) => ReadSource::Temp(*w),
            None => ReadSource::Snapshot(self.snapshot.version(key)),
        }
    }

    pub fn temp_write(&mut self, key: Key, value: Option<Value>, writer: TxnId) {
        debug_assert_eq!(writer.rid, self.rid, "temp writes are local only");
        self.temp.items.insert(key, (value, writer));
    }

    pub fn apply_committed<'a, I>(&mut self, writes: I, eid: EpochId)
    where
        I: IntoIterator<Item = &'a WriteEntry>,
    {
        self.snapshot.apply_committed(writes, eid);
    }

    /// Advances the snapshot epoch and drops every temp entry.
    pub fn advance_epoch(&mut self) -> EpochId {
        self.temp.clear();
        self.snapshot.advance_epoch()
    }
}

/// Decodes a list of dump entries.
pub fn decode_entries(dec: &mut Decoder<'_>) -> Result<Vec<SnapshotEntry>, DecodeError> {
    dec.get()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn store() -> ReplicaStore {
        ReplicaStore::new(ReplicaId(0), SnapshotStore::new())
    }

    #[test]
    fn overlay_shadows_snapshot() {
        let mut s = store();
        s.snapshot.apply_committed(&[WriteEntry::put(*b"k", *b"v0")], EpochId(3));
        assert_eq!(
            s.read(b"k"),
            ReadResult {
                value: Some(b"v0".to_vec()),
                source: ReadSource::Snapshot(Some(EpochId(3)))
            }
        );
        let t = TxnId::new(0, 1);
        s.temp_write(b"k".to_vec(), Some(b"v1".to_vec()), t);
        assert_eq!(s.read(b"k").source, ReadSource::Temp(t));
        let t2 = TxnId::new(0, 2);
        s.temp_write(b"k".to_vec(), Some(b"v2".to_vec()), t2);
        assert_eq!(s.read(b"k").value.as_deref(), Some(&b"v2"[..]));
        s.advance_epoch();
        assert_eq!(
            s.read(b"k").source,
            ReadSource::Snapshot(Some(EpochId(3)))
        );
    }

    #[test]
    fn absent_key_reads_as_never() {
        assert_eq!(
            store().read(b"nope"),
            ReadResult {
                value: None,
                source: ReadSource::Snapshot(None)
            }
        );
    }

    #[test]
    fn later_entries_win_and_absent_delete_is_noop() {
        let mut s = SnapshotStore::new();
        s.apply_committed(
            &[WriteEntry::put(*b"k", *b"a"), WriteEntry::put(*b"k", *b"b")],
            EpochId(7),
        );
        assert_eq!(s.get(b"k"), Some(&b"b".to_vec()));
        assert_eq!(s.version(b"k"), Some(EpochId(7)));
        let before = s.clone();
        let digest = s.digest();
        s.apply_committed(&[WriteEntry::delete(*b"zz")], EpochId(8));
        assert_eq!(s, before);
        assert_eq!(s.digest(), digest);
    }

    #[test]
    fn delete_keeps_a_version() {
        let mut s = SnapshotStore::new();
        s.apply_committed(&[WriteEntry::put(*b"k", *b"a")], EpochId(1));
        s.apply_committed(&[WriteEntry::delete(*b"k")], EpochId(2));
        assert_eq!(s.get(b"k"), None);
        assert_eq!(s.version(b"k"), Some(EpochId(2)));
        assert_eq!(s.live_len(), 0);
    }

    #[test]
    fn advance_counts_epochs() {
        let mut s = store();
        assert_eq!(s.advance_epoch(), EpochId(1));
        for _ in 1..5 {
            s.advance_epoch();
        }
        assert_eq!(s.snapshot.current_eid(), EpochId(5));
    }

    #[derive(Clone, Debug)]
    enum Op {
        Temp(u8, u8, u64),
        Read(u8),
        Advance,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..8, any::<u8>(), 1u64..50).prop_map(|(k, v, s)| Op::Temp(k, v, s)),
            (0u8..8).prop_map(Op::Read),
            Just(Op::Advance),
        ]
    }

    proptest! {
        // Flat reference map with provenance bookkeeping.
        #[test]
        fn reads_see_latest_prior_write(ops in proptest::collection::vec(op(), 1..1000)) {
            let mut s = store();
            let mut reference: BTreeMap<u8, (u8, TxnId)> = BTreeMap::new();
            for o in ops {
                match o {
                    Op::Temp(k, v, seq) => {
                        let t = TxnId::new(0, seq);
                        s.temp_write(vec![k], Some(vec![v]), t);
                        reference.insert(k, (v, t));
                    }
                    Op::Read(k) => {
                        let r = s.read(&[k]);
                        match reference.get(&k) {
                            Some((v, t)) => {
                                prop_assert_eq!(r.value, Some(vec![*v]));
                                prop_assert_eq!(r.source, ReadSource::Temp(*t));
                            }
                            None => prop_assert_eq!(r.source, ReadSource::Snapshot(None)),
                        }
                    }
                    Op::Advance => {
                        s.advance_epoch();
                        reference.clear();
                        prop_assert!(s.temp().is_empty());
                    }
                }
            }
        }

        #[test]
        fn apply_equals_fold(writes in proptest::collection::vec((0u8..16, proptest::option::of(any::<u8>())), 0..500)) {
            let list: Vec<WriteEntry> = writes.iter().map(|(k, v)| match v {
                Some(v) => WriteEntry::put(vec![*k], vec![*v]),
                None => WriteEntry::delete(vec![*k]),
            }).collect();
            let mut s = SnapshotStore::new();
            s.apply_committed(&list, EpochId(4));
            let mut reference = BTreeMap::new();
            for (k, v) in &writes {
                match v {
                    Some(v) => { reference.insert(vec![*k], vec![*v]); }
                    None => { reference.remove(&vec![*k]); }
                }
            }
            prop_assert_eq!(s.to_map(), reference);
            let rebuilt = {
                let mut r = SnapshotStore::new();
                for (k, v) in s.to_map() {
                    r.apply_committed(&[WriteEntry::put(k, v)], EpochId(4));
                }
                r
            };
            // Digest covers tombstones, so it only matches when none exist.
            if s.items.values().all(|i| i.value.is_some()) {
                prop_assert_eq!(rebuilt.digest(), s.digest());
            }
        }
    }
}

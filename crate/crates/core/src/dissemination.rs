//! Per-replica batch logs, acknowledgment quorums, contiguous Proofs of
//! Availability and gap fetching.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::message::{Message, Outbound};
use crate::time::Micros;
use crate::types::{BatchId, ReplicaId, SharedBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SlotState {
    Missing,
    Broadcast,
    Available,
    PoaSent,
    Committed,
}

/// Who counts toward the `f+1` availability quorum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AckQuorum {
    /// The source's own stored copy is one of the `f+1`.
    #[default]
    IncludeSelf,
    /// `f+1` acknowledgments from peers; the source copy is extra.
    PeersOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DissemConfig {
    pub n: usize,
    pub f: usize,
    pub ack_quorum: AckQuorum,
    pub fetch_retry: Micros,
}

impl DissemConfig {
    pub fn peer_acks_needed(&self) -> usize {
        match self.ack_quorum {
            AckQuorum::IncludeSelf => self.f,
            AckQuorum::PeersOnly => self.f + 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchSlot {
    pub batch: Option<SharedBatch>,
    pub state: SlotState,
    pub acks: BTreeSet<ReplicaId>,
    pub sent_poa: bool,
    poa_pending: bool,
    fetch_at: Option<Micros>,
}

impl BatchSlot {
    fn missing() -> Self {
        BatchSlot {
            batch: None,
            state: SlotState::Missing,
            acks: BTreeSet::new(),
            sent_poa: false,
            poa_pending: false,
            fetch_at: None,
        }
    }

    fn advance(&mut self, to: SlotState) {
        if to > self.state {
            self.state = to;
        }
    }
}

#[derive(Clone, Debug)]
pub struct LogView {
    local: ReplicaId,
    cfg: DissemConfig,
    logs: Vec<BTreeMap<u64, BatchSlot>>,
    poa_heads: Vec<Option<u64>>,
    last_committed: Vec<Option<u64>>,
    truncated_below: Vec<u64>,
    /// Acks for batches this replica does not know.
    pub unknown_acks: u64,
}

fn after(b: Option<u64>) -> u64 {
    b.map_or(0, |b| b + 1)
}

impl LogView {
    pub fn new(local: ReplicaId, cfg: DissemConfig) -> Self {
        let n = cfg.n;
        LogView {
            local,
            cfg,
            logs: vec![BTreeMap::new(); n],
            poa_heads: vec![None; n],
            last_committed: vec![None; n],
            truncated_below: vec![0; n],
            unknown_acks: 0,
        }
    }

    pub fn config(&self) -> &DissemConfig {
        &self.cfg
    }

    pub fn poa_heads(&self) -> &[Option<u64>] {
        &self.poa_heads
    }

    pub fn last_committed(&self) -> &[Option<u64>] {
        &self.last_committed
    }

    pub fn truncated_below(&self, rid: ReplicaId) -> u64 {
        self.truncated_below[rid.index()]
    }

    pub fn slot(&self, id: BatchId) -> Option<&BatchSlot> {
        self.logs[id.rid.index()].get(&id.bid)
    }

    /// Batch stored locally, or already committed and collected.
    pub fn stores(&self, id: BatchId) -> bool {
        id.bid < self.truncated_below[id.rid.index()]
            || self.slot(id).is_some_and(|s| s.batch.is_some())
    }

    pub fn own_log(&self) -> impl Iterator<Item = (&u64, &BatchSlot)> {
        self.logs[self.local.index()].iter()
    }

    fn slot_mut(&mut self, id: BatchId) -> &mut BatchSlot {
        self.logs[id.rid.index()]
            .entry(id.bid)
            .or_insert_with(BatchSlot::missing)
    }

    fn is_settled(&self, id: BatchId) -> bool {
        id.bid < self.truncated_below[id.rid.index()] || Some(id.bid) <= self.last_committed[id.rid.index()]
    }

    fn store_batch(&mut self, batch: &SharedBatch) -> &mut BatchSlot {
        let slot = self.slot_mut(batch.id);
        match &slot.batch {
            Some(existing) => assert!(
                existing == batch,
                "conflicting content for batch {:?}",
                batch.id
            ),
            None => slot.batch = Some(batch.clone()),
        }
        slot.fetch_at = None;
        slot
    }

    /// A locally cut batch: store it and broadcast.
    pub fn on_local_batch(&mut self, batch: SharedBatch) -> Vec<Outbound> {
        assert_eq!(batch.id.rid, self.local);
        debug_assert_eq!(
            batch.id.bid,
            self.logs[self.local.index()]
                .keys()
                .next_back()
                .map_or(self.truncated_below[self.local.index()], |b| b + 1),
            "own log must stay gapless"
        );
        let slot = self.store_batch(&batch);
        slot.advance(SlotState::Broadcast);
        let mut out = vec![Outbound::all(Message::Batch(batch.clone()))];
        out.extend(self.check_available(batch.id.bid));
        out
    }

    /// A batch delivered by its source. Always acknowledged, duplicates too.
    pub fn on_batch_received(&mut self, batch: SharedBatch) -> Vec<Outbound> {
        let id = batch.id;
        if id.rid == self.local {
            return Vec::new();
        }
        if !self.is_settled(id) {
            let poa = Some(id.bid) <= self.poa_heads[id.rid.index()];
            let slot = self.store_batch(&batch);
            slot.advance(SlotState::Broadcast);
            if slot.poa_pending || poa {
                slot.advance(SlotState::PoaSent);
            }
        }
        vec![Outbound::to(id.rid, Message::Ack(id))]
    }

    pub fn on_ack(&mut self, id: BatchId, from: ReplicaId) -> Vec<Outbound> {
        if id.rid != self.local || from == self.local {
            return Vec::new();
        }
        let Some(slot) = self.logs[self.local.index()].get_mut(&id.bid) else {
            self.unknown_acks += 1;
            return Vec::new();
        };
        slot.acks.insert(from);
        self.check_available(id.bid)
    }

    fn check_available(&mut self, bid: u64) -> Vec<Outbound> {
        let need = self.cfg.peer_acks_needed();
        let slot = self.logs[self.local.index()].get_mut(&bid).expect("own slot");
        if slot.state == SlotState::Broadcast && slot.acks.len() >= need {
            slot.advance(SlotState::Available);
            return self.advance_poa();
        }
        Vec::new()
    }

    /// Broadcasts PoAs for the maximal run of available batches directly
    /// after the current PoA head. Stops at the first gap.
    pub fn advance_poa(&mut self) -> Vec<Outbound> {
        let me = self.local.index();
        let mut out = Vec::new();
        loop {
            let next = after(self.poa_heads[me]);
            let Some(slot) = self.logs[me].get_mut(&next) else {
                break;
            };
            if slot.state != SlotState::Available || slot.sent_poa {
                break;
            }
            slot.sent_poa = true;
            slot.advance(SlotState::PoaSent);
            self.poa_heads[me] = Some(next);
            out.push(Outbound::all(Message::Poa(BatchId {
                rid: self.local,
                bid: next,
            })));
        }
        out
    }

    /// PoA from a source. Missing batches are fetched and remembered so the
    /// PoA applies once the batch shows up.
    pub fn on_poa(&mut self, id: BatchId, now: Micros) -> Vec<Outbound> {
        if id.rid == self.local || self.is_settled(id) {
            return Vec::new();
        }
        let r = id.rid.index();
        self.poa_heads[r] = self.poa_heads[r].max(Some(id.bid));
        let slot = self.slot_mut(id);
        if slot.batch.is_some() {
            slot.advance(SlotState::PoaSent);
            return Vec::new();
        }
        slot.poa_pending = true;
        if slot.fetch_at.is_none() {
            slot.fetch_at = Some(now);
            return vec![Outbound::all(Message::FetchReq(id))];
        }
        Vec::new()
    }

    /// Gossiped PoA head of `rid`: every bid up to it has a PoA. Held batches
    /// move to `PoaSent`; missing ones are fetched when a cut needs them.
    pub fn on_poa_head(&mut self, rid: ReplicaId, head: Option<u64>) {
        if rid == self.local {
            return;
        }
        let r = rid.index();
        if head <= self.poa_heads[r] {
            return;
        }
        let from = after(self.poa_heads[r]);
        self.poa_heads[r] = head;
        if let Some(h) = head {
            for (_, slot) in self.logs[r].range_mut(from..=h) {
                if slot.batch.is_some() {
                    slot.advance(SlotState::PoaSent);
                } else {
                    slot.poa_pending = true;
                }
            }
        }
    }

    pub fn on_fetch_request(&self, id: BatchId, from: ReplicaId) -> Vec<Outbound> {
        match self.slot(id).and_then(|s| s.batch.clone()) {
            Some(b) => vec![Outbound::to(from, Message::FetchResp(b))],
            None => Vec::new(),
        }
    }

    pub fn on_fetch_response(&mut self, batch: SharedBatch) {
        let id = batch.id;
        if id.rid == self.local || self.is_settled(id) {
            return;
        }
        let poa = Some(id.bid) <= self.poa_heads[id.rid.index()];
        let slot = self.store_batch(&batch);
        slot.advance(SlotState::Broadcast);
        if slot.poa_pending || poa {
            slot.advance(SlotState::PoaSent);
        }
    }

    /// Bids in `(last_committed, cut]` per replica, canonical order.
    pub fn gather_ids(&self, cut: &[Option<u64>]) -> Vec<BatchId> {
        let mut ids = Vec::new();
        for (r, c) in cut.iter().enumerate() {
            if let Some(c) = c {
                for bid in after(self.last_committed[r])..=*c {
                    ids.push(BatchId {
                        rid: ReplicaId(r as u32),
                        bid,
                    });
                }
            }
        }
        ids
    }

    /// Batches covered by `cut`, or the ids still missing. Missing batches
    /// get a fetch request unless one is already outstanding.
    pub fn gather(
        &mut self,
        cut: &[Option<u64>],
        now: Micros,
    ) -> Result<Vec<SharedBatch>, (Vec<BatchId>, Vec<Outbound>)> {
        let ids = self.gather_ids(cut);
        let mut batches = Vec::with_capacity(ids.len());
        let mut missing = Vec::new();
        let mut out = Vec::new();
        for id in ids {
            let slot = self.slot_mut(id);
            match &slot.batch {
                Some(b) => batches.push(b.clone()),
                None => {
                    slot.poa_pending = true;
                    if slot.fetch_at.is_none() {
                        slot.fetch_at = Some(now);
                        out.push(Outbound::all(Message::FetchReq(id)));
                    }
                    missing.push(id);
                }
            }
        }
        if missing.is_empty() {
            Ok(batches)
        } else {
            Err((missing, out))
        }
    }

    /// Marks everything up to `cut` committed.
    pub fn mark_committed(&mut self, cut: &[Option<u64>]) {
        for (r, c) in cut.iter().enumerate() {
            if *c <= self.last_committed[r] {
                continue;
            }
            let from = after(self.last_committed[r]);
            let to = c.expect("cut component above last committed");
            for (_, slot) in self.logs[r].range_mut(from..=to) {
                slot.advance(SlotState::Committed);
                slot.fetch_at = None;
            }
            self.last_committed[r] = *c;
            self.poa_heads[r] = self.poa_heads[r].max(*c);
        }
    }

    /// Drops slots at or below `upto` (only ever committed ones).
    pub fn truncate(&mut self, upto: &[Option<u64>]) {
        for (r, u) in upto.iter().enumerate() {
            let Some(u) = *u else { continue };
            let u = match self.last_committed[r] {
                Some(c) => u.min(c),
                None => continue,
            };
            if u + 1 <= self.truncated_below[r] {
                continue;
            }
            self.logs[r] = self.logs[r].split_off(&(u + 1));
            self.truncated_below[r] = u + 1;
        }
    }

    /// Re-sends fetches that have been outstanding longer than the retry
    /// interval.
    pub fn tick(&mut self, now: Micros) -> Vec<Outbound> {
        let retry = self.cfg.fetch_retry;
        let mut out = Vec::new();
        for (r, log) in self.logs.iter_mut().enumerate() {
            for (bid, slot) in log.iter_mut() {
                if let Some(t) = slot.fetch_at {
                    if slot.batch.is_none() && now >= t + retry {
                        slot.fetch_at = Some(now);
                        out.push(Outbound::all(Message::FetchReq(BatchId {
                            rid: ReplicaId(r as u32),
                            bid: *bid,
                        })));
                    }
                }
            }
        }
        out
    }

    pub fn next_fetch_deadline(&self) -> Option<Micros> {
        self.logs
            .iter()
            .flat_map(|l| l.values())
            .filter(|s| s.batch.is_none())
            .filter_map(|s| s.fetch_at)
            .min()
            .map(|t| t + self.cfg.fetch_retry)
    }

    /// Restarts outstanding fetches immediately (after a rejoin).
    pub fn restart_fetches(&mut self, now: Micros) -> Vec<Outbound> {
        for log in &mut self.logs {
            for slot in log.values_mut() {
                if slot.batch.is_none() && slot.fetch_at.is_some() {
                    slot.fetch_at = Some(Micros::ZERO);
                }
            }
        }
        self.tick(now)
    }

    /// Own batches still waiting for acknowledgments.
    pub fn own_unacked(&self) -> Vec<SharedBatch> {
        self.logs[self.local.index()]
            .values()
            .filter(|s| s.state == SlotState::Broadcast)
            .filter_map(|s| s.batch.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Batch;
    use alloc::sync::Arc;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn cfg(n: usize, f: usize, q: AckQuorum) -> DissemConfig {
        DissemConfig {
            n,
            f,
            ack_quorum: q,
            fetch_retry: Micros::from_ms(10),
        }
    }

    fn batch(rid: u32, bid: u64) -> SharedBatch {
        Arc::new(Batch {
            id: BatchId {
                rid: ReplicaId(rid),
                bid,
            },
            txns: Vec::new(),
            hc_flag: false,
        })
    }

    fn poas(out: &[Outbound]) -> Vec<u64> {
        out.iter()
            .filter_map(|o| match o.msg {
                Message::Poa(id) => Some(id.bid),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn fresh_and_duplicate_batches_are_acked() {
        let mut v = LogView::new(ReplicaId(0), cfg(3, 1, AckQuorum::PeersOnly));
        let b = batch(1, 0);
        let out = v.on_batch_received(b.clone());
        assert_eq!(out, vec![Outbound::to(ReplicaId(1), Message::Ack(b.id))]);
        let out = v.on_batch_received(b.clone());
        assert_eq!(out.len(), 1);
        assert_eq!(v.slot(b.id).unwrap().state, SlotState::Broadcast);
    }

    #[test]
    fn peers_only_quorum_needs_f_plus_one_distinct_peers() {
        let mut v = LogView::new(ReplicaId(0), cfg(3, 1, AckQuorum::PeersOnly));
        v.on_local_batch(batch(0, 0));
        let id = BatchId {
            rid: ReplicaId(0),
            bid: 0,
        };
        assert!(v.on_ack(id, ReplicaId(1)).is_empty());
        assert!(v.on_ack(id, ReplicaId(1)).is_empty(), "duplicate ack counted once");
        assert_eq!(v.slot(id).unwrap().state, SlotState::Broadcast);
        let out = v.on_ack(id, ReplicaId(2));
        assert_eq!(poas(&out), vec![0]);
        assert_eq!(v.poa_heads()[0], Some(0));
    }

    #[test]
    fn include_self_quorum_needs_f_peers() {
        let mut v = LogView::new(ReplicaId(0), cfg(3, 1, AckQuorum::IncludeSelf));
        v.on_local_batch(batch(0, 0));
        let out = v.on_ack(
            BatchId {
                rid: ReplicaId(0),
                bid: 0,
            },
            ReplicaId(2),
        );
        assert_eq!(poas(&out), vec![0]);
    }

    #[test]
    fn availability_over_all_ack_subsets() {
        // n=5, f=2, peers-only: available iff at least 3 distinct peers.
        for mask in 0u32..16 {
            let mut v = LogView::new(ReplicaId(0), cfg(5, 2, AckQuorum::PeersOnly));
            v.on_local_batch(batch(0, 0));
            let id = BatchId {
                rid: ReplicaId(0),
                bid: 0,
            };
            for p in 0..4 {
                if mask & (1 << p) != 0 {
                    v.on_ack(id, ReplicaId(p + 1));
                    v.on_ack(id, ReplicaId(p + 1));
                }
            }
            let available = v.slot(id).unwrap().state >= SlotState::Available;
            assert_eq!(available, mask.count_ones() >= 3, "mask {mask:04b}");
        }
    }

    #[test]
    fn poa_waits_for_missing_predecessor() {
        let mut v = LogView::new(ReplicaId(0), cfg(3, 1, AckQuorum::IncludeSelf));
        for b in 0..3 {
            v.on_local_batch(batch(0, b));
        }
        let id = |bid| BatchId {
            rid: ReplicaId(0),
            bid,
        };
        assert_eq!(poas(&v.on_ack(id(0), ReplicaId(1))), vec![0]);
        assert!(poas(&v.on_ack(id(2), ReplicaId(1))).is_empty());
        assert_eq!(v.poa_heads()[0], Some(0));
        assert_eq!(poas(&v.on_ack(id(1), ReplicaId(2))), vec![1, 2]);
    }

    #[test]
    fn poa_head_tracks_available_prefix() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut v = LogView::new(ReplicaId(0), cfg(3, 1, AckQuorum::IncludeSelf));
            let k = rng.random_range(1..20u64);
            for b in 0..k {
                v.on_local_batch(batch(0, b));
            }
            let mut order: Vec<u64> = (0..k).filter(|_| rng.random_bool(0.7)).collect();
            order.shuffle(&mut rng);
            let mut acked = BTreeSet::new();
            let mut sent = Vec::new();
            for b in order {
                let out = v.on_ack(
                    BatchId {
                        rid: ReplicaId(0),
                        bid: b,
                    },
                    ReplicaId(1),
                );
                sent.extend(poas(&out));
                acked.insert(b);
                let prefix = (0..).take_while(|i| acked.contains(i)).count() as u64;
                assert_eq!(after(v.poa_heads()[0]), prefix);
            }
            assert_eq!(sent, (0..sent.len() as u64).collect::<Vec<_>>(), "PoAs are contiguous");
        }
    }

    #[test]
    fn poa_for_missing_batch_fetches_then_applies() {
        let mut v = LogView::new(ReplicaId(0), cfg(3, 1, AckQuorum::IncludeSelf));
        let b = batch(1, 5);
        let out = v.on_poa(b.id, Micros::ZERO);
        assert_eq!(out, vec![Outbound::all(Message::FetchReq(b.id))]);
        assert_eq!(v.poa_heads()[1], Some(5));
        assert!(v.on_poa(b.id, Micros::ZERO).is_empty(), "one outstanding fetch");
        assert_eq!(v.tick(Micros::from_ms(10)).len(), 1, "retried");
        v.on_fetch_response(b.clone());
        assert_eq!(v.slot(b.id).unwrap().state, SlotState::PoaSent);
        assert!(v.tick(Micros::from_ms(100)).is_empty());

        let (missing, out) = v.gather(&[None, Some(5), None], Micros::ZERO).unwrap_err();
        assert_eq!(missing.iter().map(|i| i.bid).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(out.len(), 5);
    }

    #[test]
    fn fetch_served_by_holder() {
        let mut v = LogView::new(ReplicaId(0), cfg(3, 1, AckQuorum::IncludeSelf));
        let b = batch(1, 0);
        v.on_batch_received(b.clone());
        assert_eq!(
            v.on_fetch_request(b.id, ReplicaId(2)),
            vec![Outbound::to(ReplicaId(2), Message::FetchResp(b.clone()))]
        );
        assert!(v
            .on_fetch_request(
                BatchId {
                    rid: ReplicaId(1),
                    bid: 1
                },
                ReplicaId(2)
            )
            .is_empty());
    }

    #[test]
    fn reordered_duplicated_delivery_stores_exactly_the_sent_set() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut v = LogView::new(ReplicaId(0), cfg(4, 1, AckQuorum::IncludeSelf));
        let sent: Vec<SharedBatch> = (0..50).map(|i| batch(1 + i % 3, (i / 3) as u64)).collect();
        let mut deliveries: Vec<SharedBatch> = sent
            .iter()
            .flat_map(|b| core::iter::repeat_n(b.clone(), rng.random_range(1..4)))
            .collect();
        deliveries.shuffle(&mut rng);
        for b in deliveries {
            v.on_batch_received(b);
        }
        let mut held: Vec<BatchId> = (1..4)
            .flat_map(|r| v.logs[r].values().filter_map(|s| s.batch.as_ref().map(|b| b.id)))
            .collect();
        let mut expect: Vec<BatchId> = sent.iter().map(|b| b.id).collect();
        held.sort();
        expect.sort();
        assert_eq!(held, expect);
    }

    #[test]
    fn gather_commit_truncate() {
        let mut v = LogView::new(ReplicaId(0), cfg(3, 1, AckQuorum::IncludeSelf));
        for (r, b) in [(1, 0), (1, 1), (1, 2), (2, 0)] {
            v.on_batch_received(batch(r, b));
        }
        let got = v.gather(&[None, Some(1), Some(0)], Micros::ZERO).unwrap();
        assert_eq!(got.iter().map(|b| (b.id.rid.0, b.id.bid)).collect::<Vec<_>>(), vec![(1, 0), (1, 1), (2, 0)]);
        v.mark_committed(&[None, Some(1), Some(0)]);
        let got = v.gather(&[None, Some(2), Some(0)], Micros::ZERO).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].id.bid, 2);
        v.truncate(&[None, Some(5), Some(0)]);
        assert_eq!(v.truncated_below(ReplicaId(1)), 2, "never past last committed");
        assert!(v.stores(BatchId {
            rid: ReplicaId(1),
            bid: 0
        }));
        assert!(v.slot(BatchId {
            rid: ReplicaId(1),
            bid: 2
        })
        .is_some());
    }
}

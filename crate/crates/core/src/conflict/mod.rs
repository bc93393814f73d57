//! Transaction chains, staleness, the conflict graph and the valid/invalid
//! split of an epoch.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::storage::SnapshotStore;
use crate::types::{Key, ReadSource, ReplicaId, SharedBatch, TxnId, TxnRecord};

pub mod mwis;

pub use mwis::{solve_mwis_exact, solve_mwis_greedy, MwisConfig, MwisStats};

/// Connected component of same-replica transactions linked by reads-from
/// dependencies within one epoch.
#[derive(Clone, Debug)]
pub struct TransactionChain<'a> {
    pub chain_id: TxnId,
    pub rid: ReplicaId,
    /// In seq order.
    pub members: Vec<&'a TxnRecord>,
}

impl<'a> TransactionChain<'a> {
    /// Keys read from the snapshot. Reads served by a chain member are
    /// internal and excluded.
    pub fn read_keys(&self) -> BTreeSet<&'a [u8]> {
        self.members
            .iter()
            .flat_map(|t| t.read_set.iter())
            .filter(|r| matches!(r.source, ReadSource::Snapshot(_)))
            .map(|r| r.key.as_slice())
            .collect()
    }

    pub fn write_keys(&self) -> BTreeSet<&'a [u8]> {
        self.members
            .iter()
            .flat_map(|t| t.write_set.iter())
            .map(|w| w.key.as_slice())
            .collect()
    }

    pub fn weight(&self) -> u64 {
        self.members.len() as u64
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Keep the lower index as root so roots are chain minima.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Chains over the non-high-contention transactions of `batches`, which must
/// be in canonical (rid, bid) order. Chains come out ordered by chain id.
pub fn build_chains(batches: &[SharedBatch]) -> Vec<TransactionChain<'_>> {
    let txns: Vec<&TxnRecord> = batches
        .iter()
        .filter(|b| !b.hc_flag)
        .flat_map(|b| b.txns.iter())
        .collect();
    let index: BTreeMap<TxnId, usize> = txns.iter().enumerate().map(|(i, t)| (t.tid, i)).collect();
    let mut uf = UnionFind::new(txns.len());
    for (i, t) in txns.iter().enumerate() {
        for d in &t.dependencies {
            if let Some(&j) = index.get(d) {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<&TxnRecord>> = BTreeMap::new();
    for i in 0..txns.len() {
        let root = uf.find(i);
        groups.entry(root).or_default().push(txns[i]);
    }
    let mut chains: Vec<TransactionChain<'_>> = groups
        .into_values()
        .map(|mut members| {
            members.sort_by_key(|t| t.tid);
            TransactionChain {
                chain_id: members[0].tid,
                rid: members[0].tid.rid,
                members,
            }
        })
        .collect();
    chains.sort_by_key(|c| c.chain_id);
    chains
}

/// Indices of stale and live chains, plus the number of read checks made.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Staleness {
    pub stale: Vec<usize>,
    pub live: Vec<usize>,
    pub checks: u64,
}

/// A chain is stale if a member's snapshot read has since been superseded,
/// or a member depends on anything outside the chain. Dependencies outside
/// the chain can only point to earlier epochs, whose write-sets this epoch
/// cannot vouch for, so they are treated like stale reads. `prior_invalid`
/// is honored too for callers that track it.
pub fn mark_invalid(
    chains: &[TransactionChain<'_>],
    snapshot: &SnapshotStore,
    prior_invalid: &BTreeSet<TxnId>,
) -> Staleness {
    let mut out = Staleness::default();
    for (i, c) in chains.iter().enumerate() {
        let ids: BTreeSet<TxnId> = c.members.iter().map(|t| t.tid).collect();
        let mut stale = false;
        'members: for t in &c.members {
            for d in &t.dependencies {
                out.checks += 1;
                if !ids.contains(d) || prior_invalid.contains(d) {
                    stale = true;
                    break 'members;
                }
            }
            for r in &t.read_set {
                if let ReadSource::Snapshot(seen) = r.source {
                    out.checks += 1;
                    if snapshot.version(&r.key) != seen {
                        stale = true;
                        break 'members;
                    }
                }
            }
        }
        if stale {
            out.stale.push(i);
        } else {
            out.live.push(i);
        }
    }
    out
}

/// Weighted conflict graph. Vertex order follows chain id order; adjacency
/// lists are sorted and duplicate free.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ConflictGraph {
    pub ids: Vec<TxnId>,
    pub weights: Vec<u64>,
    pub adj: Vec<Vec<usize>>,
}

impl ConflictGraph {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn add_edge(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        if let Err(pos) = self.adj[a].binary_search(&b) {
            self.adj[a].insert(pos, b);
        }
        if let Err(pos) = self.adj[b].binary_search(&a) {
            self.adj[b].insert(pos, a);
        }
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Text dump: `v <chain_id> <weight>` lines then `e <id> <id>` lines.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for (id, w) in self.ids.iter().zip(&self.weights) {
            let _ = writeln!(s, "v {id} {w}");
        }
        for (a, b) in self.edges() {
            let _ = writeln!(s, "e {} {}", self.ids[a], self.ids[b]);
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self, String> {
        let mut g = ConflictGraph::default();
        let mut index = BTreeMap::new();
        let parse_id = |t: &str| -> Result<TxnId, String> {
            let (r, s) = t.split_once(':').ok_or_else(|| alloc::format!("bad chain id {t:?}"))?;
            Ok(TxnId::new(
                r.parse().map_err(|_| alloc::format!("bad rid in {t:?}"))?,
                s.parse().map_err(|_| alloc::format!("bad seq in {t:?}"))?,
            ))
        };
        for (n, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                [] => {}
                ["v", id, w] => {
                    let id = parse_id(id)?;
                    let w = w.parse().map_err(|_| alloc::format!("line {}: bad weight", n + 1))?;
                    index.insert(id, g.ids.len());
                    g.ids.push(id);
                    g.weights.push(w);
                    g.adj.push(Vec::new());
                }
                ["e", a, b] => {
                    let a = *index.get(&parse_id(a)?).ok_or_else(|| alloc::format!("line {}: unknown vertex", n + 1))?;
                    let b = *index.get(&parse_id(b)?).ok_or_else(|| alloc::format!("line {}: unknown vertex", n + 1))?;
                    g.add_edge(a, b);
                }
                _ => return Err(alloc::format!("line {}: unrecognized {line:?}", n + 1)),
            }
        }
        Ok(g)
    }
}

/// Graph over `live` chains: a write-write clique per key and read-write
/// edges from each reader to each writer. Returns the graph and the number
/// of key references scanned.
pub fn create_conflict_graph(chains: &[TransactionChain<'_>], live: &[usize]) -> (ConflictGraph, u64) {
    let mut g = ConflictGraph {
        ids: live.iter().map(|&i| chains[i].chain_id).collect(),
        weights: live.iter().map(|&i| chains[i].weight()).collect(),
        adj: vec![Vec::new(); live.len()],
    };
    let mut writers: BTreeMap<&[u8], Vec<usize>> = BTreeMap::new();
    let mut readers: BTreeMap<&[u8], Vec<usize>> = BTreeMap::new();
    let mut scanned = 0u64;
    for (v, &i) in live.iter().enumerate() {
        for k in chains[i].write_keys() {
            scanned += 1;
            writers.entry(k).or_default().push(v);
        }
        for k in chains[i].read_keys() {
            scanned += 1;
            readers.entry(k).or_default().push(v);
        }
    }
    for (k, ws) in &writers {
        for (x, &a) in ws.iter().enumerate() {
            for &b in &ws[x + 1..] {
                g.add_edge(a, b);
            }
        }
        if let Some(rs) = readers.get(k) {
            for &r in rs {
                for &w in ws {
                    g.add_edge(r, w);
                }
            }
        }
    }
    (g, scanned)
}

/// Which MWIS solver an epoch uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SolverKind {
    #[default]
    Exact,
    Greedy,
}

/// Result of conflict filtering for one epoch.
#[derive(Clone, Debug, Default)]
pub struct Filtered<'a> {
    /// Directly committed chains, by chain id.
    pub valid: Vec<TransactionChain<'a>>,
    /// Stale chains' members.
    pub stale: Vec<&'a TxnRecord>,
    /// Members of live chains left out of the independent set.
    pub conflicting: Vec<&'a TxnRecord>,
    pub stats: FilterStats,
}

/// Work counters for cost accounting.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub txns: u64,
    pub stale_checks: u64,
    pub graph_keys: u64,
    pub graph_edges: u64,
    pub mwis: MwisStats,
}

pub fn filter_conflicts<'a>(
    batches: &'a [SharedBatch],
    snapshot: &SnapshotStore,
    prior_invalid: &BTreeSet<TxnId>,
    solver: SolverKind,
    mwis_cfg: &MwisConfig,
) -> Filtered<'a> {
    let chains = build_chains(batches);
    let st = mark_invalid(&chains, snapshot, prior_invalid);
    let (g, graph_keys) = create_conflict_graph(&chains, &st.live);
    let (sel, mwis_stats) = match solver {
        SolverKind::Exact => solve_mwis_exact(&g, mwis_cfg),
        SolverKind::Greedy => solve_mwis_greedy(&g),
    };
    let stats = FilterStats {
        txns: chains.iter().map(|c| c.members.len() as u64).sum(),
        stale_checks: st.checks,
        graph_keys,
        graph_edges: g.edge_count() as u64,
        mwis: mwis_stats,
    };
    let chosen: BTreeSet<usize> = sel.iter().map(|&v| st.live[v]).collect();
    let mut valid = Vec::new();
    let mut stale = Vec::new();
    let mut conflicting = Vec::new();
    let stale_set: BTreeSet<usize> = st.stale.iter().copied().collect();
    for (i, c) in chains.into_iter().enumerate() {
        if chosen.contains(&i) {
            valid.push(c);
        } else if stale_set.contains(&i) {
            stale.extend(c.members);
        } else {
            conflicting.extend(c.members);
        }
    }
    Filtered {
        valid,
        stale,
        conflicting,
        stats,
    }
}

/// Keys two chains conflict on, for diagnostics and oracles.
pub fn chains_conflict(a_reads: &BTreeSet<Key>, a_writes: &BTreeSet<Key>, b_reads: &BTreeSet<Key>, b_writes: &BTreeSet<Key>) -> bool {
    !a_writes.is_disjoint(b_writes) || !a_writes.is_disjoint(b_reads) || !a_reads.is_disjoint(b_writes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedure::increment;
    use crate::types::{Batch, BatchId, EpochId, ReadEntry, WriteEntry};
    use alloc::sync::Arc;
    use rand::{Rng, SeedableRng};

    fn txn(rid: u32, seq: u64, deps: &[u64], reads: &[(&str, Option<u64>)], writes: &[&str]) -> TxnRecord {
        TxnRecord {
            tid: TxnId::new(rid, seq),
            input: increment(b"x"),
            read_set: reads
                .iter()
                .map(|(k, e)| ReadEntry {
                    key: k.as_bytes().to_vec(),
                    source: ReadSource::Snapshot(e.map(EpochId)),
                })
                .chain(deps.iter().map(|d| ReadEntry {
                    key: alloc::format!("t{d}").into_bytes(),
                    source: ReadSource::Temp(TxnId::new(rid, *d)),
                }))
                .collect(),
            write_set: writes.iter().map(|k| WriteEntry::put(k.as_bytes(), b"v")).collect(),
            dependencies: deps.iter().map(|d| TxnId::new(rid, *d)).collect(),
            client_tag: 0,
        }
    }

    fn batch(rid: u32, bid: u64, txns: Vec<TxnRecord>) -> SharedBatch {
        Arc::new(Batch {
            id: BatchId {
                rid: ReplicaId(rid),
                bid,
            },
            txns,
            hc_flag: false,
        })
    }

    fn dfs_components(n: usize, edges: &[(usize, usize)]) -> BTreeSet<BTreeSet<usize>> {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut out = BTreeSet::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(v) = stack.pop() {
                comp.insert(v);
                for &u in &adj[v] {
                    if !seen[u] {
                        seen[u] = true;
                        stack.push(u);
                    }
                }
            }
            out.insert(comp);
        }
        out
    }

    #[test]
    fn figure3_components_match_dfs() {
        let deps: [&[u64]; 7] = [&[], &[], &[1, 2], &[], &[], &[3, 5], &[]];
        let txns: Vec<TxnRecord> = deps
            .iter()
            .enumerate()
            .map(|(i, d)| txn(0, i as u64 + 1, d, &[], &[]))
            .collect();
        let b = [batch(0, 0, txns)];
        let chains = build_chains(&b);
        let got: BTreeSet<BTreeSet<usize>> = chains
            .iter()
            .map(|c| c.members.iter().map(|t| t.tid.seq as usize - 1).collect())
            .collect();
        let edges: Vec<(usize, usize)> = deps
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.iter().map(move |&p| (i, p as usize - 1)))
            .collect();
        assert_eq!(got, dfs_components(7, &edges));
        assert_eq!(chains.len(), 3);
        assert_eq!(chains[0].chain_id, TxnId::new(0, 1));
    }

    #[test]
    fn random_dependency_forests_match_dfs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..30usize);
            let mut deps = vec![Vec::new(); n];
            for i in 1..n {
                for p in 0..i {
                    if rng.random_bool(0.08) {
                        deps[i].push(p as u64 + 1);
                    }
                }
            }
            let txns: Vec<TxnRecord> = (0..n).map(|i| txn(1, i as u64 + 1, &deps[i], &[], &[])).collect();
            let split = rng.random_range(0..=n);
            let b = [batch(1, 0, txns[..split].to_vec()), batch(1, 1, txns[split..].to_vec())];
            let got: BTreeSet<BTreeSet<usize>> = build_chains(&b)
                .iter()
                .map(|c| c.members.iter().map(|t| t.tid.seq as usize - 1).collect())
                .collect();
            let edges: Vec<(usize, usize)> = deps
                .iter()
                .enumerate()
                .flat_map(|(i, d)| d.iter().map(move |&p| (i, p as usize - 1)))
                .collect();
            assert_eq!(got, dfs_components(n, &edges));
        }
    }

    #[test]
    fn independent_txns_are_singletons_and_chains_merge_across_batches() {
        let b = [batch(0, 0, vec![txn(0, 1, &[], &[], &[]), txn(0, 2, &[], &[], &[])])];
        assert_eq!(build_chains(&b).len(), 2);
        let b = [
            batch(0, 0, vec![txn(0, 1, &[], &[], &["a"])]),
            batch(0, 1, vec![txn(0, 2, &[1], &[], &["b"])]),
        ];
        let c = build_chains(&b);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].weight(), 2);
    }

    #[test]
    fn staleness_by_version_and_external_dependency() {
        let mut snap = SnapshotStore::new();
        snap.apply_committed(&[WriteEntry::put(*b"k", *b"v")], EpochId(5));
        let b = [
            batch(0, 0, vec![txn(0, 1, &[], &[("k", Some(3))], &[])]),
            batch(1, 0, vec![txn(1, 1, &[], &[("k", Some(5))], &[])]),
            batch(2, 0, vec![txn(2, 7, &[4], &[], &[])]),
            batch(3, 0, vec![txn(3, 1, &[], &[("absent", None)], &[])]),
        ];
        let chains = build_chains(&b);
        let st = mark_invalid(&chains, &snap, &BTreeSet::new());
        assert_eq!(st.stale, vec![0, 2]);
        assert_eq!(st.live, vec![1, 3]);
    }

    #[test]
    fn figure5_edges() {
        // c4 writes a; c5 writes a,b; c6 reads b.
        let b = [
            batch(0, 0, vec![txn(0, 1, &[], &[], &["a"])]),
            batch(1, 0, vec![txn(1, 1, &[], &[], &["a", "b"])]),
            batch(2, 0, vec![txn(2, 1, &[], &[("b", None)], &[])]),
        ];
        let chains = build_chains(&b);
        let (g, _) = create_conflict_graph(&chains, &[0, 1, 2]);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn triangle_on_shared_item() {
        let b = [
            batch(0, 0, vec![txn(0, 1, &[], &[], &["x"])]),
            batch(1, 0, (1..=5).map(|s| txn(1, s, if s > 1 { &[1] } else { &[] }, &[], &["x"])).collect()),
            batch(2, 0, vec![txn(2, 1, &[], &[("x", None)], &[])]),
        ];
        let chains = build_chains(&b);
        let (g, _) = create_conflict_graph(&chains, &[0, 1, 2]);
        assert_eq!(g.weights, vec![1, 5, 1]);
        assert_eq!(g.edge_count(), 3);
    }

    #[test]
    fn graph_matches_pairwise_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let keys = ["a", "b", "c", "d", "e", "f", "g", "h"];
        for _ in 0..100 {
            let batches: Vec<SharedBatch> = (0..20u32)
                .map(|i| {
                    let reads: Vec<(&str, Option<u64>)> =
                        keys.iter().filter(|_| rng.random_bool(0.15)).map(|k| (*k, None)).collect();
                    let writes: Vec<&str> = keys.iter().filter(|_| rng.random_bool(0.15)).copied().collect();
                    batch(i % 4, (i / 4) as u64, vec![txn(i % 4, i as u64 + 1, &[], &reads, &writes)])
                })
                .collect();
            let mut sorted = batches.clone();
            sorted.sort_by_key(|b| b.id);
            let chains = build_chains(&sorted);
            let live: Vec<usize> = (0..chains.len()).collect();
            let (g, _) = create_conflict_graph(&chains, &live);
            for a in 0..chains.len() {
                for b in a + 1..chains.len() {
                    let (ra, wa) = (chains[a].read_keys(), chains[a].write_keys());
                    let (rb, wb) = (chains[b].read_keys(), chains[b].write_keys());
                    let expect = !wa.is_disjoint(&wb) || !wa.is_disjoint(&rb) || !ra.is_disjoint(&wb);
                    assert_eq!(g.adj[a].contains(&b), expect);
                }
            }
        }
    }

    #[test]
    fn figure5_filter_and_partition() {
        let b = [
            batch(0, 0, vec![txn(0, 1, &[], &[], &["x"])]),
            batch(1, 0, (1..=5).map(|s| txn(1, s, if s > 1 { &[1] } else { &[] }, &[], &["x"])).collect()),
            batch(2, 0, vec![txn(2, 1, &[], &[("x", None)], &[])]),
            batch(3, 0, vec![txn(3, 1, &[], &[], &["a"])]),
            batch(4, 0, vec![txn(4, 1, &[], &[], &["a", "b"])]),
            batch(5, 0, vec![txn(5, 1, &[], &[("b", None)], &[])]),
        ];
        let f = filter_conflicts(&b, &SnapshotStore::new(), &BTreeSet::new(), SolverKind::Exact, &MwisConfig::default());
        let valid: Vec<u32> = f.valid.iter().map(|c| c.rid.0).collect();
        assert_eq!(valid, vec![1, 3, 5]);
        let mut bad: Vec<u32> = f.conflicting.iter().map(|t| t.tid.rid.0).collect();
        bad.sort();
        assert_eq!(bad, vec![0, 2, 4]);
        let total: usize = f.valid.iter().map(|c| c.members.len()).sum::<usize>() + f.conflicting.len() + f.stale.len();
        assert_eq!(total, 10);
    }

    #[test]
    fn edge_list_roundtrip() {
        let b = [
            batch(0, 0, vec![txn(0, 1, &[], &[], &["a"])]),
            batch(1, 0, vec![txn(1, 1, &[], &[], &["a", "b"])]),
            batch(2, 0, vec![txn(2, 1, &[], &[("b", None)], &[])]),
        ];
        let chains = build_chains(&b);
        let (g, _) = create_conflict_graph(&chains, &[0, 1, 2]);
        let text = g.to_edge_list();
        assert_eq!(text, "v 0:1 1\nv 1:1 1\nv 2:1 1\ne 0:1 1:1\ne 1:1 2:1\n");
        assert_eq!(ConflictGraph::from_edge_list(&text).unwrap(), g);
        assert!(ConflictGraph::from_edge_list("x 1").is_err());
    }
}

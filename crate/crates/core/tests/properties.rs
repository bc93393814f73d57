use std::collections::BTreeSet;
use std::sync::Arc;

use epochkv_core::conflict::mwis::{solve_mwis_exact, solve_mwis_greedy, weight_of, MwisConfig};
use epochkv_core::conflict::{chains_conflict, filter_conflicts, ConflictGraph, SolverKind};
use epochkv_core::cutlog::{cut_dominates, next_cut};
use epochkv_core::detlock::{schedule_and_execute, schedule_and_execute_with, Plan};
use epochkv_core::message::Message;
use epochkv_core::procedure::{add_from, increment, put, Registry};
use epochkv_core::storage::SnapshotStore;
use epochkv_core::{
    Batch, BatchId, EpochId, Procedure, ReadEntry, ReadSource, ReplicaId, TxnId, TxnRecord, WriteEntry,
};
use proptest::prelude::*;

fn graph(n: usize, weights: &[u64], edges: &[(usize, usize)]) -> ConflictGraph {
    let mut g = ConflictGraph {
        ids: (0..n).map(|i| TxnId::new(0, i as u64 + 1)).collect(),
        weights: weights[..n].to_vec(),
        adj: vec![Vec::new(); n],
    };
    for &(a, b) in edges {
        g.add_edge(a % n, b % n);
    }
    g
}

fn independent(g: &ConflictGraph, s: &[usize]) -> bool {
    s.iter().all(|&v| s.iter().all(|u| !g.adj[v].contains(u)))
}

fn arb_graph() -> impl Strategy<Value = ConflictGraph> {
    (1usize..=10)
        .prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec(1u64..=8, n),
                prop::collection::vec((0..n, 0..n), 0..n * 3),
            )
        })
        .prop_map(|(n, w, e)| graph(n, &w, &e))
}

fn brute_force_max(g: &ConflictGraph) -> u64 {
    let n = g.len();
    (0u32..1 << n)
        .filter_map(|mask| {
            let s: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            independent(g, &s).then(|| weight_of(g, &s))
        })
        .max()
        .unwrap_or(0)
}

fn key(i: u8) -> Vec<u8> {
    vec![b'k', b'0' + i]
}

fn arb_proc() -> impl Strategy<Value = Procedure> {
    prop_oneof![
        (0u8..6).prop_map(|k| increment(&key(k))),
        (0u8..6, any::<u8>()).prop_map(|(k, v)| put(&key(k), &[v])),
        (0u8..6, 0u8..6, -5i64..5).prop_map(|(a, b, d)| add_from(&key(a), &key(b), d)),
    ]
}

fn record(rid: u32, seq: u64, input: Procedure, reads: &[Vec<u8>], writes: &[Vec<u8>]) -> TxnRecord {
    TxnRecord {
        tid: TxnId::new(rid, seq),
        input,
        read_set: reads
            .iter()
            .map(|k| ReadEntry {
                key: k.clone(),
                source: ReadSource::Snapshot(None),
            })
            .collect(),
        write_set: writes.iter().map(|k| WriteEntry::put(k.clone(), *b"v")).collect(),
        dependencies: BTreeSet::new(),
        client_tag: seq,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn exact_mwis_is_optimal_and_independent(g in arb_graph()) {
        let (sel, stats) = solve_mwis_exact(&g, &MwisConfig::default());
        prop_assert_eq!(stats.greedy_fallbacks, 0);
        prop_assert!(independent(&g, &sel));
        prop_assert_eq!(weight_of(&g, &sel), brute_force_max(&g));
    }

    #[test]
    fn greedy_is_independent_maximal_and_bounded(g in arb_graph()) {
        let (sel, _) = solve_mwis_greedy(&g);
        prop_assert!(independent(&g, &sel));
        for v in 0..g.len() {
            if !sel.contains(&v) {
                prop_assert!(g.adj[v].iter().any(|u| sel.contains(u)), "vertex {} could be added", v);
            }
        }
        let bound: f64 = (0..g.len()).map(|v| g.weights[v] as f64 / (g.adj[v].len() + 1) as f64).sum();
        prop_assert!(weight_of(&g, &sel) as f64 >= bound - 1e-9);
    }

    #[test]
    fn next_cut_is_the_clamped_max(
        prev in prop::collection::vec(prop::option::of(0u64..20), 4),
        heads in prop::collection::vec(prop::option::of(0u64..20), 4),
    ) {
        match next_cut(&prev, &heads) {
            None => prop_assert!(cut_dominates(&prev, &heads)),
            Some(p) => {
                prop_assert!(cut_dominates(&p.cut, &prev));
                prop_assert!(cut_dominates(&p.cut, &heads));
                prop_assert!(p.cut.iter().zip(prev.iter().zip(&heads)).all(|(c, (a, b))| c == a || c == b));
                prop_assert_ne!(p.cut, prev);
            }
        }
    }

    /// Whatever order runnable transactions start in, the outcome is that
    /// of running them one by one in plan order.
    #[test]
    fn detlock_equals_serial_order(
        procs in prop::collection::vec(arb_proc(), 1..30),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 30),
    ) {
        let reg = Registry::with_builtins();
        let txns: Vec<TxnRecord> = procs
            .into_iter()
            .enumerate()
            .map(|(i, p)| record(0, i as u64 + 1, p, &[], &[]))
            .collect();
        let plan = Plan::new(txns.iter().collect(), &reg).unwrap();

        let mut serial_store = SnapshotStore::new();
        let mut serial = Vec::new();
        for t in &txns {
            let one = Plan::new(vec![t], &reg).unwrap();
            serial.extend(schedule_and_execute(&one, &reg, &mut serial_store, EpochId(0)).unwrap());
        }

        let mut store = SnapshotStore::new();
        let mut k = 0;
        let out = schedule_and_execute_with(&plan, &reg, &mut store, EpochId(0), |r| {
            let v: Vec<usize> = r.iter().copied().collect();
            k += 1;
            v[picks[k % picks.len()].index(v.len())]
        })
        .unwrap();
        prop_assert_eq!(out, serial);
        prop_assert_eq!(store, serial_store);
    }

    /// Every transaction lands in exactly one class and valid chains never
    /// conflict with each other.
    #[test]
    fn filter_partitions_and_valid_chains_are_disjoint(
        txns in prop::collection::vec(
            (0u32..3, prop::collection::vec(0u8..8, 0..3), prop::collection::vec(0u8..8, 0..3)),
            1..24,
        ),
    ) {
        let mut by_rid: Vec<Vec<TxnRecord>> = vec![Vec::new(); 3];
        for (rid, reads, writes) in txns {
            let seq = by_rid[rid as usize].len() as u64 + 1;
            let reads: Vec<Vec<u8>> = reads.into_iter().map(key).collect();
            let writes: Vec<Vec<u8>> = writes.into_iter().map(key).collect();
            by_rid[rid as usize].push(record(rid, seq, put(b"x", b"1"), &reads, &writes));
        }
        let total: usize = by_rid.iter().map(Vec::len).sum();
        let batches: Vec<Arc<Batch>> = by_rid
            .into_iter()
            .enumerate()
            .filter(|(_, t)| !t.is_empty())
            .map(|(r, txns)| {
                Arc::new(Batch {
                    id: BatchId { rid: ReplicaId(r as u32), bid: 0 },
                    txns,
                    hc_flag: false,
                })
            })
            .collect();
        let f = filter_conflicts(&batches, &SnapshotStore::new(), &BTreeSet::new(), SolverKind::Exact, &MwisConfig::default());
        let mut seen = BTreeSet::new();
        for t in f.valid.iter().flat_map(|c| c.members.iter()).chain(&f.stale).chain(&f.conflicting) {
            prop_assert!(seen.insert(t.tid));
        }
        prop_assert_eq!(seen.len(), total);
        prop_assert!(f.stale.is_empty());
        let sets: Vec<(BTreeSet<Vec<u8>>, BTreeSet<Vec<u8>>)> = f
            .valid
            .iter()
            .map(|c| {
                (
                    c.read_keys().into_iter().map(<[u8]>::to_vec).collect(),
                    c.write_keys().into_iter().map(<[u8]>::to_vec).collect(),
                )
            })
            .collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                prop_assert!(!chains_conflict(&sets[i].0, &sets[i].1, &sets[j].0, &sets[j].1));
            }
        }
    }

    #[test]
    fn frames_roundtrip_and_truncation_is_detected(
        procs in prop::collection::vec(arb_proc(), 0..6),
        bid in any::<u64>(),
        cut in 1usize..200,
    ) {
        let txns = procs
            .into_iter()
            .enumerate()
            .map(|(i, p)| record(1, i as u64 + 1, p, &[key(1)], &[key(2)]))
            .collect();
        let msg = Message::Batch(Arc::new(Batch {
            id: BatchId { rid: ReplicaId(1), bid },
            txns,
            hc_flag: false,
        }));
        let frame = msg.to_frame();
        let (back, used) = Message::from_frame(&frame).unwrap().unwrap();
        prop_assert_eq!(used, frame.len());
        prop_assert_eq!(back, msg);
        let short = &frame[..cut.min(frame.len() - 1)];
        prop_assert!(matches!(Message::from_frame(short), Ok(None)));
    }
}

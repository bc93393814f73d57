use epochkv::config::{ConsensusChoice, CrashSpec, SimConfig, WorkloadKind};
use epochkv::history::{CommitHistory, StoreDump};
use epochkv::metrics::{epochs_csv, RunSummary};
use epochkv::sim::run_simulation;
use epochkv::workload::INITIAL_STOCK;
use epochkv_core::procedure::{decode_counter, decode_new_order, stock_quantity, NEW_ORDER};
use epochkv_core::Micros;
use proptest::prelude::*;

fn ycsb(n: usize, latency: f64, zipf: f64, seed: u64) -> SimConfig {
    let mut c = SimConfig::default();
    c.n = n;
    c.f = (n - 1) / 2;
    c.seed = seed;
    c.latency.base_ms = latency;
    c.latency.jitter_ms = if latency > 0.0 { 5.0 } else { 0.0 };
    c.workload.zipf = zipf;
    c.workload.total_txns = Some(1_000);
    c.workload.clients_per_replica = 10;
    c
}

#[test]
fn three_replicas_pass_the_oracle() {
    let out = run_simulation(ycsb(3, 50.0, 0.0, 1));
    out.verify().unwrap();
    assert_eq!(out.acks.len(), 1_000);
}



fn summary(c: SimConfig) -> RunSummary {
    let warmup = Micros::from_ms_f64(c.warmup_ms);
    let out = run_simulation(c);
    out.verify().unwrap();
    RunSummary::from_run(&out, warmup)
}

#[test]
fn same_seed_same_bytes() {
    let c = ycsb(3, 50.0, 0.99, 11);
    let a = run_simulation(c.clone());
    let b = run_simulation(c);
    assert_eq!(a.history().encode(), b.history().encode());
    assert_eq!(epochs_csv(&a.epochs), epochs_csv(&b.epochs));
    assert_eq!(RunSummary::from_run(&a, Micros::ZERO), RunSummary::from_run(&b, Micros::ZERO));
    let other = run_simulation(ycsb(3, 50.0, 0.99, 12));
    assert_ne!(a.history().encode(), other.history().encode());
}

#[test]
fn crashed_follower_rejoins_and_converges() {
    let mut c = ycsb(3, 20.0, 0.5, 3);
    c.workload.total_txns = Some(1_500);
    c.crashes = vec![CrashSpec {
        replica: 2,
        at_ms: 1_500.0,
        rejoin_ms: Some(2_500.0),
    }];
    let out = run_simulation(c);
    assert!(out.correct.iter().all(|&c| c));
    out.verify().unwrap();
    assert_eq!(out.stores[0], out.stores[2]);
    assert_eq!(out.acks.len(), 1_500);
}

#[test]
fn replica_down_at_the_end_holds_a_prefix() {
    let mut c = ycsb(5, 10.0, 0.0, 4);
    c.crashes = vec![
        CrashSpec {
            replica: 1,
            at_ms: 1_200.0,
            rejoin_ms: None,
        },
        CrashSpec {
            replica: 3,
            at_ms: 1_400.0,
            rejoin_ms: None,
        },
    ];
    let out = run_simulation(c);
    assert_eq!(out.correct, vec![true, false, true, false, true]);
    out.verify().unwrap();
    assert!(out.histories[1].epochs.len() < out.history().epochs.len());
}

#[test]
fn micro_tpcc_conserves_stock() {
    let mut c = SimConfig::default();
    c.seed = 5;
    c.latency.base_ms = 10.0;
    c.workload.kind = WorkloadKind::MicroTpcc;
    c.workload.warehouses = 4;
    c.workload.items = 50;
    c.workload.total_txns = Some(600);
    let out = run_simulation(c);
    let flat = out.verify().unwrap();

    let stock = |s: &epochkv_core::storage::SnapshotStore| -> i64 {
        (0..4u32)
            .flat_map(|w| (0..50u32).map(move |i| stock_quantity(w, i)))
            .map(|k| decode_counter(&k, s.get(&k).map(|v| &v[..])).unwrap())
            .sum()
    };
    let mut ordered = 0i64;
    let mut orders = 0;
    for e in &out.history().epochs {
        let done = e
            .valid
            .iter()
            .flatten()
            .map(|t| &t.input)
            .chain(e.reexec.iter().filter(|r| !r.failed).map(|r| &r.txn.input));
        for p in done.filter(|p| p.name == NEW_ORDER) {
            let no = decode_new_order(&p.params).unwrap();
            ordered += no.lines.iter().map(|(_, q)| i64::from(*q)).sum::<i64>();
            orders += 1;
        }
    }
    assert!(orders > 100);
    assert_eq!(stock(&out.initial), 4 * 50 * INITIAL_STOCK);
    assert_eq!(stock(&out.initial) - ordered, stock(&flat));
    assert_eq!(stock(&flat), stock(&out.stores[1]));
}

#[test]
fn throughput_does_not_rise_with_latency() {
    let t: Vec<f64> = [0.0, 50.0, 100.0, 200.0]
        .into_iter()
        .map(|l| {
            let mut c = ycsb(3, l, 0.0, 21);
            c.latency.jitter_ms = 0.0;
            c.workload.total_txns = None;
            c.duration_ms = 8_000.0;
            summary(c).throughput_tps
        })
        .collect();
    assert!(t.windows(2).all(|w| w[0] >= w[1]), "{t:?}");
}

#[test]
fn shorter_epochs_are_not_slower() {
    let t: Vec<f64> = [5.0, 15.0, 50.0]
        .into_iter()
        .map(|e| {
            let mut c = ycsb(3, 2.0, 0.0, 22);
            c.protocol.epoch_interval_ms = e;
            c.workload.total_txns = None;
            c.warmup_ms = 1_500.0;
            c.duration_ms = 6_000.0;
            summary(c).throughput_tps
        })
        .collect();
    assert!(t.windows(2).all(|w| w[0] >= w[1]), "{t:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Random small clusters with a crash schedule within tolerance always
    /// pass the full audit, and dumps survive a round-trip.
    #[test]
    fn random_clusters_pass_the_audit(
        seed in any::<u64>(),
        five in any::<bool>(),
        latency in 0.0f64..80.0,
        zipf in 0.0f64..1.2,
        crash_at in 500.0f64..3_000.0,
        rejoin in prop::option::of(200.0f64..2_000.0),
        sequencer in any::<bool>(),
    ) {
        let n = if five { 5 } else { 3 };
        let mut c = ycsb(n, latency, zipf, seed);
        c.workload.total_txns = Some(400);
        c.workload.records = 200;
        if sequencer {
            c.protocol.consensus = ConsensusChoice::Sequencer;
        } else {
            c.crashes = vec![CrashSpec {
                replica: (seed % n as u64) as u32,
                at_ms: crash_at,
                rejoin_ms: rejoin.map(|d| crash_at + d),
            }];
        }
        let out = run_simulation(c);
        let flat = out.verify();
        prop_assert!(flat.is_ok(), "{:?}", flat.err());
        let h = out.history();
        prop_assert_eq!(&CommitHistory::decode(&h.encode()).unwrap(), h);
        let dump = out.store_dump();
        prop_assert_eq!(StoreDump::decode(&dump.encode()).unwrap(), dump);
    }
}

//! Client workload generators and their initial databases.

use epochkv_core::procedure::{
    customer_balance, district_next_order, district_ytd, encode_counter, increment, item_price, new_order, payment,
    stock_quantity, warehouse_ytd, ycsb, NewOrderParams, PaymentParams, YcsbOp,
};
use epochkv_core::storage::SnapshotStore;
use epochkv_core::{Key, Procedure};
use rand::Rng;
use rand_distr::{Distribution, Zipf};

use crate::config::{WorkloadKind, WorkloadSpec};

/// Initial stock per (warehouse, item).
pub const INITIAL_STOCK: i64 = 1_000_000;

pub fn ycsb_key(i: u64) -> Key {
    format!("user{i:010}").into_bytes()
}

pub fn counter_key(i: u64) -> Key {
    format!("ctr{i:08}").into_bytes()
}

/// Draws ranks in `0..n`; rank 0 is the hottest. Coefficient 0 is uniform.
#[derive(Clone, Debug)]
pub struct KeyChooser {
    zipf: Zipf<f64>,
    n: u64,
}

impl KeyChooser {
    pub fn new(n: u64, s: f64) -> Self {
        KeyChooser {
            zipf: Zipf::new(n as f64, s).expect("validated zipf parameters"),
            n,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        (self.zipf.sample(rng) as u64).clamp(1, self.n) - 1
    }
}

#[derive(Clone, Debug)]
pub struct Workload {
    spec: WorkloadSpec,
    keys: KeyChooser,
}

impl Workload {
    pub fn new(spec: &WorkloadSpec) -> Self {
        Workload {
            keys: KeyChooser::new(spec.records, spec.zipf),
            spec: spec.clone(),
        }
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn initial_store(&self) -> SnapshotStore {
        let s = &self.spec;
        match s.kind {
            WorkloadKind::YcsbA => SnapshotStore::preloaded((0..s.records).map(|i| {
                let mut v = vec![0u8; s.value_len as usize];
                for (j, b) in v.iter_mut().enumerate() {
                    *b = (i as usize).wrapping_mul(31).wrapping_add(j) as u8;
                }
                (ycsb_key(i), v)
            })),
            WorkloadKind::Increment => SnapshotStore::new(),
            WorkloadKind::MicroTpcc => {
                let mut data = Vec::new();
                for item in 0..s.items {
                    data.push((item_price(item), encode_counter(1 + i64::from(item % 100))));
                }
                for w in 0..s.warehouses {
                    data.push((warehouse_ytd(w), encode_counter(0)));
                    for item in 0..s.items {
                        data.push((stock_quantity(w, item), encode_counter(INITIAL_STOCK)));
                    }
                    for d in 0..s.districts {
                        data.push((district_ytd(w, d), encode_counter(0)));
                        data.push((district_next_order(w, d), encode_counter(0)));
                        for c in 0..s.customers {
                            data.push((customer_balance(w, d, c), encode_counter(0)));
                        }
                    }
                }
                SnapshotStore::preloaded(data)
            }
        }
    }

    /// Next transaction for a client. `uid` must be unique per call across
    /// the whole run; it names inserted rows.
    pub fn next<R: Rng + ?Sized>(&self, rng: &mut R, uid: u64) -> Procedure {
        let s = &self.spec;
        match s.kind {
            WorkloadKind::YcsbA => {
                let mut picked: Vec<u64> = Vec::with_capacity(s.ops_per_txn as usize);
                while picked.len() < s.ops_per_txn as usize {
                    let k = self.keys.sample(rng);
                    if !picked.contains(&k) {
                        picked.push(k);
                    }
                }
                let ops: Vec<YcsbOp> = picked
                    .into_iter()
                    .map(|k| {
                        if rng.random_bool(s.read_fraction) {
                            YcsbOp::Read(ycsb_key(k))
                        } else {
                            YcsbOp::Write(ycsb_key(k), rng.random())
                        }
                    })
                    .collect();
                ycsb(&ops, s.value_len)
            }
            WorkloadKind::Increment => increment(&counter_key(self.keys.sample(rng))),
            WorkloadKind::MicroTpcc => {
                let warehouse = rng.random_range(0..s.warehouses);
                let district = rng.random_range(0..s.districts);
                if rng.random_bool(0.5) {
                    let n = rng.random_range(5..=15usize);
                    let mut lines: Vec<(u32, u32)> = Vec::with_capacity(n);
                    while lines.len() < n {
                        let item = rng.random_range(0..s.items);
                        if lines.iter().all(|(i, _)| *i != item) {
                            lines.push((item, rng.random_range(1..=10)));
                        }
                    }
                    new_order(&NewOrderParams {
                        warehouse,
                        district,
                        order_uid: uid,
                        lines,
                    })
                } else {
                    payment(&PaymentParams {
                        warehouse,
                        district,
                        customer: rng.random_range(0..s.customers),
                        amount: rng.random_range(1..=5000),
                    })
                }
            }
        }
    }
}

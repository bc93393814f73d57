//! Registered deterministic one-shot procedures.
//!
//! Every procedure is a pure function of its parameter bytes and the values it
//! reads, and can report its complete key sets from the parameters alone.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::hash::Hasher;

use fnv::FnvHasher;
use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::types::{Key, Procedure, Value, WriteEntry, WriteOp};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProcError {
    #[error("unknown procedure {0:?}")]
    Unknown(String),
    #[error("bad parameters for {name}: {source}")]
    BadParams {
        name: String,
        #[source]
        source: DecodeError,
    },
    #[error("procedure touched undeclared key {key:?}")]
    Undeclared { key: Key },
    #[error("stored value for {key:?} is not a counter")]
    BadValue { key: Key },
}

/// Statically declared key sets, sorted and deduplicated.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeySets {
    pub reads: BTreeSet<Key>,
    pub writes: BTreeSet<Key>,
}

impl KeySets {
    pub fn all(&self) -> impl Iterator<Item = &Key> {
        self.reads.union(&self.writes)
    }
}

/// Read access handed to a procedure body.
pub trait ReadView {
    fn read(&mut self, key: &[u8]) -> Result<Option<Value>, ProcError>;
}

/// Writes produced by a procedure, last write per key wins.
#[derive(Default, Debug)]
pub struct WriteBuffer {
    writes: BTreeMap<Key, WriteOp>,
}

impl WriteBuffer {
    pub fn put(&mut self, key: Key, value: Value) {
        self.writes.insert(key, WriteOp::Put(value));
    }

    pub fn delete(&mut self, key: Key) {
        self.writes.insert(key, WriteOp::Delete);
    }

    pub fn get(&self, key: &[u8]) -> Option<&WriteOp> {
        self.writes.get(key)
    }

    pub fn into_entries(self) -> Vec<WriteEntry> {
        self.writes
            .into_iter()
            .map(|(key, op)| WriteEntry { key, op })
            .collect()
    }
}

pub trait ProcedureLogic: Send + Sync {
    fn declare(&self, params: &[u8]) -> Result<KeySets, DecodeError>;
    fn execute(
        &self,
        params: &[u8],
        view: &mut dyn ReadView,
        out: &mut WriteBuffer,
    ) -> Result<(), ProcError>;
}

/// Catalog of procedures by name, configured at startup.
#[derive(Clone, Default)]
pub struct Registry {
    procs: BTreeMap<String, Arc<dyn ProcedureLogic>>,
}

impl core::fmt::Debug for Registry {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_set().entries(self.procs.keys()).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding every built-in procedure.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(INCREMENT, Box::new(Increment));
        r.register(PUT, Box::new(Put));
        r.register(DELETE, Box::new(Delete));
        r.register(ADD_FROM, Box::new(AddFrom));
        r.register(YCSB, Box::new(Ycsb));
        r.register(NEW_ORDER, Box::new(NewOrder));
        r.register(PAYMENT, Box::new(Payment));
        r
    }

    pub fn register(&mut self, name: &str, logic: Box<dyn ProcedureLogic>) {
        self.procs.insert(name.to_string(), Arc::from(logic));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<dyn ProcedureLogic>, ProcError> {
        self.procs
            .get(name)
            .ok_or_else(|| ProcError::Unknown(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.procs.keys().map(String::as_str)
    }

    pub fn probe(&self, p: &Procedure) -> Result<KeySets, ProcError> {
        self.get(&p.name)?
            .declare(&p.params)
            .map_err(|source| ProcError::BadParams {
                name: p.name.clone(),
                source,
            })
    }

    /// Runs the procedure body against `view` and returns its write-set in
    /// key order.
    pub fn run(&self, p: &Procedure, view: &mut dyn ReadView) -> Result<Vec<WriteEntry>, ProcError> {
        let mut out = WriteBuffer::default();
        self.get(&p.name)?.execute(&p.params, view, &mut out)?;
        Ok(out.into_entries())
    }
}

pub const INCREMENT: &str = "increment";
pub const PUT: &str = "put";
pub const DELETE: &str = "delete";
pub const ADD_FROM: &str = "add_from";
pub const YCSB: &str = "ycsb";
pub const NEW_ORDER: &str = "new_order";
pub const PAYMENT: &str = "payment";

/// Counters are stored as 8-byte little-endian signed integers; absent is 0.
pub fn decode_counter(key: &[u8], v: Option<&[u8]>) -> Result<i64, ProcError> {
    match v {
        None => Ok(0),
        Some(b) if b.len() == 8 => {
            let mut a = [0u8; 8];
            a.copy_from_slice(b);
            Ok(i64::from_le_bytes(a))
        }
        Some(_) => Err(ProcError::BadValue { key: key.to_vec() }),
    }
}

pub fn encode_counter(v: i64) -> Value {
    v.to_le_bytes().to_vec()
}

fn read_counter(view: &mut dyn ReadView, key: &[u8]) -> Result<i64, ProcError> {
    let v = view.read(key)?;
    decode_counter(key, v.as_deref())
}

fn single_key(params: &[u8]) -> Result<Key, DecodeError> {
    let mut d = Decoder::new(params);
    let k = d.bytes()?;
    d.finish()?;
    Ok(k)
}

fn sets(reads: &[&Key], writes: &[&Key]) -> KeySets {
    KeySets {
        reads: reads.iter().map(|k| (*k).clone()).collect(),
        writes: writes.iter().map(|k| (*k).clone()).collect(),
    }
}

/// `increment(key)`: read-modify-write adding one.
struct Increment;

pub fn increment(key: &[u8]) -> Procedure {
    let mut e = Encoder::new();
    e.bytes(key);
    Procedure::new(INCREMENT, e.finish())
}

impl ProcedureLogic for Increment {
    fn declare(&self, params: &[u8]) -> Result<KeySets, DecodeError> {
        let k = single_key(params)?;
        Ok(sets(&[&k], &[&k]))
    }

    fn execute(&self, params: &[u8], view: &mut dyn ReadView, out: &mut WriteBuffer) -> Result<(), ProcError> {
        let k = single_key(params).map_err(|source| bad(INCREMENT, source))?;
        let n = read_counter(view, &k)?;
        out.put(k, encode_counter(n.wrapping_add(1)));
        Ok(())
    }
}

fn bad(name: &str, source: DecodeError) -> ProcError {
    ProcError::BadParams {
        name: name.to_string(),
        source,
    }
}

/// `put(key, value)`: blind write.
struct Put;

pub fn put(key: &[u8], value: &[u8]) -> Procedure {
    let mut e = Encoder::new();
    e.bytes(key).bytes(value);
    Procedure::new(PUT, e.finish())
}

fn decode_put(params: &[u8]) -> Result<(Key, Value), DecodeError> {
    let mut d = Decoder::new(params);
    let k = d.bytes()?;
    let v = d.bytes()?;
    d.finish()?;
    Ok((k, v))
}

impl ProcedureLogic for Put {
    fn declare(&self, params: &[u8]) -> Result<KeySets, DecodeError> {
        let (k, _) = decode_put(params)?;
        Ok(sets(&[], &[&k]))
    }

    fn execute(&self, params: &[u8], _view: &mut dyn ReadView, out: &mut WriteBuffer) -> Result<(), ProcError> {
        let (k, v) = decode_put(params).map_err(|e| bad(PUT, e))?;
        out.put(k, v);
        Ok(())
    }
}

/// `delete(key)`: blind delete.
struct Delete;

pub fn delete(key: &[u8]) -> Procedure {
    let mut e = Encoder::new();
    e.bytes(key);
    Procedure::new(DELETE, e.finish())
}

impl ProcedureLogic for Delete {
    fn declare(&self, params: &[u8]) -> Result<KeySets, DecodeError> {
        let k = single_key(params)?;
        Ok(sets(&[], &[&k]))
    }

    fn execute(&self, params: &[u8], _view: &mut dyn ReadView, out: &mut WriteBuffer) -> Result<(), ProcError> {
        out.delete(single_key(params).map_err(|e| bad(DELETE, e))?);
        Ok(())
    }
}

/// `add_from(src, dst, delta)`: `dst = src + delta`.
struct AddFrom;

pub fn add_from(src: &[u8], dst: &[u8], delta: i64) -> Procedure {
    let mut e = Encoder::new();
    e.bytes(src).bytes(dst).u64(delta as u64);
    Procedure::new(ADD_FROM, e.finish())
}

fn decode_add_from(params: &[u8]) -> Result<(Key, Key, i64), DecodeError> {
    let mut d = Decoder::new(params);
    let src = d.bytes()?;
    let dst = d.bytes()?;
    let delta = d.u64()? as i64;
    d.finish()?;
    Ok((src, dst, delta))
}

impl ProcedureLogic for AddFrom {
    fn declare(&self, params: &[u8]) -> Result<KeySets, DecodeError> {
        let (src, dst, _) = decode_add_from(params)?;
        Ok(sets(&[&src], &[&dst]))
    }

    fn execute(&self, params: &[u8], view: &mut dyn ReadView, out: &mut WriteBuffer) -> Result<(), ProcError> {
        let (src, dst, delta) = decode_add_from(params).map_err(|e| bad(ADD_FROM, e))?;
        let v = read_counter(view, &src)?;
        out.put(dst, encode_counter(v.wrapping_add(delta)));
        Ok(())
    }
}

/// One operation of a YCSB transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum YcsbOp {
    Read(Key),
    /// Blind write; the stored value is derived from `seed` and every value the
    /// transaction read before it.
    Write(Key, u64),
}

/// YCSB-style multi-key transaction with blind writes.
struct Ycsb;

pub fn ycsb(ops: &[YcsbOp], value_len: u32) -> Procedure {
    let mut e = Encoder::new();
    e.u32(value_len).count(ops.len());
    for op in ops {
        match op {
            YcsbOp::Read(k) => {
                e.u8(0).bytes(k);
            }
            YcsbOp::Write(k, seed) => {
                e.u8(1).bytes(k).u64(*seed);
            }
        }
    }
    Procedure::new(YCSB, e.finish())
}

pub fn decode_ycsb(params: &[u8]) -> Result<(u32, Vec<YcsbOp>), DecodeError> {
    let mut d = Decoder::new(params);
    let value_len = d.u32()?;
    let n = d.count()?;
    let mut ops = Vec::with_capacity(n.min(d.remaining()));
    for _ in 0..n {
        ops.push(match d.u8()? {
            0 => YcsbOp::Read(d.bytes()?),
            1 => {
                let k = d.bytes()?;
                YcsbOp::Write(k, d.u64()?)
            }
            t => return Err(d.bad_tag("ycsb op", t)),
        });
    }
    d.finish()?;
    Ok((value_len, ops))
}

fn fill_value(seed: u64, len: usize) -> Value {
    let mut out = Vec::with_capacity(len);
    let mut x = seed;
    while out.len() < len {
        // splitmix64 step
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        for b in z.to_le_bytes() {
            if out.len() == len {
                break;
            }
            out.push(b);
        }
    }
    out
}

impl ProcedureLogic for Ycsb {
    fn declare(&self, params: &[u8]) -> Result<KeySets, DecodeError> {
        let (_, ops) = decode_ycsb(params)?;
        let mut s = KeySets::default();
        for op in ops {
            match op {
                YcsbOp::Read(k) => s.reads.insert(k),
                YcsbOp::Write(k, _) => s.writes.insert(k),
            };
        }
        Ok(s)
    }

    fn execute(&self, params: &[u8], view: &mut dyn ReadView, out: &mut WriteBuffer) -> Result<(), ProcError> {
        let (value_len, ops) = decode_ycsb(params).map_err(|e| bad(YCSB, e))?;
        let mut h = FnvHasher::default();
        for op in ops {
            match op {
                YcsbOp::Read(k) => {
                    // Reads of keys this transaction already wrote see its own write.
                    let v = match out.get(&k) {
                        Some(WriteOp::Put(v)) => Some(v.clone()),
                        Some(_) => None,
                        None => view.read(&k)?,
                    };
                    match v {
                        Some(v) => {
                            h.write_u8(1);
                            h.write(&v);
                        }
                        None => h.write_u8(0),
                    }
                }
                YcsbOp::Write(k, seed) => {
                    h.write_u64(seed);
                    out.put(k, fill_value(h.finish(), value_len as usize));
                }
            }
        }
        Ok(())
    }
}

pub fn warehouse_ytd(w: u32) -> Key {
    format!("w/{w}/ytd").into_bytes()
}
pub fn district_ytd(w: u32, d: u32) -> Key {
    format!("d/{w}/{d}/ytd").into_bytes()
}
pub fn district_next_order(w: u32, d: u32) -> Key {
    format!("d/{w}/{d}/next_o").into_bytes()
}
pub fn customer_balance(w: u32, d: u32, c: u32) -> Key {
    format!("c/{w}/{d}/{c}/bal").into_bytes()
}
pub fn stock_quantity(w: u32, item: u32) -> Key {
    format!("s/{w}/{item}/qty").into_bytes()
}
pub fn item_price(item: u32) -> Key {
    format!("i/{item}/price").into_bytes()
}
pub fn order_row(w: u32, d: u32, uid: u64) -> Key {
    format!("o/{w}/{d}/{uid}").into_bytes()
}

/// Parameters of a simplified TPC-C NewOrder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewOrderParams {
    pub warehouse: u32,
    pub district: u32,
    /// Unique order id chosen by the client so the inserted row key is static.
    pub order_uid: u64,
    /// `(item, quantity)`; items are distinct.
    pub lines: Vec<(u32, u32)>,
}

/// Reads item prices, decrements stock, bumps the district order counter and
/// inserts an order row holding `(order number, total)`.
struct NewOrder;

pub fn new_order(p: &NewOrderParams) -> Procedure {
    let mut e = Encoder::new();
    e.u32(p.warehouse).u32(p.district).u64(p.order_uid).count(p.lines.len());
    for (item, qty) in &p.lines {
        e.u32(*item).u32(*qty);
    }
    Procedure::new(NEW_ORDER, e.finish())
}

pub fn decode_new_order(params: &[u8]) -> Result<NewOrderParams, DecodeError> {
    let mut d = Decoder::new(params);
    let warehouse = d.u32()?;
    let district = d.u32()?;
    let order_uid = d.u64()?;
    let n = d.count()?;
    let mut lines = Vec::with_capacity(n.min(d.remaining()));
    for _ in 0..n {
        lines.push((d.u32()?, d.u32()?));
    }
    d.finish()?;
    Ok(NewOrderParams {
        warehouse,
        district,
        order_uid,
        lines,
    })
}

impl ProcedureLogic for NewOrder {
    fn declare(&self, params: &[u8]) -> Result<KeySets, DecodeError> {
        let p = decode_new_order(params)?;
        let mut s = KeySets::default();
        let next = district_next_order(p.warehouse, p.district);
        s.reads.insert(next.clone());
        s.writes.insert(next);
        for (item, _) in &p.lines {
            s.reads.insert(item_price(*item));
            let stock = stock_quantity(p.warehouse, *item);
            s.reads.insert(stock.clone());
            s.writes.insert(stock);
        }
        s.writes.insert(order_row(p.warehouse, p.district, p.order_uid));
        Ok(s)
    }

    fn execute(&self, params: &[u8], view: &mut dyn ReadView, out: &mut WriteBuffer) -> Result<(), ProcError> {
        let p = decode_new_order(params).map_err(|e| bad(NEW_ORDER, e))?;
        let next_key = district_next_order(p.warehouse, p.district);
        let o_id = read_counter(view, &next_key)?;
        out.put(next_key, encode_counter(o_id + 1));
        let mut total: i64 = 0;
        for (item, qty) in &p.lines {
            let price = read_counter(view, &item_price(*item))?;
            let stock_key = stock_quantity(p.warehouse, *item);
            let stock = read_counter(view, &stock_key)?;
            out.put(stock_key, encode_counter(stock - i64::from(*qty)));
            total = total.wrapping_add(price.wrapping_mul(i64::from(*qty)));
        }
        let mut row = Vec::with_capacity(16);
        row.extend_from_slice(&o_id.to_le_bytes());
        row.extend_from_slice(&total.to_le_bytes());
        out.put(order_row(p.warehouse, p.district, p.order_uid), row);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaymentParams {
    pub warehouse: u32,
    pub district: u32,
    pub customer: u32,
    pub amount: i64,
}

/// Adds the amount to warehouse and district year-to-date totals and debits
/// the customer balance.
struct Payment;

pub fn payment(p: &PaymentParams) -> Procedure {
    let mut e = Encoder::new();
    e.u32(p.warehouse)
        .u32(p.district)
        .u32(p.customer)
        .u64(p.amount as u64);
    Procedure::new(PAYMENT, e.finish())
}

pub fn decode_payment(params: &[u8]) -> Result<PaymentParams, DecodeError> {
    let mut d = Decoder::new(params);
    let p = PaymentParams {
        warehouse: d.u32()?,
        district: d.u32()?,
        customer: d.u32()?,
        amount: d.u64()? as i64,
    };
    d.finish()?;
    Ok(p)
}

fn payment_keys(p: &PaymentParams) -> [Key; 3] {
    [
        warehouse_ytd(p.warehouse),
        district_ytd(p.warehouse, p.district),
        customer_balance(p.warehouse, p.district, p.customer),
    ]
}

impl ProcedureLogic for Payment {
    fn declare(&self, params: &[u8]) -> Result<KeySets, DecodeError> {
        let keys = payment_keys(&decode_payment(params)?);
        let refs: Vec<&Key> = keys.iter().collect();
        Ok(sets(&refs, &refs))
    }

    fn execute(&self, params: &[u8], view: &mut dyn ReadView, out: &mut WriteBuffer) -> Result<(), ProcError> {
        let p = decode_payment(params).map_err(|e| bad(PAYMENT, e))?;
        let [w, d, c] = payment_keys(&p);
        let wv = read_counter(view, &w)?;
        let dv = read_counter(view, &d)?;
        let cv = read_counter(view, &c)?;
        out.put(w, encode_counter(wv + p.amount));
        out.put(d, encode_counter(dv + p.amount));
        out.put(c, encode_counter(cv - p.amount));
        Ok(())
    }
}

/// Read view over a plain map, used by serial replays.
pub struct MapView<'a> {
    pub map: &'a BTreeMap<Key, Value>,
    pub touched: BTreeSet<Key>,
}

impl<'a> MapView<'a> {
    pub fn new(map: &'a BTreeMap<Key, Value>) -> Self {
        MapView {
            map,
            touched: BTreeSet::new(),
        }
    }
}

impl ReadView for MapView<'_> {
    fn read(&mut self, key: &[u8]) -> Result<Option<Value>, ProcError> {
        self.touched.insert(key.to_vec());
        Ok(self.map.get(key).cloned())
    }
}

//! Protocol core: data model, codecs, storage, optimistic execution, batch
//! dissemination, cut consensus, conflict resolution, deterministic
//! re-execution and the per-epoch commit pipeline.
//!
//! Everything here is a pure state machine driven by explicit inputs and a
//! caller-supplied `now`. No IO, no clocks, no threads.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod codec;
pub mod commit;
pub mod conflict;
pub mod cutlog;
pub mod detlock;
pub mod dissemination;
pub mod message;
pub mod occ;
pub mod procedure;
pub mod replica;
pub mod storage;
pub mod time;
pub mod types;

pub use time::Micros;
pub use types::*;

//! Run summaries and the CSV streams.

use std::io::Write;

use epochkv_core::Micros;
use serde::{Deserialize, Serialize};

use crate::sim::{EpochRow, RunOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub committed: u64,
    pub throughput_tps: f64,
    /// Client latency percentiles in milliseconds; `None` with no commits.
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub reexec_fraction: Option<f64>,
    pub epochs: u64,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

impl RunSummary {
    /// Throughput counts acks in `[warmup, end]`, where `end` is the time the
    /// workload finished or the request cutoff, whichever is first.
    pub fn from_run(out: &RunOutput, warmup: Micros) -> Self {
        let end = out.finished.unwrap_or(out.end).min(out.cutoff);
        let window = end.saturating_sub(warmup);
        let in_window: Vec<_> = out.acks.iter().filter(|a| a.acked >= warmup && a.acked <= end).collect();
        let mut lat: Vec<u64> = in_window.iter().map(|a| a.latency().0).collect();
        lat.sort_unstable();
        let ms = |v: Option<u64>| v.map(|v| v as f64 / 1000.0);
        let throughput_tps = if window.0 == 0 {
            0.0
        } else {
            in_window.len() as f64 / (window.0 as f64 / 1e6)
        };
        let first = out.correct_ids().next().map(|i| i as u32);
        let (mut re, mut normal) = (0u64, 0u64);
        let mut epochs = 0;
        for row in out.epochs.iter().filter(|r| Some(r.replica.0) == first) {
            re += row.report.stale + row.report.conflicting;
            normal += row.report.total - row.report.hc_routed;
            epochs += 1;
        }
        RunSummary {
            committed: in_window.len() as u64,
            throughput_tps,
            p50_ms: ms(percentile(&lat, 50.0)),
            p95_ms: ms(percentile(&lat, 95.0)),
            p99_ms: ms(percentile(&lat, 99.0)),
            reexec_fraction: (normal > 0).then(|| re as f64 / normal as f64),
            epochs,
        }
    }
}

/// One row of metrics.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub committed: u64,
    pub throughput_tps: f64,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub reexec_fraction: Option<f64>,
    pub oracle: String,
}

/// One row of epochs.csv. `axis`, `value` and `seed` identify the run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochCsvRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub eid: u64,
    pub total: u64,
    pub valid: u64,
    pub stale: u64,
    pub conflicting: u64,
    pub re_executed: u64,
    pub chain_build_us: u64,
    pub stale_check_us: u64,
    pub graph_build_us: u64,
    pub mwis_us: u64,
    pub apply_us: u64,
    pub reexec_us: u64,
    pub hc_routed: u64,
    pub greedy_fallback: u64,
    pub replica: u32,
    pub commit_time_us: u64,
}

impl From<&EpochRow> for EpochCsvRow {
    fn from(r: &EpochRow) -> Self {
        let p = &r.report;
        EpochCsvRow {
            axis: String::new(),
            value: String::new(),
            seed: 0,
            eid: p.eid.0,
            total: p.total,
            valid: p.valid,
            stale: p.stale,
            conflicting: p.conflicting,
            re_executed: p.re_executed,
            chain_build_us: p.chain_build.0,
            stale_check_us: p.stale_check.0,
            graph_build_us: p.graph_build.0,
            mwis_us: p.mwis.0,
            apply_us: p.apply.0,
            reexec_us: p.reexec.0,
            hc_routed: p.hc_routed,
            greedy_fallback: p.greedy_fallbacks,
            replica: r.replica.0,
            commit_time_us: r.commit_time.0,
        }
    }
}

impl EpochCsvRow {
    pub fn tagged(r: &EpochRow, axis: &str, value: &str, seed: u64) -> Self {
        EpochCsvRow {
            axis: axis.to_string(),
            value: value.to_string(),
            seed,
            ..EpochCsvRow::from(r)
        }
    }
}

pub fn write_rows<W: Write, T: Serialize>(w: W, rows: impl IntoIterator<Item = T>) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn epochs_csv(rows: &[EpochRow]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_rows(&mut buf, rows.iter().map(EpochCsvRow::from)).expect("in-memory csv");
    buf
}

impl MetricsRow {
    pub fn new(axis: &str, value: &str, seed: u64, s: &RunSummary, oracle: &str) -> Self {
        MetricsRow {
            axis: axis.to_string(),
            value: value.to_string(),
            seed,
            committed: s.committed,
            throughput_tps: s.throughput_tps,
            p50_ms: s.p50_ms,
            p95_ms: s.p95_ms,
            p99_ms: s.p99_ms,
            reexec_fraction: s.reexec_fraction,
            oracle: oracle.to_string(),
        }
    }
}

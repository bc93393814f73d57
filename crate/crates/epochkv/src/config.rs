//! JSON run configuration. Field names are snake_case, durations are
//! milliseconds.

use std::path::Path;

use epochkv_core::commit::{CommitParams, CostModel, HcConfig};
use epochkv_core::conflict::{MwisConfig, SolverKind};
use epochkv_core::cutlog::{ConsensusKind, RaftConfig};
use epochkv_core::dissemination::AckQuorum;
use epochkv_core::occ::ExecutorConfig;
use epochkv_core::replica::ReplicaConfig;
use epochkv_core::{Micros, Priorities};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub f: usize,
    pub seed: u64,
    /// Hard stop in virtual time.
    pub duration_ms: f64,
    /// Extra time after the last transaction is acknowledged, letting every
    /// replica commit the final epochs before the run ends.
    pub drain_ms: f64,
    /// Acks before this time are excluded from throughput and latency.
    pub warmup_ms: f64,
    pub latency: LatencyConfig,
    pub workload: WorkloadSpec,
    pub crashes: Vec<CrashSpec>,
    pub protocol: ProtocolConfig,
    pub cost: CostModelConfig,
    /// Evaluate durability, agreement and GC assertions during the run.
    pub check_invariants: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 3,
            f: 1,
            seed: 1,
            duration_ms: 30_000.0,
            drain_ms: 2_000.0,
            warmup_ms: 0.0,
            latency: LatencyConfig::default(),
            workload: WorkloadSpec::default(),
            crashes: Vec::new(),
            protocol: ProtocolConfig::default(),
            cost: CostModelConfig::default(),
            check_invariants: true,
        }
    }
}

/// One-way delay: `base + U(0, jitter)` per message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub base_ms: f64,
    pub jitter_ms: f64,
    /// Per ordered pair base delay, overriding `base_ms`. Diagonal ignored.
    pub matrix: Option<Vec<Vec<f64>>>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            base_ms: 0.0,
            jitter_ms: 0.0,
            matrix: None,
        }
    }
}

impl LatencyConfig {
    pub fn base(&self, from: usize, to: usize) -> f64 {
        match &self.matrix {
            Some(m) => m[from][to],
            None => self.base_ms,
        }
    }

    pub fn mean_rtt_ms(&self, n: usize) -> f64 {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    sum += self.base(a, b) + self.base(b, a) + self.jitter_ms;
                    pairs += 1;
                }
            }
        }
        if pairs == 0 {
            0.0
        } else {
            sum / pairs as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    YcsbA,
    MicroTpcc,
    /// Single-key counter increments over `records` keys.
    Increment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub records: u64,
    pub ops_per_txn: u32,
    pub read_fraction: f64,
    pub zipf: f64,
    pub value_len: u32,
    /// Closed-loop clients per replica.
    pub clients_per_replica: u32,
    /// Open-loop arrivals per replica per second. Replaces the closed-loop
    /// clients when set.
    pub open_loop_rate: Option<f64>,
    /// Stop issuing after this many transactions in total.
    pub total_txns: Option<u64>,
    pub think_ms: f64,
    pub warehouses: u32,
    pub districts: u32,
    pub customers: u32,
    pub items: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::YcsbA,
            records: 10_000,
            ops_per_txn: 10,
            read_fraction: 0.5,
            zipf: 0.0,
            value_len: 32,
            clients_per_replica: 8,
            open_loop_rate: None,
            total_txns: None,
            think_ms: 0.0,
            warehouses: 4,
            districts: 10,
            customers: 100,
            items: 1_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub replica: u32,
    pub at_ms: f64,
    #[serde(default)]
    pub rejoin_ms: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusChoice {
    Raft,
    Sequencer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuorumChoice {
    IncludeSelf,
    PeersOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Exact,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub epoch_interval_ms: f64,
    pub batch_timeout_ms: f64,
    pub batch_size_bytes: usize,
    pub max_local_retries: u32,
    pub consensus: ConsensusChoice,
    pub heartbeat_ms: f64,
    pub election_min_ms: f64,
    pub election_max_ms: f64,
    pub ack_wait_ms: f64,
    pub ack_quorum: QuorumChoice,
    /// Defaults to twice the mean round trip, at least 10 ms.
    pub fetch_retry_ms: Option<f64>,
    pub progress_interval_ms: f64,
    pub solver: SolverChoice,
    pub mwis_exact_cap: usize,
    pub mwis_node_budget: u64,
    pub hc_enabled: bool,
    pub hc_threshold: f64,
    pub hc_sustain_ms: f64,
    pub hc_cooldown_ms: f64,
    pub sync_broadcast: bool,
    pub gc: bool,
    /// Static replica priorities for the re-execution order; default rid.
    pub priorities: Option<Vec<u32>>,
    /// Tell live replicas about crashes so the consensus leader stops
    /// waiting for them. Safety never depends on it.
    pub notify_crashes: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            epoch_interval_ms: 15.0,
            batch_timeout_ms: 5.0,
            batch_size_bytes: 4 * 1024 * 1024,
            max_local_retries: 10,
            consensus: ConsensusChoice::Raft,
            heartbeat_ms: 400.0,
            election_min_ms: 800.0,
            election_max_ms: 1200.0,
            ack_wait_ms: 50.0,
            ack_quorum: QuorumChoice::IncludeSelf,
            fetch_retry_ms: None,
            progress_interval_ms: 100.0,
            solver: SolverChoice::Exact,
            mwis_exact_cap: 64,
            mwis_node_budget: 200_000,
            hc_enabled: true,
            hc_threshold: 0.5,
            hc_sustain_ms: 200.0,
            hc_cooldown_ms: 1_000.0,
            sync_broadcast: false,
            gc: true,
            priorities: None,
            notify_crashes: false,
        }
    }
}

/// Virtual CPU costs in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelConfig {
    pub exec_per_txn_us: u64,
    pub exec_per_op_us: u64,
    pub chain_per_txn_us: u64,
    pub stale_per_check_us: u64,
    pub graph_per_key_us: u64,
    pub graph_per_edge_us: u64,
    pub mwis_per_step_us: u64,
    pub apply_per_write_us: u64,
    pub reexec_per_txn_us: u64,
    pub reexec_per_op_us: u64,
}

impl Default for CostModelConfig {
    fn default() -> Self {
        let c = CostModel::default();
        CostModelConfig {
            exec_per_txn_us: c.exec_per_txn,
            exec_per_op_us: c.exec_per_op,
            chain_per_txn_us: c.chain_per_txn,
            stale_per_check_us: c.stale_per_check,
            graph_per_key_us: c.graph_per_key,
            graph_per_edge_us: c.graph_per_edge,
            mwis_per_step_us: c.mwis_per_step,
            apply_per_write_us: c.apply_per_write,
            reexec_per_txn_us: c.reexec_per_txn,
            reexec_per_op_us: c.reexec_per_op,
        }
    }
}

impl From<&CostModelConfig> for CostModel {
    fn from(c: &CostModelConfig) -> Self {
        CostModel {
            exec_per_txn: c.exec_per_txn_us,
            exec_per_op: c.exec_per_op_us,
            chain_per_txn: c.chain_per_txn_us,
            stale_per_check: c.stale_per_check_us,
            graph_per_key: c.graph_per_key_us,
            graph_per_edge: c.graph_per_edge_us,
            mwis_per_step: c.mwis_per_step_us,
            apply_per_write: c.apply_per_write_us,
            reexec_per_txn: c.reexec_per_txn_us,
            reexec_per_op: c.reexec_per_op_us,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: field `{field}`: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn ms(v: f64) -> Micros {
    Micros::from_ms_f64(v)
}

impl SimConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: SimConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            ConfigError::Parse {
                path: origin.to_string(),
                line: inner.line(),
                column: inner.column(),
                field,
                message: inner.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n == 0 || self.n < 2 * self.f + 1 {
            return bad(format!("n = {} cannot tolerate f = {} (need n >= 2f + 1)", self.n, self.f));
        }
        let nonneg = [
            ("duration_ms", self.duration_ms),
            ("drain_ms", self.drain_ms),
            ("warmup_ms", self.warmup_ms),
            ("latency.base_ms", self.latency.base_ms),
            ("latency.jitter_ms", self.latency.jitter_ms),
            ("workload.zipf", self.workload.zipf),
            ("workload.think_ms", self.workload.think_ms),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if let Some(m) = &self.latency.matrix {
            if m.len() != self.n || m.iter().any(|r| r.len() != self.n) {
                return bad(format!("latency.matrix must be {0}x{0}", self.n));
            }
            if m.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("latency.matrix entries must be non-negative".into());
            }
        }
        let w = &self.workload;
        if w.records == 0 || w.ops_per_txn == 0 || w.value_len == 0 {
            return bad("workload.records, ops_per_txn and value_len must be positive".into());
        }
        if w.kind == WorkloadKind::YcsbA && u64::from(w.ops_per_txn) > w.records {
            return bad("workload.ops_per_txn exceeds records".into());
        }
        if !(0.0..=1.0).contains(&w.read_fraction) {
            return bad("workload.read_fraction must be in [0, 1]".into());
        }
        if w.kind == WorkloadKind::MicroTpcc && (w.warehouses == 0 || w.districts == 0 || w.customers == 0 || w.items < 15)
        {
            return bad("micro_tpcc needs positive warehouses, districts, customers and at least 15 items".into());
        }
        if let Some(r) = w.open_loop_rate {
            if !(r.is_finite() && r > 0.0) {
                return bad("workload.open_loop_rate must be positive".into());
            }
        }
        let p = &self.protocol;
        let positive = [
            ("protocol.epoch_interval_ms", p.epoch_interval_ms),
            ("protocol.batch_timeout_ms", p.batch_timeout_ms),
            ("protocol.heartbeat_ms", p.heartbeat_ms),
            ("protocol.election_min_ms", p.election_min_ms),
            ("protocol.progress_interval_ms", p.progress_interval_ms),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if p.election_min_ms <= p.heartbeat_ms || p.election_max_ms < p.election_min_ms {
            return bad("need heartbeat_ms < election_min_ms <= election_max_ms".into());
        }
        if p.mwis_exact_cap == 0 || p.mwis_exact_cap > 64 {
            return bad("protocol.mwis_exact_cap must be in 1..=64".into());
        }
        if let Some(pr) = &p.priorities {
            if pr.len() != self.n {
                return bad("protocol.priorities needs one entry per replica".into());
            }
        }
        for c in &self.crashes {
            if c.replica as usize >= self.n {
                return bad(format!("crash names replica {} of {}", c.replica, self.n));
            }
            if let Some(r) = c.rejoin_ms {
                if r <= c.at_ms {
                    return bad(format!("replica {} rejoins before it crashes", c.replica));
                }
            }
        }
        self.check_crash_schedule()
    }

    /// At most `f` replicas down at any instant, and a replica never crashes
    /// twice without rejoining in between.
    fn check_crash_schedule(&self) -> Result<(), ConfigError> {
        let mut edges: Vec<(f64, i32, u32)> = Vec::new();
        for c in &self.crashes {
            edges.push((c.at_ms, 1, c.replica));
            if let Some(r) = c.rejoin_ms {
                edges.push((r, -1, c.replica));
            }
        }
        // Rejoins sort before crashes at the same instant.
        edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut down = vec![false; self.n];
        let mut count = 0usize;
        for (t, d, r) in edges {
            let r = r as usize;
            if d > 0 {
                if down[r] {
                    return Err(ConfigError::Invalid(format!("replica {r} crashes again at {t} ms while down")));
                }
                down[r] = true;
                count += 1;
                if count > self.f {
                    return Err(ConfigError::Invalid(format!(
                        "{count} replicas down at {t} ms exceeds f = {}",
                        self.f
                    )));
                }
            } else {
                down[r] = false;
                count -= 1;
            }
        }
        Ok(())
    }

    pub fn fetch_retry(&self) -> Micros {
        let p = &self.protocol;
        ms(p.fetch_retry_ms.unwrap_or_else(|| (2.0 * self.latency.mean_rtt_ms(self.n)).max(10.0)))
    }

    pub fn replica_config(&self) -> ReplicaConfig {
        let p = &self.protocol;
        let mut rc = ReplicaConfig::new(self.n, self.f);
        rc.exec = ExecutorConfig {
            batch_size_bytes: p.batch_size_bytes,
            batch_timeout: ms(p.batch_timeout_ms),
            max_local_retries: p.max_local_retries,
        };
        rc.ack_quorum = match p.ack_quorum {
            QuorumChoice::IncludeSelf => AckQuorum::IncludeSelf,
            QuorumChoice::PeersOnly => AckQuorum::PeersOnly,
        };
        rc.fetch_retry = self.fetch_retry();
        rc.consensus = match p.consensus {
            ConsensusChoice::Raft => ConsensusKind::Raft(RaftConfig {
                heartbeat: ms(p.heartbeat_ms),
                election_min: ms(p.election_min_ms),
                election_max: ms(p.election_max_ms),
                ack_wait: ms(p.ack_wait_ms),
            }),
            ConsensusChoice::Sequencer => ConsensusKind::Sequencer,
        };
        rc.epoch_interval = ms(p.epoch_interval_ms);
        rc.progress_interval = ms(p.progress_interval_ms);
        rc.commit = CommitParams {
            priorities: p.priorities.clone().map(Priorities::new).unwrap_or_default(),
            solver: match p.solver {
                SolverChoice::Exact => SolverKind::Exact,
                SolverChoice::Greedy => SolverKind::Greedy,
            },
            mwis: MwisConfig {
                exact_cap: p.mwis_exact_cap,
                node_budget: p.mwis_node_budget,
            },
            cost: (&self.cost).into(),
        };
        rc.hc = HcConfig {
            enabled: p.hc_enabled,
            threshold: p.hc_threshold,
            sustain: ms(p.hc_sustain_ms),
            cooldown: ms(p.hc_cooldown_ms),
        };
        rc.sync_broadcast = p.sync_broadcast;
        rc.gc = p.gc;
        rc
    }
}

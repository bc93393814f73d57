//! The `run` and `check` commands, callable without a process boundary.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use epochkv_core::Micros;

use crate::audit::AuditError;
use crate::config::{ConfigError, SimConfig};
use crate::history::{CommitHistory, StoreDump};
use crate::metrics::{write_rows, EpochCsvRow, MetricsRow, RunSummary};
use crate::oracle::oracle_check;
use crate::sim::run_simulation;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Latency,
    Replicas,
    Zipf,
    EpochInterval,
    BatchTimeout,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Latency => "latency",
            Axis::Replicas => "replicas",
            Axis::Zipf => "zipf",
            Axis::EpochInterval => "epoch_interval",
            Axis::BatchTimeout => "batch_timeout",
        }
    }

    /// Sets the axis on `cfg`. Sweeping `replicas` also sets `f` to the
    /// largest value `n` tolerates.
    pub fn apply(self, cfg: &mut SimConfig, v: f64) -> Result<(), String> {
        if !v.is_finite() || v < 0.0 {
            return Err(format!("{} value {v} must be a non-negative number", self.name()));
        }
        match self {
            Axis::Latency => cfg.latency.base_ms = v,
            Axis::Replicas => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(format!("replicas value {v} must be a positive integer"));
                }
                cfg.n = v as usize;
                cfg.f = (cfg.n - 1) / 2;
            }
            Axis::Zipf => cfg.workload.zipf = v,
            Axis::EpochInterval => {
                if v == 0.0 {
                    return Err("epoch_interval must be positive".into());
                }
                cfg.protocol.epoch_interval_ms = v;
            }
            Axis::BatchTimeout => cfg.protocol.batch_timeout_ms = v,
        }
        Ok(())
    }
}

impl FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "latency" => Axis::Latency,
            "replicas" => Axis::Replicas,
            "zipf" => Axis::Zipf,
            "epoch_interval" => Axis::EpochInterval,
            "batch_timeout" => Axis::BatchTimeout,
            _ => {
                return Err(format!(
                    "unknown sweep axis `{s}` (expected latency, replicas, zipf, epoch_interval or batch_timeout)"
                ))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub axis: Axis,
    /// Kept as typed so that CSV rows show the user's spelling.
    pub values: Vec<(String, f64)>,
}

impl FromStr for Sweep {
    type Err = String;
    /// `axis=v1,v2,...`
    fn from_str(s: &str) -> Result<Self, String> {
        let (axis, vals) = s.split_once('=').ok_or_else(|| format!("sweep `{s}` is not of the form axis=v1,v2"))?;
        let axis: Axis = axis.trim().parse()?;
        let values = vals
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| {
                v.parse::<f64>()
                    .map(|x| (v.to_string(), x))
                    .map_err(|_| format!("sweep value `{v}` is not a number"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(format!("sweep over {} has no values", axis.name()));
        }
        Ok(Sweep { axis, values })
    }
}

#[derive(Clone, Debug)]
pub struct RunManifest {
    pub config: PathBuf,
    /// Empty means the config's own seed.
    pub seeds: Vec<u64>,
    pub sweep: Option<Sweep>,
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Usage(String),
    Io(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io(e) => write!(f, "{e:#}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        EXIT_USAGE
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Io(e)
    }
}

#[derive(Clone, Debug)]
pub struct Failure {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub message: String,
    pub counterexample: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<Failure>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            EXIT_OK
        } else {
            EXIT_VIOLATION
        }
    }
}

/// Builds every (axis value, seed) config up front so that a bad sweep value
/// fails before any simulation starts.
pub fn expand(m: &RunManifest) -> Result<Vec<(String, String, SimConfig)>, CliError> {
    let base = SimConfig::load(&m.config)?;
    let seeds = if m.seeds.is_empty() { vec![base.seed] } else { m.seeds.clone() };
    let points: Vec<(String, String, Option<f64>)> = match &m.sweep {
        None => vec![("none".into(), String::new(), None)],
        Some(s) => s
            .values
            .iter()
            .map(|(text, v)| (s.axis.name().to_string(), text.clone(), Some(*v)))
            .collect(),
    };
    let mut out = Vec::new();
    for (axis, text, v) in points {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            if let (Some(s), Some(v)) = (&m.sweep, v) {
                s.axis.apply(&mut cfg, v).map_err(CliError::Usage)?;
                cfg.validate()?;
            }
            out.push((axis.clone(), text.clone(), cfg));
        }
    }
    Ok(out)
}

fn run_dir(out: &Path, axis: &str, value: &str, seed: u64) -> PathBuf {
    let label = if value.is_empty() {
        format!("seed-{seed}")
    } else {
        format!("{axis}-{value}-seed-{seed}")
    };
    out.join("runs").join(label)
}

/// Runs every point of the manifest, writing `metrics.csv`, `epochs.csv` and
/// per-run dumps under `m.out`.
pub fn cmd_run(m: &RunManifest, log: &mut dyn Write) -> Result<RunReport, CliError> {
    let runs = expand(m)?;
    fs::create_dir_all(&m.out)?;
    let mut report = RunReport::default();
    let mut epoch_rows = Vec::new();
    for (axis, value, cfg) in runs {
        let seed = cfg.seed;
        let warmup = Micros::from_ms_f64(cfg.warmup_ms);
        let dir = run_dir(&m.out, &axis, &value, seed);
        fs::create_dir_all(&dir)?;
        let out = run_simulation(cfg);
        let history = out.history();
        history.write(&dir.join("history.bin"))?;
        out.store_dump().write(&dir.join("store.bin"))?;
        let verdict = out.verify();
        let summary = RunSummary::from_run(&out, warmup);
        let oracle = match &verdict {
            Ok(_) => "pass",
            Err(_) => "fail",
        };
        report.rows.push(MetricsRow::new(&axis, &value, seed, &summary, oracle));
        epoch_rows.extend(out.epochs.iter().map(|r| EpochCsvRow::tagged(r, &axis, &value, seed)));
        let _ = writeln!(
            log,
            "{} {} seed {}: {} committed, {:.1} txn/s, oracle {}",
            axis, value, seed, summary.committed, summary.throughput_tps, oracle
        );
        if let Err(e) = verdict {
            let path = dir.join("counterexample.txt");
            write_counterexample(&path, &e, &dir)?;
            let _ = writeln!(log, "  {e}\n  counterexample: {}", path.display());
            report.failures.push(Failure {
                axis: axis.clone(),
                value: value.clone(),
                seed,
                message: e.to_string(),
                counterexample: path,
            });
        }
    }
    write_rows(fs::File::create(m.out.join("metrics.csv"))?, &report.rows).map_err(anyhow::Error::from)?;
    write_rows(fs::File::create(m.out.join("epochs.csv"))?, &epoch_rows).map_err(anyhow::Error::from)?;
    Ok(report)
}

fn write_counterexample(path: &Path, e: &AuditError, dir: &Path) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{e}")?;
    if let AuditError::Runtime(v) = e {
        for line in v {
            writeln!(f, "{line}")?;
        }
    }
    writeln!(f, "history: {}", dir.join("history.bin").display())?;
    writeln!(f, "store: {}", dir.join("store.bin").display())
}

/// Loads both dumps and runs the oracle. `Ok(Err(..))` is a violation; the
/// outer error is an unreadable dump.
pub fn cmd_check(history: &Path, store: &Path) -> Result<Result<(), crate::oracle::Violation>, CliError> {
    let h = CommitHistory::read(history)?;
    let s = StoreDump::read(store)?;
    Ok(oracle_check(&h, &s).map(|_| ()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        let s: Sweep = "latency=0,50,200".parse().unwrap();
        assert_eq!(s.axis, Axis::Latency);
        assert_eq!(s.values.len(), 3);
        assert_eq!(s.values[1], ("50".to_string(), 50.0));
        assert!("speed=1".parse::<Sweep>().is_err());
        assert!("zipf=".parse::<Sweep>().is_err());
        assert!("zipf=a".parse::<Sweep>().is_err());
        assert!("zipf".parse::<Sweep>().is_err());
    }

    #[test]
    fn replicas_axis_sets_f() {
        let mut c = SimConfig::default();
        Axis::Replicas.apply(&mut c, 5.0).unwrap();
        assert_eq!((c.n, c.f), (5, 2));
        assert!(Axis::Replicas.apply(&mut c, 2.5).is_err());
        assert!(Axis::EpochInterval.apply(&mut c, 0.0).is_err());
        assert!(Axis::Zipf.apply(&mut c, -1.0).is_err());
    }
}

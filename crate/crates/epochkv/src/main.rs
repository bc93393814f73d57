use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use epochkv::cli::{cmd_check, cmd_run, RunManifest, Sweep, EXIT_OK, EXIT_USAGE, EXIT_VIOLATION};

#[derive(Parser)]
#[command(name = "epochkv", version, about = "Simulate and check an epoch-based replicated KV store")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run simulations and write metrics.csv, epochs.csv and per-run dumps.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// `axis=v1,v2,...` with axis one of latency, replicas, zipf,
        /// epoch_interval, batch_timeout.
        #[arg(long)]
        sweep: Option<Sweep>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a history dump and compare it with a store dump.
    Check {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return exit(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match cli.cmd {
        Cmd::Run { config, seeds, sweep, out } => {
            let m = RunManifest { config, seeds, sweep, out };
            match cmd_run(&m, &mut std::io::stdout()) {
                Ok(report) => {
                    for f in &report.failures {
                        eprintln!(
                            "oracle failure ({} {} seed {}): {}\ncounterexample: {}",
                            f.axis,
                            f.value,
                            f.seed,
                            f.message,
                            f.counterexample.display()
                        );
                    }
                    exit(report.exit_code())
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit(e.exit_code())
                }
            }
        }
        Cmd::Check { history, store } => match cmd_check(&history, &store) {
            Ok(Ok(())) => {
                println!("pass");
                exit(EXIT_OK)
            }
            Ok(Err(v)) => {
                eprintln!("fail: {v}");
                exit(EXIT_VIOLATION)
            }
            Err(e) => {
                eprintln!("error: {e}");
                exit(EXIT_USAGE)
            }
        },
    }
}

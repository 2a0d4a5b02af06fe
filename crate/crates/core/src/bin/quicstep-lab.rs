use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use quicstep_lab::harness::{self, acceptance, ExperimentConfig};
use quicstep_lab::middlebox::CensorMode;
use quicstep_lab::quicstep::PolicyMode;

/// Deterministic lab for routing QUIC handshakes through a tunnel and data
/// over the direct path, against a simulated censor.
#[derive(Parser)]
#[command(name = "quicstep-lab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run trials for each policy and write CSVs, a summary and traces.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        /// Bytes, or with a KB/MB suffix.
        #[arg(long, value_parser = parse_size)]
        file_size: Option<usize>,
        #[arg(long = "policy")]
        policies: Vec<PolicyMode>,
        #[arg(long = "censor-mode")]
        censor_modes: Vec<CensorMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-leg delay jitter in percent.
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long)]
        trace: bool,
        /// Output directory; falls back to `out` in the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print analytic completion times for the configured scenario.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the acceptance suite; exits 2 if any criterion fails.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<usize, String> {
    harness::parse_size(s).ok_or_else(|| format!("bad size `{s}`"))
}

enum Failure {
    Config(anyhow::Error),
    Violation,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).context("bad config")
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run {
            config,
            trials,
            file_size,
            policies,
            censor_modes,
            seed,
            jitter,
            trace,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(s) = file_size {
                cfg.file_size = s;
            }
            if !policies.is_empty() {
                cfg.policies = policies;
                cfg.policies.sort();
                cfg.policies.dedup();
            }
            cfg.censor.modes.extend(censor_modes);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(j) = jitter {
                cfg.jitter_pct = j;
            }
            cfg.trace |= trace;
            let Some(out) = out.or(cfg.out_dir.clone()) else {
                return Err(anyhow::anyhow!(
                    "no output directory: pass --out or set `out` in the config"
                )
                .into());
            };
            cfg.validate().map_err(anyhow::Error::from)?;
            harness::check_writable(&out).map_err(anyhow::Error::from)?;
            let res = harness::run_experiment(&cfg).map_err(anyhow::Error::from)?;
            let files = harness::emit(&cfg, &res, &out).map_err(anyhow::Error::from)?;
            print!("{}", harness::summary(&cfg, &res));
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Cmd::Oracle { config } => {
            let cfg = load(&config)?;
            let native = harness::analytic_latency(PolicyMode::Native, &cfg);
            for p in &cfg.policies {
                let t = harness::analytic_latency(*p, &cfg);
                println!(
                    "{p:<9} {t:>10} us  overhead vs native {:>10} us",
                    t as i64 - native as i64
                );
            }
        }
        Cmd::Check { config } => {
            let cfg = load(&config)?;
            let results = acceptance::run_all(cfg.seed);
            for r in &results {
                println!("{r}");
            }
            if results.iter().any(|r| !r.passed) {
                return Err(Failure::Violation);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Violation) => ExitCode::from(2),
    }
}

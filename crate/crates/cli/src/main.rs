use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tpoverlap::{Error, Result};
use tpoverlap_cli::commands::{cmd_bench, cmd_report, cmd_sweep, cmd_tune, cmd_verify, Outcome};
use tpoverlap_cli::config::{parse_strategies, RunConfig};
use tpoverlap_cli::{exit_code, EXIT_FAILED, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "tpoverlap", version, about = "Tile-granular GEMM/collective overlap: verify, simulate, benchmark, tune")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `out`, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated strategies, e.g. `coarse,fine`.
    #[arg(long, global = true)]
    strategies: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured strategies and compare against the dense oracle.
    Verify,
    /// Simulate every strategy over the sweep and write metrics CSV.
    Sweep,
    /// Time the engine with warmup and repetitions.
    Bench,
    /// Search the knob space of the fused kernel.
    Tune,
    /// Build comparison tables and Chrome traces from a results directory.
    Report {
        /// Results directory; defaults to `--out`.
        dir: Option<PathBuf>,
    },
}

fn load(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(list) = &cli.strategies {
        cfg.strategies = parse_strategies(list)?;
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Report { dir } => {
            let dir = dir.clone().or_else(|| cli.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
            cmd_report(&dir)
        }
        Command::Verify => load(cli).and_then(|(cfg, out)| cmd_verify(&cfg, &out)),
        Command::Sweep => load(cli).and_then(|(cfg, out)| cmd_sweep(&cfg, &out)),
        Command::Bench => load(cli).and_then(|(cfg, out)| cmd_bench(&cfg, &out)),
        Command::Tune => load(cli).and_then(|(cfg, out)| cmd_tune(&cfg, &out)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::from(if outcome.passed { EXIT_OK } else { EXIT_FAILED } as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

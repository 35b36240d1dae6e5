#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use commands::Context_;
use config::*;
use iontrap::ErrorClass;

#[derive(Debug, Parser)]
#[command(name = "iontrap", version, about = "Segmented ion trap transport, separation and readout simulations")]
struct Cli {
    /// Trap description (JSON). Defaults to the built-in five-electrode trap.
    #[arg(long, global = true)]
    trap: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the run report as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Experiment config file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Leave the timestamp out of the report, for reproducible output.
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    SolveWell(SolveWellArgs),
    Transport(TransportArgs),
    Separate(SeparateArgs),
    PartitionScan(PartitionArgs),
    Flop(FlopArgs),
    Fit(FitArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err.chain().find_map(|e| e.downcast_ref::<iontrap::Error>()).map(|e| e.class());
    match class {
        Some(ErrorClass::Numerical) => 3,
        Some(ErrorClass::Infeasible) => 4,
        Some(ErrorClass::Config) | None => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig { schema_version: CONFIG_SCHEMA_VERSION, ..Default::default() },
    };
    let trap_path = cli.trap.clone().or(cfg.trap.clone());
    let out = cli.out.clone().or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("iontrap_out"));
    let seed = cli.seed.or(cfg.seed);
    let (trap, trap_echo) = commands::load_trap(trap_path.as_ref())?;
    let ctx = Context_ { trap: &trap, trap_echo, out: &out, seed };

    let mut report = match cli.command {
        Command::SolveWell(a) => commands::solve_well(&ctx, a.over(cfg.solve_well).resolve()),
        Command::Transport(a) => commands::transport(&ctx, a.over(cfg.transport).resolve()),
        Command::Separate(a) => commands::separate(&ctx, a.over(cfg.separate).resolve()),
        Command::PartitionScan(a) => commands::partition_scan(&ctx, a.over(cfg.partition_scan).resolve()),
        Command::Flop(a) => commands::flop(&ctx, a.over(cfg.flop).resolve()),
        Command::Fit(a) => commands::fit(&ctx, a.over(cfg.fit).resolve()),
    }?;
    if !cli.no_timestamp {
        report.timestamp = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    iontrap::io::write_file(&out.join("report.json"), text.as_bytes())?;
    if cli.json {
        print!("{text}");
    } else {
        println!("{}: wrote {} to {}", report.command, report.artifacts.join(", "), out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedwsq::config::RunConfig;
use fedwsq::experiment::{compare, compare_csv, run_experiment, write_levels};
use fedwsq::Error;

#[derive(Parser)]
#[command(name = "fedwsq", version, about = "Federated training with quantized uplink updates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federated experiment.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compute an optimized level table.
    Levels {
        #[arg(long)]
        bits: u8,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        pin_zero: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the WS x {DANUQ, UQ} grid plus a full-precision control.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 2)]
        bits: u8,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load(config: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { config, seed, out } => {
            let cfg = load(config, seed)?;
            let outcome = run_experiment(&cfg, &out)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "round {}: acc_raw {:.4}, acc_ema {:.4}",
                    last.round, last.acc_raw, last.acc_ema
                );
            }
            println!("wrote {}", out.join("metrics.csv").display());
        }
        Command::Levels { bits, pin_zero, out } => {
            let report = write_levels(bits, pin_zero, &out)?;
            print!("{}", report.render());
            println!("wrote {}", out.join(format!("levels_{bits}bit.txt")).display());
        }
        Command::Compare { config, seed, bits, out } => {
            let cfg = load(config, seed)?;
            let results = compare(&cfg, bits, Some(&out))?;
            print!("{}", compare_csv(&results));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Argument(_) => 2,
                Error::Round { .. } | Error::Numerical(_) | Error::Training { .. } => 3,
                _ => 1,
            })
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use mfctrl::experiment::{error_json, exit_code, parse_config, run_command, Command};
use mfctrl::Result;

/// Fluid limits, diffusion approximations and LQR rate control experiments.
#[derive(Debug, Parser)]
#[command(name = "mfctrl", version)]
struct Cli {
    /// One of fluid, coeffs, riccati, simulate, sde, validate, table1.
    command: String,
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the worker thread count.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: &Cli) -> Result<()> {
    let cmd: Command = cli.command.parse()?;
    let mut cfg = parse_config(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let out = run_command(cmd, &cfg)?;
    println!("{}", out.text.trim_end());
    eprintln!("artifacts in {}", cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

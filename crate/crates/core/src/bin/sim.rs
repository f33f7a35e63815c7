use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use accel_core::harness::{emit_report, load_config, parse_config, run_with, Experiment};

#[derive(Parser)]
#[command(name = "sim", version, about = "Stochastic acceleration simulations and acceptance checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Particle chains with direct collision integration.
    FullChain(Common),
    /// Paths of the scalar speed chain.
    XiChain(Common),
    /// Bessel reference process.
    Bessel(Common),
    /// Collision moment constants and the D^2 quadrature.
    Moments(Common),
    /// Dyadic level process of the scalar chain.
    Aux(Common),
    /// Exit probability of the scalar chain.
    ExitProb(Common),
    /// Acceptance suite.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, common) = match cli.command {
        Command::FullChain(c) => (Experiment::FullChain, c),
        Command::XiChain(c) => (Experiment::XiChain, c),
        Command::Bessel(c) => (Experiment::Bessel, c),
        Command::Moments(c) => (Experiment::Moments, c),
        Command::Aux(c) => (Experiment::Aux, c),
        Command::ExitProb(c) => (Experiment::ExitProb, c),
        Command::Verify(c) => (Experiment::Verify, c),
    };
    let loaded = match &common.config {
        Some(path) => load_config(path),
        None => parse_config("{}"),
    };
    let mut cfg = match loaded {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    cfg.experiment = experiment;
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(o) = common.out {
        cfg.output_dir = o;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let bundle = match run_with(&cfg, |r| eprintln!("{}", r.line())) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match bundle.write(&cfg.output_dir) {
        Ok(dir) => eprintln!("wrote {}", dir.display()),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let (text, code) = emit_report(&bundle);
    print!("{text}");
    ExitCode::from(code as u8)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gfl::rdfl::TransportMode;
use gfl::sim::{self, Arm, ExperimentConfig, SimError};

#[derive(Parser)]
#[command(name = "gfl-sim", version, about = "Ring decentralized FL simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, events.log and summary.txt.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_arm)]
        arm: Option<Arm>,
        #[arg(long, value_parser = sim::parse_transport)]
        transport: Option<TransportMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the rdfl arm under both transports and write the byte comparison.
    CommReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    s.parse()
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, SimError> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<(), SimError> {
    match cmd {
        Command::Run {
            config,
            arm,
            transport,
            seed,
            out,
        } => {
            let mut cfg = load(&config, seed)?;
            if let Some(a) = arm {
                cfg.arm = a;
            }
            if let Some(t) = transport {
                cfg.transport = t;
            }
            cfg.validate()?;
            let outcome = sim::run_experiment(&cfg)?;
            sim::write_outputs(&outcome, &out)?;
            print!("{}", outcome.summary());
        }
        Command::CommReport { config, seed, out } => {
            let mut cfg = load(&config, seed)?;
            cfg.arm = Arm::Rdfl;
            cfg.validate()?;
            let direct = sim::run_experiment(&ExperimentConfig {
                transport: TransportMode::Direct,
                ..cfg.clone()
            })?;
            let cas = sim::run_experiment(&ExperimentConfig {
                transport: TransportMode::ContentAddressed,
                ..cfg
            })?;
            let report = sim::communication_report(&direct, &cas)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("comm_report.csv"), report.to_string())?;
            print!("{report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(SimError::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

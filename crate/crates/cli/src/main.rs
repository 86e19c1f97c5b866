use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use idto_cli::commands::{self, MpcArgs, OptimizeArgs};
use idto_cli::EXIT_INPUT;
use idto_core::problem::ConstraintMode;

#[derive(Parser)]
#[command(name = "idto", version, about = "Contact-implicit trajectory optimization and MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Penalty,
    Lm,
}

#[derive(Subcommand)]
enum Command {
    /// Open-loop trajectory optimization.
    Optimize {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Worker threads for derivative evaluation; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Closed-loop MPC episode against the built-in simulator.
    Mpc {
        scenario: PathBuf,
        #[arg(long)]
        episode_seconds: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Verification battery: derivatives, banded algebra, contact model.
    Check {
        scenario: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("IDTO_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT as u8 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Optimize {
            scenario,
            mode,
            max_iters,
            out,
            threads,
        } => commands::optimize(&OptimizeArgs {
            scenario,
            mode: mode.map(|m| match m {
                Mode::Penalty => ConstraintMode::Penalty,
                Mode::Lm => ConstraintMode::Lagrange,
            }),
            max_iters,
            out: Some(out),
            threads,
        })
        .map(|_| ()),
        Command::Mpc {
            scenario,
            episode_seconds,
            out,
            threads,
        } => commands::mpc(&MpcArgs {
            scenario,
            episode_seconds,
            out: Some(out),
            threads,
        })
        .map(|_| ()),
        Command::Check { scenario, threads } => commands::check(&scenario, threads).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

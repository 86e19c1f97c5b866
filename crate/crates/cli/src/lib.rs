//! Library side of the `idto` binary: scenario commands, CSV export and the
//! verification battery.

pub mod check;
pub mod commands;
pub mod output;

use std::fmt;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_FACTORIZATION: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub struct CommandError {
    pub code: i32,
    pub message: String,
}

impl CommandError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl fmt::Display for CommandError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CommandError {}

impl From<idto_core::Error> for CommandError {
    fn from(e: idto_core::Error) -> Self {
        let code = match e {
            idto_core::Error::SimulationDiverged { .. } => EXIT_DIVERGED,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        Self::input(format!("i/o error: {e}"))
    }
}

impl From<csv::Error> for CommandError {
    fn from(e: csv::Error) -> Self {
        Self::input(format!("csv error: {e}"))
    }
}

/// Runs `f` inside a rayon pool with `threads` workers; `None` uses every
/// available core.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CommandError> {
    let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(CommandError::input("--threads must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CommandError::input(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

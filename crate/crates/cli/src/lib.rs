//! Batch entry points for the `omitopics` binary.
//!
//! Every subcommand reads one [`RunConfig`] (a JSON file, optionally empty)
//! and applies command-line overrides on top of it.

pub mod args;
pub mod commands;
pub mod config;

pub use args::{Cli, Command, GlobalArgs, PoeArg};
pub use commands::{cmd_embed, cmd_eval, cmd_gradcheck, cmd_impute, cmd_simulate, cmd_train, run, TrainArtifacts};
pub use config::RunConfig;

/// Failure of a subcommand, split by who has to fix it.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or paths.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] omitopics::Error),
}

impl CliError {
    /// 2 for usage or configuration problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use omitopics::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Argument(_) | E::Scenario(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

//! Experiment driver for the `pse` command.

pub mod config;
pub mod pipeline;
pub mod scan;
pub mod stage;

pub use config::{ConfigError, ExperimentConfig};
pub use pipeline::{merge_runs, run, RunSummary, Stage};

/// Process exit codes.
pub mod exit {
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const DIVERGED: i32 = 4;
}

/// Maps an error chain to an exit code: configuration, data or training
/// divergence; anything else is a generic failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use pse_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return exit::CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Diverged { .. } => exit::DIVERGED,
                E::Config(_) | E::ProtocolMismatch(_) => exit::CONFIG,
                E::Plot(_) | E::Checkpoint(_) => exit::FAILURE,
                _ => exit::DATA,
            };
        }
    }
    exit::FAILURE
}

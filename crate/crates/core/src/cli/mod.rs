//! Experiment specs and the commands run by the `fairfed` binary.

mod commands;
mod spec;

pub use commands::{
    compare, dump_federation, grid_label, run, sweep, verify, write_summary, Check, GridSummary, RunSummary,
    DATA_DIR, SUMMARY,
};
pub use spec::{DataSpec, ExperimentSpec, GeneratorSpec, ModelSpec, PartitionSpec, RunSpec, SCHEMA};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) => EXIT_CONFIG,
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

//! Front end of the `tpoverlap` binary: run configuration and subcommands.

pub mod commands;
pub mod config;

use tpoverlap::Error;

pub const EXIT_OK: i32 = 0;
/// Outputs disagree with the oracle, or a run failed at execution time.
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Mismatch(_) | Error::Deadlock { .. } | Error::Directory { .. } | Error::Bounds(_) => EXIT_FAILED,
        Error::Config(_) | Error::Shape(_) | Error::Parse(_) | Error::Io(_) | Error::Json(_) => EXIT_CONFIG,
    }
}

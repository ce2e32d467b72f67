//! Experiment runner for the `rln2` command: dataset generation, training,
//! evaluation, the guidance/fusion ablation grid, inference and MAC counts.

pub mod commands;
pub mod manifest;

pub use manifest::{DataDescriptor, DataKind, ExperimentManifest};

use rln2_core::Error;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for a failed command, taken from the first library
/// error in the context chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Integrity(_) | Error::Format(_) => EXIT_DATA,
                Error::Numerical(_) => EXIT_NUMERICAL,
                Error::Shape(_) | Error::Range(_) | Error::Io(_) => EXIT_OTHER,
            };
        }
    }
    EXIT_OTHER
}

//! IO companion to `matchkit-core`: run configuration files, dataset
//! ingestion, the checkpoint and synthetic-dataset binary formats, metrics
//! logs, and the command implementations behind the `matchkit` binary.

pub mod ckpt_io;
pub mod commands;
pub mod config;
pub mod data;
pub mod metrics;
pub mod parallel;

/// Process exit codes, stable for scripting.
pub mod exit_codes {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const GRADCHECK: i32 = 4;
}

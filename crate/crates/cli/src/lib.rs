//! Library side of the `mindcraft` binary: configuration, file formats,
//! and the command implementations. The binary in `main.rs` only parses
//! arguments and maps errors to exit codes.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod project;

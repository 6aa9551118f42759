//! Command-line frontend: argument surface, subcommands, run manifests and
//! exit-code mapping for the `qsmtk` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;

pub use args::Cli;
pub use error::{CliError, CliResult, ErrorKind, EXIT_CODES};
pub use manifest::RunManifest;

//! Command-line companion to `sae-core`: configuration, file formats and
//! the subcommands of the `sae` binary.

pub mod commands;
pub mod config;
pub mod districts;
pub mod error;
pub mod io;
pub mod metadata;

//! Command-line pipeline around `trigrid-core`: configuration files,
//! checkpoints and artifacts on disk.

pub mod commands;
pub mod config;
pub mod io;

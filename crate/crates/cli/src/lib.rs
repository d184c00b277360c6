//! Library side of the `survode` command-line tool.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

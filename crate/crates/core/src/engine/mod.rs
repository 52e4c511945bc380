//! Commands behind the `actnet` binary.

pub mod checkpoint;
pub mod checks;
pub mod commands;
pub mod config;
pub mod eval;
pub mod train;

//! Shared pieces of the `sdflow` command: run configuration, exit codes and
//! held-out evaluation.

pub mod config;
pub mod eval;
pub mod exit;

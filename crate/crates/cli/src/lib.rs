//! The `landmark` command line: dataset synthesis and ingestion, training,
//! localization, evaluation and ablation.
//!
//! Every command takes an optional JSON configuration whose keys can be
//! overridden by flags, writes its artifacts to a fresh run directory named
//! by timestamp and configuration hash, and prints a JSON summary.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use cli::{main_with_args, Cli};
pub use error::{CliError, Result};

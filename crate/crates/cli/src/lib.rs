//! Command-line front end: recipe parsing and the `merge`, `diagnose` and
//! `inspect` commands.
//!
//! Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 numeric
//! failure.

pub mod commands;
mod error;
pub mod recipe;

pub use commands::{cmd_diagnose, cmd_inspect, cmd_merge, DiagnoseArgs, MergeArgs, MergeOutcome};
pub use error::{CliError, Result};
pub use recipe::{parse_recipe, MergeRecipe};

//! Command-line front end: data ingestion, fitting, evaluation, simulation,
//! constructions and study reproduction with stable file formats.

pub mod args;
pub mod commands;
pub mod data;
pub mod error;
pub mod model_file;

pub use args::Cli;
pub use commands::run;
pub use error::{CliError, CliResult};
pub use model_file::{Model, ModelFile, Provenance};

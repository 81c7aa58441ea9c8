//! File formats, experiment configs and the `headpurify` command-line runner
//! for [`headpurify_core`].

pub use headpurify_core as core;

mod binfmt;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod export;
pub mod runner;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use runner::Runner;

//! Configuration and command execution behind the `insitu` binary.

pub mod config;
pub mod run;

pub use config::{Command, RunConfig, Target};
pub use run::run;

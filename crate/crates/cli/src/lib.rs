//! Command-line harness: configuration, run manifests, evaluation suites,
//! analyses and plots on top of `ews-core`.

pub mod commands;
pub mod manifest;
pub mod plot;
pub mod settings;

pub use commands::{run, Cli};

//! Batch and interactive front ends for group activity retrieval.
//!
//! Built on [`gafl_core`], this crate adds what needs `std`: the dataset and
//! parameter file formats, feature import, protocol and sweep reports, a
//! parallel protocol runner, TOML configuration, the HTTP session service and
//! the `gafl` command line.

pub mod artifact;
pub mod cli;
pub mod config;
pub mod error;
pub mod format;
pub mod import;
pub mod parallel;
pub mod report;
pub mod service;

pub use gafl_core as core;

pub use artifact::ArtifactMeta;
pub use config::AppConfig;
pub use error::{Error, Result};
pub use format::{load_dataset, load_params, save_dataset, save_params};
pub use import::{export_features, import_features, ImportSchema};

//! Reproducible experiment harness for `clt-embed`.
//!
//! Each experiment reads an [`config::ExperimentConfig`], runs on indexed
//! random streams derived from its seed, and produces a [`report::Report`]
//! plus CSV tables. Reports carry no timestamps, so a rerun with the same
//! config is byte-identical.

pub mod config;
pub mod experiments;
pub mod report;
pub mod stats;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown experiment {0:?}; see `clt-lab list`")]
    UnknownExperiment(String),
    #[error("{0}: {1}")]
    Io(PathBuf, String),
    #[error(transparent)]
    Engine(#[from] clt_embed::Error),
}

pub use config::ExperimentConfig;
pub use experiments::{find, run, Outcome, CATALOG};
pub use report::{CriterionRecord, Report, Table};

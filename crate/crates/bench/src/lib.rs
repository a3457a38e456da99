//! Gaussian-mixture posterior benchmark: builds random measurement models,
//! runs C-DPS and the guided-DDPM baselines, and scores every method by its
//! sliced Wasserstein distance to exact posterior samples.

use std::path::{Path, PathBuf};

pub mod config;
pub mod report;
pub mod runner;

pub use config::{BenchConfig, Method};
pub use report::{emit_results, summarize, SummaryRow};
pub use runner::{run_all, run_config, BenchResult, ResultRow};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] cdps_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl BenchError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, source: csv::Error) -> Self {
        Self::Csv {
            path: path.to_path_buf(),
            source,
        }
    }
}

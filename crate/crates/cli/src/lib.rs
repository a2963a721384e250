//! Command-line front end: configuration parsing, the `simulate`,
//! `reproduce` and `diagnose` commands, and their CSV outputs.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

pub use commands::{diagnose, reproduce, simulate, Diagnostic, Suite};
pub use config::{parse_config, ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("design {design}: {source}")]
    Design {
        design: String,
        #[source]
        source: bma_core::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("cannot serialize manifest: {0}")]
    Json(#[from] serde_json::Error),
}

/// Reads and validates a configuration file.
pub fn load_config(path: &std::path::Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    Ok(parse_config(&text)?)
}

/// Command-line overrides applied on top of a configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub seed: Option<u64>,
    pub replications: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, mut config: RunConfig) -> Result<RunConfig, CliError> {
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(p) = self.parallelism {
            config.parallelism = p;
        }
        if let Some(s) = self.seed {
            config.base_seed = s;
        }
        if let Some(r) = self.replications {
            config.replications = r;
        }
        config.validate()?;
        Ok(config)
    }
}

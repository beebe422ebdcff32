//! Experiment runner for `hiersim-core`: TOML configurations, deterministic
//! parallel replicas, CSV/JSON outputs and run manifests.
//!
//! ```no_run
//! use hiersim::config::parse_config;
//! use hiersim::run::{run, RunOptions};
//!
//! let config = parse_config(&std::fs::read_to_string("fss.toml").unwrap()).unwrap();
//! let outcome = run(&config, &RunOptions { out_dir: "out".into(), jobs: 4 }).unwrap();
//! println!("{}", outcome.manifest.config_hash);
//! ```

use std::path::PathBuf;

pub mod config;
pub mod output;
pub mod run;

pub use config::{parse_config, ConfigErrors, ExperimentConfig, ExperimentKind};
pub use output::{RunManifest, RunStatus};
pub use run::{run, RunOptions, RunOutcome};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Core(#[from] hiersim_core::Error),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

impl RunError {
    /// 1 for invalid input, 3 for budget failures, 2 otherwise.
    pub fn exit_code(&self) -> u8 {
        use hiersim_core::Error as E;
        match self {
            RunError::Config(_) | RunError::Core(E::Parameter(_) | E::Config(_)) => 1,
            RunError::Core(E::Budget { .. }) => 3,
            _ => 2,
        }
    }
}

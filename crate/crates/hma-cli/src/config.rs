//! Optional TOML run configuration. Every key mirrors a command-line
//! flag; when both are given the flag wins.
//!
//! ```toml
//! out_dir = "out"
//! standardize = true
//!
//! [schema]
//! exposure = "dose"
//! propensity = "score"
//! endpoints = ["verbal", "performance"]
//! missing_tokens = ["", "NA"]
//! delimiter = ","
//!
//! [convergence]
//! tol_beta = 1e-8
//! tol_phi = 1e-8
//! max_iter = 500
//!
//! [pool]
//! method = "two-stage"
//! seed = 7
//!
//! [simulate]
//! reps = 1000
//! seed = 42
//! n = 500
//! method = "both"
//!
//! [plot]
//! width = 720
//! title = ""
//! effect_label = "effect"
//! ```

use std::path::{Path, PathBuf};

use hma_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub out_dir: Option<PathBuf>,
    pub standardize: Option<bool>,
    #[serde(default)]
    pub schema: SchemaConfig,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub plot: PlotConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub exposure: Option<String>,
    pub propensity: Option<String>,
    pub endpoints: Option<Vec<String>>,
    pub missing_tokens: Option<Vec<String>>,
    pub delimiter: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub tol_beta: Option<f64>,
    pub tol_phi: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub method: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub method: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotConfig {
    pub width: Option<u32>,
    pub title: Option<String>,
    pub effect_label: Option<String>,
}

/// Load the config file, or the all-defaults config when no path is given.
pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))
}

//! Run metadata written next to every command's outputs as `run.json`.
//! The embedded configuration, with its seed, is enough to repeat the run.

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use sae_core::mcmc::PosteriorFit;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// R-hat above which a run is flagged as not converged.
pub const RHAT_WARNING: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub sae: String,
    pub sae_core: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub max_rhat: Option<f64>,
    /// Parameters with R-hat above the warning threshold.
    pub high_rhat: Vec<String>,
    /// Acceptance rate per chain and block.
    pub acceptance: Vec<Vec<f64>>,
}

impl Diagnostics {
    pub fn from_fit(fit: &PosteriorFit) -> Self {
        let high_rhat = fit
            .names()
            .iter()
            .zip(fit.rhat())
            .filter(|(_, r)| r.is_some_and(|r| r > RHAT_WARNING))
            .map(|(n, _)| n.clone())
            .collect();
        Diagnostics {
            chains: fit.n_chains(),
            draws_per_chain: fit.draws_per_chain(),
            max_rhat: fit.max_rhat(),
            high_rhat,
            acceptance: fit.acceptance().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub command: String,
    pub model_tag: Option<String>,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub versions: Versions,
    pub outputs: Vec<String>,
    pub diagnostics: Option<Diagnostics>,
    /// Set when any R-hat exceeds the threshold; the run still succeeds.
    pub warning: bool,
    pub warnings: Vec<String>,
    pub results: serde_json::Value,
    pub config: RunConfig,
}

impl Metadata {
    pub fn new(
        command: &str,
        model_tag: Option<String>,
        outputs: Vec<String>,
        diagnostics: Option<Diagnostics>,
        results: serde_json::Value,
        config: RunConfig,
    ) -> Self {
        let mut warnings = Vec::new();
        if let Some(d) = &diagnostics {
            if !d.high_rhat.is_empty() {
                warnings.push(format!(
                    "not converged: R-hat above {RHAT_WARNING} for {} parameter(s), max {:.3}; first: {}",
                    d.high_rhat.len(),
                    d.max_rhat.unwrap_or(f64::NAN),
                    d.high_rhat[0]
                ));
            }
        }
        Metadata {
            command: command.to_owned(),
            model_tag,
            config_sha256: config.sha256(),
            seed: config.seed,
            versions: Versions { sae: env!("CARGO_PKG_VERSION").to_owned(), sae_core: sae_core::VERSION.to_owned() },
            outputs,
            diagnostics,
            warning: !warnings.is_empty(),
            warnings,
            results,
            config,
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("metadata serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> CliResult<Metadata> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("invalid metadata {}: {e}", path.display())))
    }
}

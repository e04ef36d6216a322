//! JSON run configuration shared by every subcommand.

use crate::error::{CliError, CliResult};
use sae_core::mcmc::{ChainConfig, PhiPrior, SdPrior};
use sae_core::population::{FrameLayout, PopulationConfig, SamplingFrame};
use sae_core::sampling::{StartRule, TwoStageDesign};
use sae_core::unitlevel::{GpPriors, NuggetPrior, OverdispersionPrior, RangePrior, UnitPriors};
use sae_core::arealevel::AreaPriors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub inputs: Inputs,
    pub simulate: SimulateConfig,
    pub design: DesignConfig,
    pub direct: DirectConfig,
    pub model: ModelConfig,
    pub mcmc: McmcConfig,
    pub assess: AssessConfig,
    pub rank: RankConfig,
}

/// Input files. Relative paths are resolved against the directory of the
/// configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub frame: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub sample: Option<PathBuf>,
    /// Aggregated counts `area_id,y_positive,n_tested` without design information.
    pub counts: Option<PathBuf>,
    pub direct: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub urban_fractions: Option<PathBuf>,
    pub pixels: Option<PathBuf>,
    pub draws: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Synthetic rows x cols lattice of areas, used when no frame file is given.
    pub lattice: [usize; 2],
    pub urban_clusters: usize,
    pub rural_clusters: usize,
    pub min_households: u32,
    pub max_households: u32,
    pub intercept: f64,
    pub urban_log_odds: f64,
    pub area_effect_sd: f64,
    pub spatial_proportion: f64,
    pub cluster_effect_sd: f64,
    pub covariate_effects: Vec<f64>,
    pub persons_per_household: u32,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            lattice: [3, 9],
            urban_clusters: 4,
            rural_clusters: 13,
            min_households: 60,
            max_households: 240,
            intercept: -2.8,
            urban_log_odds: 2.3f64.ln(),
            area_effect_sd: 0.4,
            spatial_proportion: 0.5,
            cluster_effect_sd: 0.2,
            covariate_effects: Vec::new(),
            persons_per_household: 1,
        }
    }
}

impl SimulateConfig {
    pub fn layout(&self) -> FrameLayout {
        FrameLayout {
            urban_clusters: self.urban_clusters,
            rural_clusters: self.rural_clusters,
            min_households: self.min_households,
            max_households: self.max_households,
        }
    }

    pub fn population(&self, seed: u64) -> PopulationConfig {
        PopulationConfig {
            intercept: self.intercept,
            urban_log_odds: self.urban_log_odds,
            area_effect_sd: self.area_effect_sd,
            spatial_proportion: self.spatial_proportion,
            cluster_effect_sd: self.cluster_effect_sd,
            covariate_effects: self.covariate_effects.clone(),
            area_covariates: None,
            persons_per_household: self.persons_per_household,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartConfig {
    Real,
    Integer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    /// Clusters taken per stratum id, overriding the urban/rural defaults.
    pub clusters_per_stratum: BTreeMap<String, usize>,
    /// Clusters taken from each urban stratum, capped at its size.
    pub urban_clusters: usize,
    /// Clusters taken from each rural stratum, capped at its size.
    pub rural_clusters: usize,
    pub households_per_cluster: Option<u32>,
    pub nonresponse_rates: Option<BTreeMap<String, f64>>,
    pub start: StartConfig,
    /// Shuffle the frame order within each stratum before selection.
    pub random_order: bool,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            clusters_per_stratum: BTreeMap::new(),
            urban_clusters: 4,
            rural_clusters: 3,
            households_per_cluster: Some(25),
            nonresponse_rates: None,
            start: StartConfig::Real,
            random_order: false,
        }
    }
}

impl DesignConfig {
    pub fn design(&self, frame: &SamplingFrame, seed: u64) -> TwoStageDesign {
        let takes = frame
            .strata()
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let take = match self.clusters_per_stratum.get(&s.id) {
                    Some(&n) => n,
                    None => {
                        let n = if s.urban { self.urban_clusters } else { self.rural_clusters };
                        n.min(frame.clusters_in_stratum(k).len())
                    }
                };
                (s.id.clone(), take)
            })
            .collect();
        TwoStageDesign {
            clusters_per_stratum: takes,
            default_clusters: 0,
            households_per_cluster: self.households_per_cluster,
            nonresponse_rates: self.nonresponse_rates.clone(),
            start: match self.start {
                StartConfig::Real => StartRule::Real,
                StartConfig::Integer => StartRule::Integer,
            },
            random_order: self.random_order,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectConfig {
    /// Use the survey weights; false gives binomial proportions.
    pub weighted: bool,
    pub coverage: f64,
}

impl Default for DirectConfig {
    fn default() -> Self {
        DirectConfig { weighted: true, coverage: 0.9 }
    }
}

/// A prior given by a tail statement, a fixed value, or (where allowed) a
/// uniform distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Pc { u: f64, alpha: f64 },
    Fixed(f64),
    Uniform,
}

impl PriorSpec {
    fn sd(self, what: &str) -> CliResult<SdPrior> {
        match self {
            PriorSpec::Pc { u, alpha } => Ok(SdPrior::Pc { u, alpha }),
            PriorSpec::Fixed(s) => Ok(SdPrior::Fixed(s)),
            PriorSpec::Uniform => Err(CliError::Validation(format!("{what} prior cannot be uniform"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub sd: PriorSpec,
    pub phi: PriorSpec,
    pub beta_sd: f64,
    pub overdispersion: PriorSpec,
    pub range: PriorSpec,
    pub nugget: PriorSpec,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            sd: PriorSpec::Pc { u: 1.0, alpha: 0.01 },
            phi: PriorSpec::Pc { u: 0.5, alpha: 2.0 / 3.0 },
            beta_sd: 31.6,
            overdispersion: PriorSpec::Pc { u: 0.5, alpha: 0.01 },
            range: PriorSpec::Pc { u: 0.5, alpha: 0.05 },
            nugget: PriorSpec::Pc { u: 1.0, alpha: 0.01 },
        }
    }
}

impl PriorConfig {
    fn phi_prior(&self) -> PhiPrior {
        match self.phi {
            PriorSpec::Pc { u, alpha } => PhiPrior::Pc { u, alpha },
            PriorSpec::Fixed(p) => PhiPrior::Fixed(p),
            PriorSpec::Uniform => PhiPrior::Uniform,
        }
    }

    pub fn area(&self) -> CliResult<AreaPriors> {
        Ok(AreaPriors { sd: self.sd.sd("sd")?, phi: self.phi_prior(), beta_sd: self.beta_sd })
    }

    pub fn unit(&self) -> CliResult<UnitPriors> {
        let overdispersion = match self.overdispersion {
            PriorSpec::Pc { u, alpha } => OverdispersionPrior::Pc { u, alpha },
            PriorSpec::Fixed(l) => OverdispersionPrior::Fixed(l),
            PriorSpec::Uniform => OverdispersionPrior::Uniform,
        };
        Ok(UnitPriors { sd: self.sd.sd("sd")?, phi: self.phi_prior(), beta_sd: self.beta_sd, overdispersion })
    }

    pub fn gp(&self) -> CliResult<GpPriors> {
        let range = match self.range {
            PriorSpec::Pc { u, alpha } => RangePrior::Pc { u, alpha },
            PriorSpec::Fixed(r) => RangePrior::Fixed(r),
            PriorSpec::Uniform => return Err(CliError::Validation("range prior cannot be uniform".into())),
        };
        let nugget = match self.nugget {
            PriorSpec::Pc { u, alpha } => NuggetPrior::Pc { u, alpha },
            PriorSpec::Fixed(t) => NuggetPrior::Fixed(t),
            PriorSpec::Uniform => return Err(CliError::Validation("nugget prior cannot be uniform".into())),
        };
        Ok(GpPriors { sd: self.sd.sd("sd")?, range, nugget, beta_sd: self.beta_sd })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    BetaBinomial,
    Gp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: UnitKind,
    /// Include the urban stratum effect in unit-level models.
    pub urban: bool,
    /// Covariate columns taken from the covariates file.
    pub covariates: Vec<String>,
    pub priors: PriorConfig,
    pub coverage: f64,
    pub smoothness: f64,
    pub nugget_floor: f64,
    /// Posterior draws used for pixel aggregation.
    pub max_draws: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: UnitKind::BetaBinomial,
            urban: true,
            covariates: Vec::new(),
            priors: PriorConfig::default(),
            coverage: 0.9,
            smoothness: 1.5,
            nugget_floor: 0.0,
            max_draws: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        let c = ChainConfig::default();
        McmcConfig { n_iter: c.n_iter, burn_in: c.burn_in, thin: c.thin, n_chains: c.n_chains }
    }
}

impl McmcConfig {
    pub fn chain(&self, seed: u64) -> ChainConfig {
        ChainConfig { n_iter: self.n_iter, burn_in: self.burn_in, thin: self.thin, n_chains: self.n_chains, seed, ..ChainConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssessLevel {
    Area,
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssessConfig {
    pub level: AssessLevel,
}

impl Default for AssessConfig {
    fn default() -> Self {
        AssessConfig { level: AssessLevel::Area }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    pub coverage: f64,
    /// Draws simulated from the logit-normal approximation when ranking
    /// direct estimates.
    pub direct_draws: usize,
    /// Tag written to the output; defaults to `posterior` for draws and
    /// `direct` for direct estimates.
    pub model_tag: Option<String>,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig { coverage: 0.9, direct_draws: 4000, model_tag: None }
    }
}

impl RunConfig {
    /// Reads a configuration file, or the `config` member of a run-metadata
    /// file, and resolves relative input paths.
    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("invalid JSON in {}: {e}", path.display())))?;
        let inner = match value.get("config") {
            Some(c) if value.get("config_sha256").is_some() => c.clone(),
            _ => value,
        };
        let mut cfg: RunConfig =
            serde_json::from_value(inner).map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.inputs.resolve(base);
        Ok(cfg)
    }

    pub fn sha256(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn require_seed(&self) -> CliResult<u64> {
        self.seed.ok_or_else(|| CliError::Validation("a seed is required: set `seed` in the config or pass --seed".into()))
    }
}

impl Inputs {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.frame,
            &mut self.adjacency,
            &mut self.population,
            &mut self.sample,
            &mut self.counts,
            &mut self.direct,
            &mut self.covariates,
            &mut self.urban_fractions,
            &mut self.pixels,
            &mut self.draws,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if let Ok(abs) = std::path::absolute(&*p) {
                *p = abs;
            }
        }
    }
}

//! Sampling frames and synthetic finite populations with known area truth.
//!
//! Individual outcomes are Bernoulli with cluster risk
//! `expit(b0 + x_i'b1 + urban * gamma + b_i + eps_c)`, where `b_i` is a BYM2
//! area effect over the supplied adjacency structure and `eps_c` an iid
//! cluster effect. All random numbers are drawn in a fixed order from
//! separate streams, so changing an effect size while keeping the seed
//! reuses the same underlying draws.

use crate::error::{Error, Result};
use crate::math::expit;
use crate::prelude::*;
use crate::rng::stream_rng;
use crate::spatial::{bym2_combine, BoundingBox, SpatialStructure};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub id: String,
    pub area: String,
    pub urban: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub stratum: String,
    pub households: u32,
    /// Centroid as (longitude, latitude) or any planar coordinates.
    pub location: Option<(f64, f64)>,
}

/// Strata and their clusters, the census-like selection frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingFrame {
    strata: Vec<Stratum>,
    clusters: Vec<Cluster>,
    stratum_index: BTreeMap<String, usize>,
    cluster_stratum: Vec<usize>,
    areas: Vec<String>,
}

impl SamplingFrame {
    pub fn new(strata: Vec<Stratum>, clusters: Vec<Cluster>) -> Result<Self> {
        let mut stratum_index = BTreeMap::new();
        let mut areas = Vec::new();
        let mut seen_areas = BTreeSet::new();
        for (h, s) in strata.iter().enumerate() {
            if stratum_index.insert(s.id.clone(), h).is_some() {
                return Err(Error::invalid("frame", format!("duplicate stratum `{}`", s.id)));
            }
            if seen_areas.insert(s.area.clone()) {
                areas.push(s.area.clone());
            }
        }
        let mut cluster_ids = BTreeSet::new();
        let mut cluster_stratum = Vec::with_capacity(clusters.len());
        let mut area_has_cluster = BTreeSet::new();
        for c in &clusters {
            if !cluster_ids.insert(c.id.as_str()) {
                return Err(Error::invalid("frame", format!("duplicate cluster `{}`", c.id)));
            }
            if c.households == 0 {
                return Err(Error::invalid("frame", format!("cluster `{}` has no households", c.id)));
            }
            let h = *stratum_index
                .get(&c.stratum)
                .ok_or_else(|| Error::invalid("frame", format!("cluster `{}` names unknown stratum `{}`", c.id, c.stratum)))?;
            cluster_stratum.push(h);
            area_has_cluster.insert(strata[h].area.as_str());
        }
        if let Some(a) = areas.iter().find(|a| !area_has_cluster.contains(a.as_str())) {
            return Err(Error::invalid("frame", format!("area `{a}` has no clusters")));
        }
        Ok(SamplingFrame {
            strata,
            clusters,
            stratum_index,
            cluster_stratum,
            areas,
        })
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    /// Area ids in order of first appearance among the strata.
    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn stratum_index(&self, id: &str) -> Option<usize> {
        self.stratum_index.get(id).copied()
    }

    pub fn stratum_of(&self, cluster: usize) -> &Stratum {
        &self.strata[self.cluster_stratum[cluster]]
    }

    pub fn stratum_position(&self, cluster: usize) -> usize {
        self.cluster_stratum[cluster]
    }

    pub fn clusters_in_stratum(&self, stratum: usize) -> Vec<usize> {
        (0..self.clusters.len())
            .filter(|&c| self.cluster_stratum[c] == stratum)
            .collect()
    }

    /// Share of each area's households that lie in urban strata.
    pub fn urban_fractions(&self) -> Vec<(String, f64)> {
        let mut urban = BTreeMap::<&str, f64>::new();
        let mut total = BTreeMap::<&str, f64>::new();
        for (c, cl) in self.clusters.iter().enumerate() {
            let s = self.stratum_of(c);
            *total.entry(s.area.as_str()).or_default() += cl.households as f64;
            if s.urban {
                *urban.entry(s.area.as_str()).or_default() += cl.households as f64;
            }
        }
        self.areas
            .iter()
            .map(|a| {
                let u = urban.get(a.as_str()).copied().unwrap_or(0.0);
                (a.clone(), u / total[a.as_str()])
            })
            .collect()
    }
}

/// Layout of a synthetic frame: per area an urban and a rural stratum with a
/// fixed number of clusters and uniformly distributed household counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLayout {
    pub urban_clusters: usize,
    pub rural_clusters: usize,
    pub min_households: u32,
    pub max_households: u32,
}

/// Builds a frame with strata `<area>-U` / `<area>-R` and clusters
/// `<area>-U001`, ... When bounding boxes are given (one per area), cluster
/// centroids are drawn uniformly within them.
pub fn synthetic_frame(
    areas: &[String],
    layout: &FrameLayout,
    boxes: Option<&[BoundingBox]>,
    seed: u64,
) -> Result<SamplingFrame> {
    if layout.min_households == 0 || layout.min_households > layout.max_households {
        return Err(Error::invalid("frame layout", "need 1 <= min_households <= max_households"));
    }
    if layout.urban_clusters + layout.rural_clusters == 0 {
        return Err(Error::invalid("frame layout", "every area needs at least one cluster"));
    }
    if let Some(b) = boxes {
        if b.len() != areas.len() {
            return Err(Error::invalid("frame layout", "one bounding box per area is required"));
        }
    }
    let mut rng = stream_rng(seed, 0);
    let mut strata = Vec::new();
    let mut clusters = Vec::new();
    for (i, area) in areas.iter().enumerate() {
        for (urban, count, tag) in [(true, layout.urban_clusters, "U"), (false, layout.rural_clusters, "R")] {
            if count == 0 {
                continue;
            }
            let stratum = format!("{area}-{tag}");
            strata.push(Stratum { id: stratum.clone(), area: area.clone(), urban });
            for k in 0..count {
                let households = rng.random_range(layout.min_households..=layout.max_households);
                let location = boxes.map(|b| {
                    let bb = b[i];
                    let x = bb.min_x + rng.random::<f64>() * (bb.max_x - bb.min_x);
                    let y = bb.min_y + rng.random::<f64>() * (bb.max_y - bb.min_y);
                    (x, y)
                });
                clusters.push(Cluster {
                    id: format!("{stratum}{:03}", k + 1),
                    stratum: stratum.clone(),
                    households,
                    location,
                });
            }
        }
    }
    SamplingFrame::new(strata, clusters)
}

/// Generative model for a synthetic population. Field names double as the
/// keys of the JSON configuration document.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationConfig {
    pub intercept: f64,
    pub urban_log_odds: f64,
    pub area_effect_sd: f64,
    pub spatial_proportion: f64,
    pub cluster_effect_sd: f64,
    pub covariate_effects: Vec<f64>,
    /// Per-area covariate rows in the order of the structure's ids. Drawn
    /// iid standard normal when absent and `covariate_effects` is non-empty.
    pub area_covariates: Option<Vec<Vec<f64>>>,
    pub persons_per_household: u32,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            intercept: 0.0,
            urban_log_odds: 0.0,
            area_effect_sd: 0.0,
            spatial_proportion: 0.5,
            cluster_effect_sd: 0.0,
            covariate_effects: Vec::new(),
            area_covariates: None,
            persons_per_household: 1,
            seed: 0,
        }
    }
}

impl PopulationConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.spatial_proportion) {
            return Err(Error::invalid("population config", "spatial_proportion must lie in [0, 1]"));
        }
        for (name, sd) in [("area_effect_sd", self.area_effect_sd), ("cluster_effect_sd", self.cluster_effect_sd)] {
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(Error::invalid("population config", format!("{name} must be a finite value >= 0")));
            }
        }
        if self.persons_per_household == 0 {
            return Err(Error::invalid("population config", "persons_per_household must be >= 1"));
        }
        if !self.intercept.is_finite() || !self.urban_log_odds.is_finite() {
            return Err(Error::invalid("population config", "intercept and urban_log_odds must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaTruth {
    pub area: String,
    pub individuals: u64,
    pub positives: u64,
    pub mean: f64,
}

/// A frame with one binary outcome per resident individual.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePopulation {
    frame: SamplingFrame,
    persons_per_household: u32,
    outcomes: Vec<Vec<u8>>,
    cluster_risk: Vec<f64>,
    area_effects: BTreeMap<String, f64>,
    covariates: Vec<Vec<f64>>,
    truth: Vec<AreaTruth>,
}

impl FinitePopulation {
    /// Wraps explicit outcomes; `outcomes[c]` lists the individuals of
    /// cluster `c`, household by household.
    pub fn from_outcomes(frame: SamplingFrame, persons_per_household: u32, outcomes: Vec<Vec<u8>>) -> Result<Self> {
        if persons_per_household == 0 {
            return Err(Error::invalid("population", "persons_per_household must be >= 1"));
        }
        if outcomes.len() != frame.clusters().len() {
            return Err(Error::invalid("population", "one outcome vector per cluster is required"));
        }
        for (c, ys) in outcomes.iter().enumerate() {
            let want = frame.clusters()[c].households as usize * persons_per_household as usize;
            if ys.len() != want {
                return Err(Error::invalid(
                    "population",
                    format!("cluster `{}` has {} outcomes, expected {want}", frame.clusters()[c].id, ys.len()),
                ));
            }
            if ys.iter().any(|&y| y > 1) {
                return Err(Error::invalid("population", "outcomes must be 0 or 1"));
            }
        }
        let truth = tabulate_truth(&frame, &outcomes);
        let n = frame.clusters().len();
        Ok(FinitePopulation {
            frame,
            persons_per_household,
            outcomes,
            cluster_risk: vec![f64::NAN; n],
            area_effects: BTreeMap::new(),
            covariates: Vec::new(),
            truth,
        })
    }

    pub fn frame(&self) -> &SamplingFrame {
        &self.frame
    }

    pub fn persons_per_household(&self) -> u32 {
        self.persons_per_household
    }

    pub fn outcomes(&self, cluster: usize) -> &[u8] {
        &self.outcomes[cluster]
    }

    /// Risk used to generate each cluster's outcomes (NaN when the
    /// population was supplied rather than generated).
    pub fn cluster_risk(&self) -> &[f64] {
        &self.cluster_risk
    }

    /// Generated BYM2 area effects by area id.
    pub fn area_effects(&self) -> &BTreeMap<String, f64> {
        &self.area_effects
    }

    /// Area covariate rows used by the generator, in graph order; empty
    /// for populations built from explicit outcomes.
    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn truth(&self) -> &[AreaTruth] {
        &self.truth
    }
}

fn tabulate_truth(frame: &SamplingFrame, outcomes: &[Vec<u8>]) -> Vec<AreaTruth> {
    let mut counts = BTreeMap::<&str, (u64, u64)>::new();
    for (c, ys) in outcomes.iter().enumerate() {
        let e = counts.entry(frame.stratum_of(c).area.as_str()).or_default();
        e.0 += ys.len() as u64;
        e.1 += ys.iter().map(|&y| y as u64).sum::<u64>();
    }
    frame
        .areas()
        .iter()
        .map(|a| {
            let (n, y) = counts[a.as_str()];
            AreaTruth {
                area: a.clone(),
                individuals: n,
                positives: y,
                mean: y as f64 / n as f64,
            }
        })
        .collect()
}

/// Draws a finite population over `frame`. Every frame area must be a node
/// of `structure`, and every node must have clusters in the frame.
pub fn generate_population(
    frame: &SamplingFrame,
    structure: &SpatialStructure,
    config: &PopulationConfig,
) -> Result<FinitePopulation> {
    config.validate()?;
    for a in frame.areas() {
        if structure.index_of(a).is_none() {
            return Err(Error::UnknownArea(a.clone()));
        }
    }
    if frame.areas().len() != structure.len() {
        return Err(Error::invalid("population", "every area of the adjacency graph needs clusters in the frame"));
    }
    let m = structure.len();
    let p = config.covariate_effects.len();

    let mut area_rng = stream_rng(config.seed, 0);
    let iid: Vec<f64> = (0..m).map(|_| area_rng.sample(StandardNormal)).collect();
    let spatial = structure.sample_scaled_icar(&mut area_rng);
    let effects = bym2_combine(&iid, &spatial, config.area_effect_sd, config.spatial_proportion);

    let covariates: Vec<Vec<f64>> = match &config.area_covariates {
        Some(rows) => {
            if rows.len() != m || rows.iter().any(|r| r.len() != p) {
                return Err(Error::invalid(
                    "population config",
                    format!("area_covariates must be {m} rows of {p} values"),
                ));
            }
            rows.clone()
        }
        None => {
            let mut rng = stream_rng(config.seed, 1);
            (0..m).map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect()).collect()
        }
    };
    let area_linear: Vec<f64> = (0..m)
        .map(|i| {
            config.intercept
                + effects[i]
                + covariates[i].iter().zip(&config.covariate_effects).map(|(x, b)| x * b).sum::<f64>()
        })
        .collect();

    let mut cluster_rng = stream_rng(config.seed, 2);
    let mut unit_rng = stream_rng(config.seed, 3);
    let mut outcomes = Vec::with_capacity(frame.clusters().len());
    let mut cluster_risk = Vec::with_capacity(frame.clusters().len());
    for (c, cl) in frame.clusters().iter().enumerate() {
        let stratum = frame.stratum_of(c);
        let i = structure.index_of(&stratum.area).expect("area checked above");
        let eps: f64 = cluster_rng.sample::<f64, _>(StandardNormal) * config.cluster_effect_sd;
        let urban = if stratum.urban { config.urban_log_odds } else { 0.0 };
        let risk = expit(area_linear[i] + urban + eps);
        let size = cl.households as usize * config.persons_per_household as usize;
        let ys: Vec<u8> = (0..size).map(|_| u8::from(unit_rng.random::<f64>() < risk)).collect();
        outcomes.push(ys);
        cluster_risk.push(risk);
    }

    let truth = tabulate_truth(frame, &outcomes);
    let area_effects = structure.ids().iter().cloned().zip(effects).collect();
    Ok(FinitePopulation {
        frame: frame.clone(),
        persons_per_household: config.persons_per_household,
        outcomes,
        cluster_risk,
        area_effects,
        covariates,
        truth,
    })
}

/// `sum(y) / N` over all individuals of `area`.
pub fn finite_population_mean(pop: &FinitePopulation, area: &str) -> Result<f64> {
    let mut n = 0u64;
    let mut y = 0u64;
    for (c, ys) in pop.outcomes.iter().enumerate() {
        if pop.frame.stratum_of(c).area == area {
            n += ys.len() as u64;
            y += ys.iter().map(|&v| v as u64).sum::<u64>();
        }
    }
    if n == 0 {
        return Err(Error::UnknownArea(area.to_owned()));
    }
    Ok(y as f64 / n as f64)
}

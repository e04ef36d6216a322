#![allow(dead_code)]

use sae_core::population::{generate_population, synthetic_frame, FinitePopulation, FrameLayout, PopulationConfig, SamplingFrame};
use sae_core::sampling::TwoStageDesign;
use sae_core::spatial::{Lattice, SpatialStructure};
use std::collections::BTreeMap;

pub struct World {
    pub lattice: Lattice,
    pub structure: SpatialStructure,
    pub frame: SamplingFrame,
    pub pop: FinitePopulation,
}

pub fn world(rows: usize, cols: usize, layout: FrameLayout, cfg: PopulationConfig) -> World {
    let lattice = Lattice::new(rows, cols);
    let structure = lattice.structure().unwrap();
    let frame = synthetic_frame(&lattice.ids(), &layout, Some(&lattice.bounding_boxes()), cfg.seed ^ 0xF00D).unwrap();
    let pop = generate_population(&frame, &structure, &cfg).unwrap();
    World { lattice, structure, frame, pop }
}

/// Takes `urban` clusters from urban strata and `rural` from rural strata.
pub fn design(frame: &SamplingFrame, urban: usize, rural: usize, households: Option<u32>, seed: u64) -> TwoStageDesign {
    let takes: BTreeMap<String, usize> = frame.strata().iter().map(|s| (s.id.clone(), if s.urban { urban } else { rural })).collect();
    TwoStageDesign { clusters_per_stratum: takes, default_clusters: 0, households_per_cluster: households, nonresponse_rates: None, start: Default::default(), random_order: true, seed }
}

pub fn truth(pop: &FinitePopulation) -> BTreeMap<String, f64> {
    pop.truth().iter().map(|t| (t.area.clone(), t.mean)).collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

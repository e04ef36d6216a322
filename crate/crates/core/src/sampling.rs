//! Survey designs: linear systematic PPS, stratified two-stage cluster
//! sampling, weight adjustments and adaptive cluster sampling.

use crate::error::{Error, Result};
use crate::population::FinitePopulation;
use crate::prelude::*;
use crate::rng::stream_rng;
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;

/// Linear systematic PPS selection. With cumulative sizes `T_i` and interval
/// `t = T_m / n`, unit `i` is selected once for every hit `r + j t`
/// (`j = 0..n`) with `T_{i-1} < r + j t <= T_i`.
pub fn pps_systematic(sizes: &[u64], n: usize, r: f64) -> Result<Vec<usize>> {
    if n == 0 || n > sizes.len() {
        return Err(Error::invalid("pps", format!("cannot take {n} of {} units", sizes.len())));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("pps", "sizes must be positive"));
    }
    let total: u64 = sizes.iter().sum();
    let t = total as f64 / n as f64;
    if let Some((index, &size)) = sizes.iter().enumerate().find(|(_, &s)| s as f64 > t) {
        return Err(Error::CertaintyUnit { index, size: size as f64, interval: t });
    }
    if !(r > 0.0 && r <= t) {
        return Err(Error::invalid("pps", format!("start {r} outside (0, {t}]")));
    }
    let mut out = Vec::with_capacity(n);
    let mut unit = 0usize;
    let mut upper = sizes[0] as f64;
    for j in 0..n {
        let hit = r + j as f64 * t;
        while hit > upper && unit + 1 < sizes.len() {
            unit += 1;
            upper += sizes[unit] as f64;
        }
        out.push(unit);
    }
    Ok(out)
}

/// First-stage, second-stage and overall inclusion probabilities of a
/// household in cluster `c` of stratum `h`.
pub fn inclusion_probability_two_stage(n_h: u64, n_hc_households: u64, n_h_households: u64, take: u64) -> Result<(f64, f64, f64)> {
    if n_h == 0 || n_hc_households == 0 || n_h_households == 0 || take == 0 {
        return Err(Error::invalid("inclusion probability", "all counts must be positive"));
    }
    if take > n_hc_households {
        return Err(Error::invalid("inclusion probability", "second-stage take exceeds cluster size"));
    }
    if n_h * n_hc_households > n_h_households {
        return Err(Error::invalid(
            "inclusion probability",
            "first-stage probability exceeds 1 (certainty cluster)",
        ));
    }
    let pi1 = (n_h * n_hc_households) as f64 / n_h_households as f64;
    let pi2 = take as f64 / n_hc_households as f64;
    let pi = (n_h * take) as f64 / n_h_households as f64;
    Ok((pi1, pi2, pi))
}

/// How the PPS random start is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StartRule {
    /// Uniform real on `(0, t]`.
    #[default]
    Real,
    /// Uniform integer on `1..=floor(t)`.
    Integer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageDesign {
    /// Clusters taken per stratum id; strata not listed use `default_clusters`.
    pub clusters_per_stratum: BTreeMap<String, usize>,
    pub default_clusters: usize,
    /// Households per selected cluster; `None` takes every household.
    pub households_per_cluster: Option<u32>,
    /// Per-stratum probability that a selected household responds.
    pub nonresponse_rates: Option<BTreeMap<String, f64>>,
    pub start: StartRule,
    /// Lists each stratum's clusters in a fresh random order before the
    /// systematic pass. Inclusion probabilities are unchanged.
    pub random_order: bool,
    pub seed: u64,
}

impl TwoStageDesign {
    pub fn uniform(clusters: usize, households: u32, seed: u64) -> Self {
        TwoStageDesign {
            clusters_per_stratum: BTreeMap::new(),
            default_clusters: clusters,
            households_per_cluster: Some(households),
            nonresponse_rates: None,
            start: StartRule::Real,
            random_order: false,
            seed,
        }
    }

    pub fn clusters_for(&self, stratum: &str) -> usize {
        self.clusters_per_stratum.get(stratum).copied().unwrap_or(self.default_clusters)
    }
}

/// One sampled cluster. Every tested individual in the row carries the
/// row's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub cluster_id: String,
    pub stratum: String,
    pub area: String,
    pub urban: bool,
    pub n_tested: u64,
    pub y_positive: u64,
    pub pi1: f64,
    pub pi2: f64,
    pub design_weight: f64,
    pub adjusted_weight: f64,
    pub location: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurveySample {
    pub rows: Vec<SampleRow>,
}

impl SurveySample {
    pub fn new(rows: Vec<SampleRow>) -> Result<Self> {
        for r in &rows {
            if r.y_positive > r.n_tested {
                return Err(Error::invalid("sample", format!("cluster `{}` has more positives than tested", r.cluster_id)));
            }
            let ok = |p: f64| p > 0.0 && p <= 1.0;
            if !ok(r.pi1) || !ok(r.pi2) {
                return Err(Error::invalid("sample", format!("cluster `{}` has inclusion probability outside (0, 1]", r.cluster_id)));
            }
            if !(r.adjusted_weight > 0.0 && r.adjusted_weight.is_finite()) {
                return Err(Error::invalid("sample", format!("cluster `{}` has a non-positive weight", r.cluster_id)));
            }
        }
        Ok(SurveySample { rows })
    }

    /// Area ids in order of first appearance.
    pub fn areas(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.area.as_str()))
            .map(|r| r.area.clone())
            .collect()
    }

    pub fn rows_in_area<'a>(&'a self, area: &'a str) -> impl Iterator<Item = &'a SampleRow> + 'a {
        self.rows.iter().filter(move |r| r.area == area)
    }
}

/// Stratified two-stage sample: PPS systematic selection of clusters by
/// household count within each stratum, then an SRS of households within
/// each selected cluster. A stratum whose take equals its cluster count is
/// enumerated completely with `pi1 = 1`.
pub fn draw_two_stage(pop: &FinitePopulation, design: &TwoStageDesign) -> Result<SurveySample> {
    let frame = pop.frame();
    let pph = pop.persons_per_household() as usize;
    if let Some(rates) = &design.nonresponse_rates {
        if let Some((cell, r)) = rates.iter().find(|(_, &r)| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::invalid("design", format!("response rate {r} for `{cell}` outside (0, 1]")));
        }
    }
    let mut select_rng = stream_rng(design.seed, 0);
    let mut household_rng = stream_rng(design.seed, 1);
    let mut response_rng = stream_rng(design.seed, 2);
    let mut order_rng = stream_rng(design.seed, 3);
    let mut rows = Vec::new();

    for (h, stratum) in frame.strata().iter().enumerate() {
        let mut members = frame.clusters_in_stratum(h).to_vec();
        if design.random_order {
            members.shuffle(&mut order_rng);
        }
        let n_h = design.clusters_for(&stratum.id);
        if n_h == 0 {
            continue;
        }
        if n_h > members.len() {
            return Err(Error::invalid(
                "design",
                format!("stratum `{}` has {} clusters, cannot take {n_h}", stratum.id, members.len()),
            ));
        }
        let sizes: Vec<u64> = members.iter().map(|&c| frame.clusters()[c].households as u64).collect();
        let total: u64 = sizes.iter().sum();
        if let Some(take) = design.households_per_cluster {
            let smallest = *sizes.iter().min().expect("stratum has clusters");
            if take == 0 || take as u64 > smallest {
                return Err(Error::invalid(
                    "design",
                    format!("household take {take} must lie in 1..={smallest} for stratum `{}`", stratum.id),
                ));
            }
        }
        let (picks, census) = if n_h == members.len() {
            ((0..members.len()).collect::<Vec<_>>(), true)
        } else {
            let t = total as f64 / n_h as f64;
            let r = match design.start {
                StartRule::Real => t * (1.0 - select_rng.random::<f64>()),
                StartRule::Integer => {
                    let top = t.floor() as u64;
                    if top == 0 {
                        return Err(Error::invalid("design", "integer start needs an interval of at least 1"));
                    }
                    select_rng.random_range(1..=top) as f64
                }
            };
            (pps_systematic(&sizes, n_h, r)?, false)
        };
        let rate = design
            .nonresponse_rates
            .as_ref()
            .and_then(|m| m.get(&stratum.id).copied())
            .unwrap_or(1.0);

        let first = rows.len();
        let mut selected_households = 0u64;
        let mut responding_households = 0u64;
        for k in picks {
            let c = members[k];
            let cluster = &frame.clusters()[c];
            let size = cluster.households as usize;
            let take = design.households_per_cluster.map_or(size, |t| t as usize);
            let pi1 = if census { 1.0 } else { (n_h as u64 * size as u64) as f64 / total as f64 };
            let pi2 = take as f64 / size as f64;
            let chosen = index::sample(&mut household_rng, size, take);
            let outcomes = pop.outcomes(c);
            let mut n_tested = 0u64;
            let mut y_positive = 0u64;
            for hh in chosen.iter() {
                selected_households += 1;
                if rate < 1.0 && response_rng.random::<f64>() >= rate {
                    continue;
                }
                responding_households += 1;
                for person in &outcomes[hh * pph..(hh + 1) * pph] {
                    n_tested += 1;
                    y_positive += *person as u64;
                }
            }
            let design_weight = 1.0 / (pi1 * pi2);
            rows.push(SampleRow {
                cluster_id: cluster.id.clone(),
                stratum: stratum.id.clone(),
                area: stratum.area.clone(),
                urban: stratum.urban,
                n_tested,
                y_positive,
                pi1,
                pi2,
                design_weight,
                adjusted_weight: design_weight,
                location: cluster.location,
            });
        }
        if responding_households > 0 && responding_households < selected_households {
            let observed = responding_households as f64 / selected_households as f64;
            for row in &mut rows[first..] {
                row.adjusted_weight = row.design_weight / observed;
            }
        }
    }
    SurveySample::new(rows)
}

/// Non-response adjustment: `adjusted_weight = design_weight / rate(cell)`.
pub fn adjust_nonresponse(sample: &SurveySample, cells: &[String], rates: &BTreeMap<String, f64>) -> Result<SurveySample> {
    if cells.len() != sample.rows.len() {
        return Err(Error::invalid("nonresponse", "one cell id per sample row is required"));
    }
    let mut out = sample.clone();
    for (row, cell) in out.rows.iter_mut().zip(cells) {
        let rate = *rates
            .get(cell)
            .ok_or_else(|| Error::invalid("nonresponse", format!("no response rate for cell `{cell}`")))?;
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::invalid("nonresponse", format!("response rate {rate} for `{cell}` outside (0, 1]")));
        }
        row.adjusted_weight = row.design_weight / rate;
    }
    Ok(out)
}

/// Scales adjusted weights so that each group's weighted count of tested
/// individuals, `sum(w * n_tested)`, equals its known total.
pub fn poststratify(sample: &SurveySample, groups: &[String], totals: &BTreeMap<String, f64>) -> Result<SurveySample> {
    if groups.len() != sample.rows.len() {
        return Err(Error::invalid("poststratify", "one group id per sample row is required"));
    }
    let mut sums = BTreeMap::<&str, f64>::new();
    for (row, g) in sample.rows.iter().zip(groups) {
        if !totals.contains_key(g) {
            return Err(Error::invalid("poststratify", format!("no known total for group `{g}`")));
        }
        *sums.entry(g.as_str()).or_default() += row.adjusted_weight * row.n_tested as f64;
    }
    for (g, &total) in totals {
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::invalid("poststratify", format!("total for `{g}` must be positive")));
        }
        match sums.get(g.as_str()) {
            Some(&s) if s > 0.0 => {}
            _ => return Err(Error::invalid("poststratify", format!("group `{g}` is empty in the sample"))),
        }
    }
    let mut out = sample.clone();
    for (row, g) in out.rows.iter_mut().zip(groups) {
        row.adjusted_weight *= totals[g] / sums[g.as_str()];
    }
    Ok(out)
}

/// Coefficient of variation of the weights (divisor `n`) and the implied
/// design effect `1 + cv^2`.
pub fn weight_cv_deff(weights: &[f64]) -> Result<(f64, f64)> {
    if weights.len() < 2 {
        return Err(Error::invalid("weights", "at least two weights are required"));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::invalid("weights", "weights must be positive"));
    }
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
    let cv = var.sqrt() / mean;
    Ok((cv, 1.0 + cv * cv))
}

/// Adaptive closure of `initial`: any included cluster whose count exceeds
/// `threshold` brings in all its neighbours, repeated to a fixpoint.
/// Returns sorted indices.
pub fn adaptive_cluster_sample(counts: &[u64], neighbors: &[Vec<usize>], initial: &[usize], threshold: u64) -> Result<Vec<usize>> {
    let n = counts.len();
    if neighbors.len() != n {
        return Err(Error::invalid("adaptive sample", "one neighbour list per cluster is required"));
    }
    if neighbors.iter().flatten().chain(initial).any(|&i| i >= n) {
        return Err(Error::invalid("adaptive sample", "cluster index out of range"));
    }
    let mut included = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    for &i in initial {
        if !included[i] {
            included[i] = true;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        if counts[i] > threshold {
            for &j in &neighbors[i] {
                if !included[j] {
                    included[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Ok((0..n).filter(|&i| included[i]).collect())
}

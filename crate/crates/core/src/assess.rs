//! Model assessment: leave-one-area-out cross-validation against the
//! direct estimates, and posterior rank distributions.

use crate::arealevel::{fit_smoothed_direct, AreaPriors, SmoothedDirectSpec};
use crate::direct::AreaDirect;
use crate::error::{Error, Result};
use crate::math::{expit, mean, quantiles, sample_variance};
use crate::mcmc::{ChainConfig, PosteriorFit};
use crate::prelude::*;
use crate::rng::{derive_seed, stream_rng};
use crate::spatial::SpatialStructure;
use crate::unitlevel::{aggregate_strata, fit_betabinomial, BetaBinomialSpec, ClusterData, UnitPriors, UrbanFractions};
use rand::Rng;
use rand_distr::StandardNormal;

/// The model refitted for each held-out area.
pub enum CvModel<'a> {
    SmoothedDirect {
        covariates: Option<&'a [Vec<f64>]>,
        priors: AreaPriors,
    },
    BetaBinomial {
        data: &'a ClusterData,
        covariates: Option<&'a [Vec<f64>]>,
        urban: bool,
        fractions: &'a UrbanFractions,
        priors: UnitPriors,
    },
}

pub struct CvSpec<'a> {
    /// Direct estimates used as comparators, and as data for the
    /// smoothed direct model.
    pub estimates: &'a [AreaDirect],
    pub structure: &'a SpatialStructure,
    pub model: CvModel<'a>,
    /// Seeds of the refits are derived from `mcmc.seed` and the area's
    /// position in the graph.
    pub mcmc: ChainConfig,
    /// Coverage of the predictive intervals.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CvStatus {
    Ok,
    Excluded(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRecord {
    pub area: String,
    pub direct: Option<f64>,
    pub direct_se: Option<f64>,
    pub prediction: Option<CvPrediction>,
    pub status: CvStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvPrediction {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    /// `(pred - direct) / sqrt(V_direct + pred var)` with `pred` the
    /// posterior mean prevalence.
    pub discrepancy: f64,
    pub covered: bool,
}

impl CvRecord {
    fn empty(area: &str, status: CvStatus) -> Self {
        CvRecord {
            area: area.into(),
            direct: None,
            direct_se: None,
            prediction: None,
            status,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub records: Vec<CvRecord>,
}

impl CvReport {
    pub fn evaluated(&self) -> impl Iterator<Item = &CvPrediction> {
        self.records.iter().filter_map(|r| r.prediction.as_ref())
    }

    /// `(covered, evaluated)`.
    pub fn coverage_count(&self) -> (usize, usize) {
        self.evaluated().fold((0, 0), |(c, n), r| (c + usize::from(r.covered), n + 1))
    }

    pub fn mean_discrepancy(&self) -> f64 {
        let d: Vec<f64> = self.evaluated().map(|r| r.discrepancy).collect();
        if d.is_empty() {
            f64::NAN
        } else {
            mean(&d)
        }
    }
}

/// Refits the model once per area with a usable direct estimate, with that
/// area's data removed, and compares the predictive distribution of its
/// direct estimate (posterior prevalence plus logit-scale sampling noise)
/// with the held-out value. Failed refits are recorded, not returned.
pub fn loo_area_cv(spec: &CvSpec) -> Result<CvReport> {
    spec.mcmc.validate()?;
    if !(spec.coverage > 0.0 && spec.coverage < 1.0) {
        return Err(Error::invalid("cross-validation", "coverage must lie in (0, 1)"));
    }
    let usable = spec.estimates.iter().filter(|e| e.has_logit() && e.est.is_some() && e.var.is_some()).count();
    if usable < 3 {
        return Err(Error::invalid("cross-validation", format!("need at least 3 areas with direct estimates, found {usable}")));
    }
    for e in spec.estimates {
        if spec.structure.index_of(&e.area).is_none() {
            return Err(Error::UnknownArea(e.area.clone()));
        }
    }
    let run = |k: usize| -> CvRecord { held_out(spec, k) };
    #[cfg(feature = "parallel")]
    let records = {
        use rayon::prelude::*;
        (0..spec.estimates.len()).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let records = (0..spec.estimates.len()).map(run).collect();
    Ok(CvReport { records })
}

fn held_out(spec: &CvSpec, k: usize) -> CvRecord {
    let target = &spec.estimates[k];
    let (Some(est), Some(var), Some(logit_var)) = (target.est, target.var, target.logit_var) else {
        return CvRecord::empty(&target.area, CvStatus::Excluded(format!("no usable direct estimate ({})", target.status.as_str())));
    };
    if !target.has_logit() {
        return CvRecord::empty(&target.area, CvStatus::Excluded(format!("no usable direct estimate ({})", target.status.as_str())));
    }
    let index = spec.structure.index_of(&target.area).expect("checked") as u64;
    let seed = derive_seed(spec.mcmc.seed, index);
    let mcmc = ChainConfig { seed, ..spec.mcmc.clone() };
    let draws = match refit_prevalence(spec, k, mcmc) {
        Ok(d) => d,
        Err(e) => return CvRecord::empty(&target.area, CvStatus::Failed(format!("{e}"))),
    };
    let mut rng = stream_rng(seed, 3);
    let predictive: Vec<f64> = draws
        .iter()
        .map(|&p| {
            let z: f64 = rng.sample(StandardNormal);
            expit(crate::math::logit(p) + logit_var.sqrt() * z)
        })
        .collect();
    let tail = 0.5 * (1.0 - spec.coverage);
    let q = quantiles(&predictive, &[tail, 0.5, 1.0 - tail]);
    let discrepancy = (mean(&draws) - est) / (var + sample_variance(&draws)).sqrt();
    CvRecord {
        area: target.area.clone(),
        direct: Some(est),
        direct_se: Some(var.sqrt()),
        prediction: Some(CvPrediction { median: q[1], lower: q[0], upper: q[2], discrepancy, covered: q[0] <= est && est <= q[2] }),
        status: CvStatus::Ok,
    }
}

/// Posterior prevalence draws for the held-out area from a fit without it.
fn refit_prevalence(spec: &CvSpec, k: usize, mcmc: ChainConfig) -> Result<Vec<f64>> {
    let area = &spec.estimates[k].area;
    let column = format!("p[{area}]");
    let fit = match &spec.model {
        CvModel::SmoothedDirect { covariates, priors } => {
            let kept: Vec<AreaDirect> = spec.estimates.iter().filter(|e| e.area != *area).cloned().collect();
            fit_smoothed_direct(&SmoothedDirectSpec {
                estimates: &kept,
                structure: spec.structure,
                covariates: *covariates,
                priors: priors.clone(),
                mcmc,
            })?
        }
        CvModel::BetaBinomial { data, covariates, urban, fractions, priors } => {
            let kept = data.without_area(area)?;
            let fit = fit_betabinomial(&BetaBinomialSpec {
                data: &kept,
                structure: spec.structure,
                covariates: *covariates,
                urban: *urban,
                priors: priors.clone(),
                mcmc,
            })?;
            aggregate_strata(&fit, spec.structure, *covariates, fractions)?
        }
    };
    fit.column(&column).ok_or_else(|| Error::invalid("posterior fit", format!("missing column `{column}`")))
}

/// Ranks of one draw, ascending (1 = smallest); ties go to the earlier
/// position.
pub fn rank_draw(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSummary {
    pub area: String,
    pub mean_rank: f64,
    pub median_rank: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Per-draw ranks of the `p[...]` columns (rank 1 = lowest prevalence),
/// one vector per draw over all chains.
pub fn rank_draws(fit: &PosteriorFit) -> (Vec<String>, Vec<Vec<usize>>) {
    let names = fit.names_with_prefix("p[");
    let cols: Vec<usize> = names.iter().map(|n| fit.index_of(n).expect("listed")).collect();
    let mut out = Vec::with_capacity(fit.n_chains() * fit.draws_per_chain());
    for c in 0..fit.n_chains() {
        for t in 0..fit.draws_per_chain() {
            let row = fit.row(c, t);
            let values: Vec<f64> = cols.iter().map(|&j| row[j]).collect();
            out.push(rank_draw(&values));
        }
    }
    let areas = names.iter().map(|n| n[2..n.len() - 1].to_owned()).collect();
    (areas, out)
}

/// Prevalence draws `p[area]` from the logit-normal approximation to each
/// usable direct estimate, as one chain. Areas without a logit estimate are
/// left out.
pub fn direct_draws(estimates: &[AreaDirect], n_draws: usize, seed: u64) -> Result<PosteriorFit> {
    let usable: Vec<&AreaDirect> = estimates.iter().filter(|e| e.has_logit()).collect();
    if usable.is_empty() || n_draws == 0 {
        return Err(Error::NoData);
    }
    let mut rng = stream_rng(seed, 0);
    let mut draws = Vec::with_capacity(n_draws * usable.len());
    for _ in 0..n_draws {
        for e in &usable {
            let z: f64 = rng.sample(StandardNormal);
            draws.push(expit(e.logit_est.expect("usable") + e.logit_var.expect("usable").sqrt() * z));
        }
    }
    let names = usable.iter().map(|e| format!("p[{}]", e.area)).collect();
    PosteriorFit::new(names, vec![draws], vec![Vec::new()])
}

/// Rank summaries with central intervals of the given coverage.
pub fn rank_distribution(fit: &PosteriorFit, coverage: f64) -> Vec<RankSummary> {
    let (areas, draws) = rank_draws(fit);
    let tail = 0.5 * (1.0 - coverage);
    areas
        .into_iter()
        .enumerate()
        .map(|(i, area)| {
            let r: Vec<f64> = draws.iter().map(|d| d[i] as f64).collect();
            let q = quantiles(&r, &[tail, 0.5, 1.0 - tail]);
            RankSummary { area, mean_rank: mean(&r), median_rank: q[1], lower: q[0], upper: q[2] }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::direct::DirectStatus;
    use crate::math::logit;
    use crate::spatial::Lattice;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn degenerate_posterior_gives_point_ranks() {
        let names = vec!["p[a]".to_string(), "p[b]".into(), "p[c]".into()];
        let fit = PosteriorFit::new(names, vec![[0.3, 0.1, 0.2].repeat(20)], vec![vec![]]).unwrap();
        let r = rank_distribution(&fit, 0.9);
        let got: Vec<(f64, f64, f64)> = r.iter().map(|s| (s.lower, s.median_rank, s.upper)).collect();
        assert_eq!(got, vec![(3.0, 3.0, 3.0), (1.0, 1.0, 1.0), (2.0, 2.0, 2.0)]);
    }

    #[test]
    fn direct_draws_follow_logit_normal() {
        let rec = |area: &str, p: f64, lv: Option<f64>| AreaDirect {
            area: area.into(),
            est: Some(p),
            var: Some(0.001),
            n: 100,
            clusters: 5,
            logit_est: lv.map(|_| logit(p)),
            logit_var: lv,
            status: if lv.is_some() { DirectStatus::Ok } else { DirectStatus::Boundary },
        };
        let fit = direct_draws(&[rec("a", 0.1, Some(0.04)), rec("b", 0.0, None), rec("c", 0.3, Some(0.09))], 20000, 5).unwrap();
        assert_eq!(fit.names(), ["p[a]", "p[c]"]);
        let z: Vec<f64> = fit.column("p[c]").unwrap().into_iter().map(logit).collect();
        assert!((mean(&z) - logit(0.3)).abs() < 0.01);
        assert!((sample_variance(&z) - 0.09).abs() < 0.004);
        assert_eq!(direct_draws(&[rec("b", 0.0, None)], 10, 1).unwrap_err(), Error::NoData);
    }

    #[test]
    fn ties_follow_area_order() {
        assert_eq!(rank_draw(&[0.2, 0.1, 0.2, 0.1]), vec![3, 1, 4, 2]);
    }

    #[test]
    fn exchangeable_areas_have_symmetric_ranks() {
        let mut rng = stream_rng(8, 0);
        let mut draws = Vec::new();
        for _ in 0..10_000 {
            let shared: f64 = rng.sample(StandardNormal);
            for _ in 0..3 {
                let e: f64 = rng.sample(StandardNormal);
                draws.push(shared + e);
            }
        }
        let names = vec!["p[a]".to_string(), "p[b]".into(), "p[c]".into()];
        let fit = PosteriorFit::new(names, vec![draws], vec![vec![]]).unwrap();
        let (_, ranks) = rank_draws(&fit);
        // Kolmogorov-Smirnov distance between the rank distributions of a and b.
        let cdf = |i: usize, k: usize| ranks.iter().filter(|r| r[i] <= k).count() as f64 / ranks.len() as f64;
        let ks = (1..=3).map(|k| (cdf(0, k) - cdf(1, k)).abs()).fold(0.0, f64::max);
        assert!(ks < 0.05, "{ks}");
    }

    proptest! {
        #[test]
        fn ranks_are_a_permutation(values in proptest::collection::vec(-3.0f64..3.0, 1..30)) {
            let mut r = rank_draw(&values);
            r.sort_unstable();
            prop_assert_eq!(r, (1..=values.len()).collect::<Vec<_>>());
        }
    }

    fn estimate(area: &str, p: Option<f64>, var: f64) -> AreaDirect {
        let logit_var = p.map(|p| var / (p * (1.0 - p)).powi(2));
        AreaDirect {
            area: area.into(),
            est: p,
            var: p.map(|_| var),
            n: 200,
            clusters: 8,
            logit_est: p.map(logit),
            logit_var,
            status: if p.is_some() { DirectStatus::Ok } else { DirectStatus::Boundary },
        }
    }

    #[test]
    fn boundary_area_is_excluded_and_report_is_reproducible() {
        let lattice = Lattice::new(2, 3);
        let s = lattice.structure().unwrap();
        let ps = [Some(0.1), Some(0.12), None, Some(0.08), Some(0.11), Some(0.09)];
        let est: Vec<AreaDirect> = lattice.ids().iter().zip(ps).map(|(a, p)| estimate(a, p, 4e-4)).collect();
        let spec = CvSpec {
            estimates: &est,
            structure: &s,
            model: CvModel::SmoothedDirect { covariates: None, priors: AreaPriors::default() },
            mcmc: ChainConfig { n_iter: 1500, burn_in: 500, thin: 2, n_chains: 2, seed: 5, ..Default::default() },
            coverage: 0.9,
        };
        let a = loo_area_cv(&spec).unwrap();
        assert!(matches!(a.records[2].status, CvStatus::Excluded(_)));
        assert_eq!(a.coverage_count().1, 5);
        for r in a.evaluated() {
            assert!(r.lower <= r.median && r.median <= r.upper);
        }
        assert_eq!(a, loo_area_cv(&spec).unwrap());
    }
}

//! Design-based direct estimation: weighted (Hájek) area means, delete-one
//! cluster jackknife variances and the logit transform.

use crate::error::{Error, Result};
use crate::math::logit;
use crate::prelude::*;
use crate::sampling::{SampleRow, SurveySample};

/// `sum(w y) / sum(w)`.
pub fn ht_estimate(y: &[f64], w: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::NoData);
    }
    if y.len() != w.len() {
        return Err(Error::invalid("estimate", "outcome and weight lengths differ"));
    }
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::invalid("estimate", "weights must sum to a positive value"));
    }
    Ok(y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw)
}

#[derive(Debug, Clone, Copy)]
struct PsuTotal<'a> {
    stratum: &'a str,
    wy: f64,
    wn: f64,
}

fn psu_totals<'a>(rows: &[&'a SampleRow]) -> Vec<PsuTotal<'a>> {
    let mut index = BTreeMap::<&str, usize>::new();
    let mut out: Vec<PsuTotal> = Vec::new();
    for r in rows {
        let k = *index.entry(r.cluster_id.as_str()).or_insert_with(|| {
            out.push(PsuTotal { stratum: r.stratum.as_str(), wy: 0.0, wn: 0.0 });
            out.len() - 1
        });
        out[k].wy += r.adjusted_weight * r.y_positive as f64;
        out[k].wn += r.adjusted_weight * r.n_tested as f64;
    }
    out
}

/// Delete-one-cluster jackknife variance of the area's weighted mean, with
/// clusters treated as with-replacement PSUs.
///
/// With a single stratum this is `((K-1)/K) sum_k (theta_(k) - theta_bar)^2`.
/// When the area spans several strata each having at least two clusters,
/// the stratified form is used: deleting a cluster rescales the remaining
/// clusters of its stratum by `K_h/(K_h-1)` and the squared deviations are
/// taken about stratum means with factor `(K_h-1)/K_h`. If some stratum
/// holds a single cluster the strata are pooled.
pub fn jackknife_variance(rows: &[&SampleRow]) -> Result<f64> {
    let psus: Vec<PsuTotal> = psu_totals(rows).into_iter().filter(|p| p.wn > 0.0).collect();
    let k = psus.len();
    if k < 2 {
        return Err(Error::VarianceNotEstimable(k));
    }
    let total_y: f64 = psus.iter().map(|p| p.wy).sum();
    let total_n: f64 = psus.iter().map(|p| p.wn).sum();

    let mut strata = BTreeMap::<&str, Vec<usize>>::new();
    for (i, p) in psus.iter().enumerate() {
        strata.entry(p.stratum).or_default().push(i);
    }
    let stratified = strata.len() > 1 && strata.values().all(|m| m.len() >= 2);
    let groups: Vec<Vec<usize>> = if stratified {
        strata.into_values().collect()
    } else {
        vec![(0..k).collect()]
    };

    let mut v = 0.0;
    for members in &groups {
        let kh = members.len() as f64;
        let (hy, hn) = members.iter().fold((0.0, 0.0), |(a, b), &i| (a + psus[i].wy, b + psus[i].wn));
        let scale = if stratified { kh / (kh - 1.0) } else { 1.0 };
        let thetas: Vec<f64> = members
            .iter()
            .map(|&i| {
                let y = total_y - hy + scale * (hy - psus[i].wy);
                let n = total_n - hn + scale * (hn - psus[i].wn);
                y / n
            })
            .collect();
        let bar = thetas.iter().sum::<f64>() / kh;
        v += (kh - 1.0) / kh * thetas.iter().map(|t| (t - bar) * (t - bar)).sum::<f64>();
    }
    Ok(v)
}

/// Delta-method logit transform: `Z = logit(est)`, `V = var / (est (1 - est))^2`.
pub fn logit_transform(est: f64, var: f64) -> Result<(f64, f64)> {
    if !(var >= 0.0 && var.is_finite()) {
        return Err(Error::invalid("logit transform", "variance must be finite and >= 0"));
    }
    if !(est > 0.0 && est < 1.0) {
        return Err(Error::Boundary(est));
    }
    let d = est * (1.0 - est);
    Ok((logit(est), var / (d * d)))
}

/// Proportion `y / n` and its binomial standard error.
pub fn binomial_proportion(y: u64, n: u64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::NoData);
    }
    if y > n {
        return Err(Error::invalid("proportion", "more positives than trials"));
    }
    let p = y as f64 / n as f64;
    Ok((p, (p * (1.0 - p) / n as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectStatus {
    Ok,
    /// No sampled individuals in the area.
    NoSample,
    /// Fewer than two clusters; the variance is missing.
    SingleCluster,
    /// Estimate at 0 or 1; the logit fields are missing.
    Boundary,
}

impl DirectStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DirectStatus::Ok => "ok",
            DirectStatus::NoSample => "no_sample",
            DirectStatus::SingleCluster => "single_cluster",
            DirectStatus::Boundary => "boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaDirect {
    pub area: String,
    pub est: Option<f64>,
    pub var: Option<f64>,
    pub n: u64,
    pub clusters: usize,
    pub logit_est: Option<f64>,
    pub logit_var: Option<f64>,
    pub status: DirectStatus,
}

impl AreaDirect {
    pub fn se(&self) -> Option<f64> {
        self.var.map(f64::sqrt)
    }

    /// Usable as an observation in the area-level likelihood.
    pub fn has_logit(&self) -> bool {
        matches!((self.logit_est, self.logit_var), (Some(_), Some(v)) if v > 0.0)
    }
}

/// Weighted estimate and jackknife variance for each of `areas`; areas that
/// are absent from the sample get a missing record.
pub fn direct_by_area(sample: &SurveySample, areas: &[String]) -> Vec<AreaDirect> {
    areas
        .iter()
        .map(|area| {
            let rows: Vec<&SampleRow> = sample.rows_in_area(area).collect();
            let n: u64 = rows.iter().map(|r| r.n_tested).sum();
            let clusters = rows.iter().filter(|r| r.n_tested > 0).map(|r| r.cluster_id.as_str()).collect::<BTreeSet<_>>().len();
            let mut rec = AreaDirect {
                area: area.clone(),
                est: None,
                var: None,
                n,
                clusters,
                logit_est: None,
                logit_var: None,
                status: DirectStatus::NoSample,
            };
            if n == 0 {
                return rec;
            }
            let wy: f64 = rows.iter().map(|r| r.adjusted_weight * r.y_positive as f64).sum();
            let wn: f64 = rows.iter().map(|r| r.adjusted_weight * r.n_tested as f64).sum();
            let est = wy / wn;
            rec.est = Some(est);
            rec.var = jackknife_variance(&rows).ok();
            rec.status = match rec.var {
                None => DirectStatus::SingleCluster,
                Some(v) => match logit_transform(est, v) {
                    Ok((z, lv)) => {
                        rec.logit_est = Some(z);
                        rec.logit_var = Some(lv);
                        DirectStatus::Ok
                    }
                    Err(_) => DirectStatus::Boundary,
                },
            };
            rec
        })
        .collect()
}

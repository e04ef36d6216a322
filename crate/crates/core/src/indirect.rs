//! Classical indirect estimators: pooled weighted regression, synthetic,
//! survey-regression and composite estimates.

use crate::error::{Error, Result};
use crate::prelude::*;
use nalgebra::{DMatrix, DVector};

/// `B = [sum d x x']^{-1} sum d x y` over the pooled sample of all areas.
/// `x` holds one covariate row per unit.
pub fn pooled_weighted_slope(x: &[Vec<f64>], y: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::NoData);
    }
    if x.len() != y.len() || x.len() != d.len() {
        return Err(Error::invalid("regression", "x, y and weight lengths differ"));
    }
    let p = x[0].len();
    if p == 0 || x.iter().any(|r| r.len() != p) {
        return Err(Error::invalid("regression", "covariate rows must share a positive dimension"));
    }
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for ((row, &yk), &dk) in x.iter().zip(y).zip(d) {
        for a in 0..p {
            xty[a] += dk * row[a] * yk;
            for b in 0..p {
                xtx[(a, b)] += dk * row[a] * row[b];
            }
        }
    }
    let eig = xtx.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond < 1e12) {
        return Err(Error::Singular(cond));
    }
    let chol = xtx.cholesky().ok_or(Error::Singular(cond))?;
    Ok(chol.solve(&xty).iter().copied().collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// A linear-predictor estimate that is not truncated to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearEstimate {
    pub value: f64,
    pub outside_unit_interval: bool,
}

impl LinearEstimate {
    fn new(value: f64) -> Self {
        LinearEstimate { value, outside_unit_interval: !(0.0..=1.0).contains(&value) }
    }
}

/// `xbar' B` for one area's population covariate means.
pub fn synthetic_estimate(xbar: &[f64], b: &[f64]) -> Result<LinearEstimate> {
    if xbar.len() != b.len() {
        return Err(Error::invalid("synthetic estimate", "covariate and coefficient dimensions differ"));
    }
    Ok(LinearEstimate::new(dot(xbar, b)))
}

/// Survey-regression estimate `m_HT + (xbar - xbar_HT)' B` from one area's
/// sampled units, where `xbar_HT` is the weighted sample covariate mean.
pub fn survey_regression_estimate(x: &[Vec<f64>], y: &[f64], d: &[f64], xbar: &[f64], b: &[f64]) -> Result<LinearEstimate> {
    if y.is_empty() {
        return Err(Error::NoData);
    }
    if x.len() != y.len() || d.len() != y.len() {
        return Err(Error::invalid("survey regression", "x, y and weight lengths differ"));
    }
    let p = b.len();
    if xbar.len() != p || x.iter().any(|r| r.len() != p) {
        return Err(Error::invalid("survey regression", "covariate and coefficient dimensions differ"));
    }
    let sw: f64 = d.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::invalid("survey regression", "weights must sum to a positive value"));
    }
    let m_ht = dot(y, d) / sw;
    let mut correction = 0.0;
    for j in 0..p {
        let xj_ht = x.iter().zip(d).map(|(r, w)| r[j] * w).sum::<f64>() / sw;
        correction += (xbar[j] - xj_ht) * b[j];
    }
    Ok(LinearEstimate::new(m_ht + correction))
}

/// `delta * sr + (1 - delta) * syn`.
pub fn composite_estimate(sr: f64, syn: f64, delta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::invalid("composite estimate", format!("delta {delta} outside [0, 1]")));
    }
    Ok(delta * sr + (1.0 - delta) * syn)
}

/// Heuristic composite weights `n_i / (n_i + nbar)` with `nbar` the mean
/// area sample size.
pub fn default_composite_weights(sizes: &[f64]) -> Vec<f64> {
    if sizes.is_empty() {
        return Vec::new();
    }
    let nbar = sizes.iter().sum::<f64>() / sizes.len() as f64;
    sizes
        .iter()
        .map(|&n| if n + nbar > 0.0 { n / (n + nbar) } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_design(seed: u64, n: usize, p: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let mut rng = stream_rng(seed, 0);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut r = vec![1.0];
                r.extend((1..p).map(|_| rng.random::<f64>() * 4.0 - 2.0));
                r
            })
            .collect();
        let y = (0..n).map(|_| f64::from(u8::from(rng.random::<f64>() < 0.3))).collect();
        let d = (0..n).map(|_| 1.0 + 9.0 * rng.random::<f64>()).collect();
        (x, y, d)
    }

    #[test]
    fn intercept_only_slope_is_pooled_mean() {
        let (x, y, d) = random_design(1, 50, 1);
        let b = pooled_weighted_slope(&x, &y, &d).unwrap();
        let m = crate::direct::ht_estimate(&y, &d).unwrap();
        assert!((b[0] - m).abs() < 1e-12);
    }

    #[test]
    fn exact_fit_recovers_coefficients() {
        let (x, _, d) = random_design(2, 40, 3);
        let beta = [0.2, -0.05, 0.1];
        let y: Vec<f64> = x.iter().map(|r| dot(r, &beta)).collect();
        let b = pooled_weighted_slope(&x, &y, &d).unwrap();
        for (a, e) in b.iter().zip(beta) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_gaussian_elimination() {
        let (x, y, d) = random_design(3, 80, 4);
        let b = pooled_weighted_slope(&x, &y, &d).unwrap();
        // Normal equations solved by partial-pivoting elimination.
        let p = 4;
        let mut a = vec![vec![0.0; p + 1]; p];
        for ((r, &yk), &dk) in x.iter().zip(&y).zip(&d) {
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += dk * r[i] * r[j];
                }
                a[i][p] += dk * r[i] * yk;
            }
        }
        for col in 0..p {
            let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for row in 0..p {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for k in col..=p {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        for i in 0..p {
            assert!((b[i] - a[i][p] / a[i][i]).abs() < 1e-8);
        }
    }

    #[test]
    fn singular_design_reports_condition() {
        let x = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]];
        assert!(matches!(pooled_weighted_slope(&x, &[0.0, 1.0, 0.0], &[1.0; 3]), Err(Error::Singular(_))));
    }

    #[test]
    fn synthetic_examples() {
        let b = [0.3];
        assert_eq!(synthetic_estimate(&[1.0], &b).unwrap().value, 0.3);
        let b = [0.1, 0.2];
        let e1 = synthetic_estimate(&[1.0, 0.5], &b).unwrap();
        let e2 = synthetic_estimate(&[1.0, 0.5], &b).unwrap();
        assert_eq!(e1, e2);
        assert!(synthetic_estimate(&[1.0, 10.0], &b).unwrap().outside_unit_interval);
    }

    #[test]
    fn synthetic_matches_unit_average() {
        let (x, _, _) = random_design(4, 30, 3);
        let b = [0.1, 0.03, -0.02];
        let xbar: Vec<f64> = (0..3).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / 30.0).collect();
        let per_unit = x.iter().map(|r| dot(r, &b)).sum::<f64>() / 30.0;
        assert!((synthetic_estimate(&xbar, &b).unwrap().value - per_unit).abs() < 1e-12);
    }

    #[test]
    fn survey_regression_reductions() {
        let (x, y, d) = random_design(5, 25, 2);
        let ht = crate::direct::ht_estimate(&y, &d).unwrap();
        let sw: f64 = d.iter().sum();
        let xbar_ht: Vec<f64> = (0..2).map(|j| x.iter().zip(&d).map(|(r, w)| r[j] * w).sum::<f64>() / sw).collect();
        let sr = survey_regression_estimate(&x, &y, &d, &xbar_ht, &[0.1, 0.4]).unwrap();
        assert!((sr.value - ht).abs() < 1e-12);
        let sr = survey_regression_estimate(&x, &y, &d, &[1.0, 3.0], &[0.0, 0.0]).unwrap();
        assert!((sr.value - ht).abs() < 1e-12);
        assert!(survey_regression_estimate(&[], &[], &[], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn survey_regression_dual_form() {
        let (x, y, d) = random_design(6, 60, 3);
        let b = pooled_weighted_slope(&x, &y, &d).unwrap();
        let xbar = [1.0, 0.3, -0.4];
        let second = survey_regression_estimate(&x, &y, &d, &xbar, &b).unwrap().value;
        let sw: f64 = d.iter().sum();
        let residual: f64 = x.iter().zip(&y).zip(&d).map(|((r, yk), dk)| dk / sw * (yk - dot(r, &b))).sum();
        let first = dot(&xbar, &b) + residual;
        assert!((first - second).abs() < 1e-10);
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_estimate(0.2, 0.1, 1.0).unwrap(), 0.2);
        assert_eq!(composite_estimate(0.2, 0.1, 0.0).unwrap(), 0.1);
        assert!((composite_estimate(0.2, 0.1, 0.5).unwrap() - 0.15).abs() < 1e-15);
        assert!(composite_estimate(0.2, 0.1, 1.5).is_err());
        let w = default_composite_weights(&[10.0, 30.0]);
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15 && (w[1] - 0.6).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn composite_is_convex(sr in -1.0f64..2.0, syn in -1.0f64..2.0, delta in 0.0f64..=1.0) {
            let c = composite_estimate(sr, syn, delta).unwrap();
            prop_assert!(c >= sr.min(syn) - 1e-12 && c <= sr.max(syn) + 1e-12);
        }
    }
}

//! Smoothed direct (Fay–Herriot type) model on logit-scale direct estimates:
//!
//! `Z_i ~ N(theta_i, V_i)`, `theta_i = x_i' beta + b_i`,
//!
//! with `V_i` fixed at its design-based value and `b` a BYM2 effect with
//! total SD `sigma_b` and spatial share `phi`. Given `(sigma_b, phi)` the
//! model is linear Gaussian, so the sampler targets the marginal posterior
//! of `(ln sigma_b, logit phi)` and `(beta, b)` are drawn exactly from
//! their conditional for every retained draw. Areas without a usable
//! estimate are predicted jointly through the BYM2 covariance.

use crate::direct::AreaDirect;
use crate::error::{Error, Result};
use crate::math::{expit, logit, summarize};
use crate::mcmc::{normal_vector, run_chains, ChainConfig, CompiledPhiPrior, LogPosterior, PhiPrior, PosteriorFit, SdPrior};
use crate::prelude::*;
use crate::rng::{derive_seed, stream_rng};
use crate::spatial::SpatialStructure;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct AreaPriors {
    pub sd: SdPrior,
    pub phi: PhiPrior,
    /// SD of the independent normal priors on the fixed effects.
    pub beta_sd: f64,
}

impl Default for AreaPriors {
    fn default() -> Self {
        AreaPriors { sd: SdPrior::default(), phi: PhiPrior::default(), beta_sd: 31.6 }
    }
}

pub struct SmoothedDirectSpec<'a> {
    /// Direct estimates matched to the graph by area id; areas missing
    /// here or lacking a logit estimate are predicted.
    pub estimates: &'a [AreaDirect],
    pub structure: &'a SpatialStructure,
    /// Covariate rows in the order of `structure.ids()`, without the
    /// intercept column, which is always included.
    pub covariates: Option<&'a [Vec<f64>]>,
    pub priors: AreaPriors,
    pub mcmc: ChainConfig,
}

/// Design matrix `[1, covariates]` in graph order, checked for full column rank.
pub(crate) fn design_matrix(m: usize, covariates: Option<&[Vec<f64>]>) -> Result<DMatrix<f64>> {
    let extra = covariates.map_or(0, |c| c.first().map_or(0, |r| r.len()));
    if let Some(c) = covariates {
        if c.len() != m || c.iter().any(|r| r.len() != extra) {
            return Err(Error::invalid("covariates", format!("need {m} rows of {extra} values in graph order")));
        }
        if c.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("covariates", "covariates must be finite"));
        }
    }
    let x = DMatrix::from_fn(m, 1 + extra, |i, j| if j == 0 { 1.0 } else { covariates.unwrap()[i][j - 1] });
    let eig = (x.transpose() * &x).symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(0.0f64, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-10 * max) {
        return Err(Error::Singular(if min > 0.0 { max / min } else { f64::INFINITY }));
    }
    Ok(x)
}

/// Marginal posterior of `(ln sigma_b, logit phi)`.
#[derive(Clone)]
struct MarginalTarget {
    z: DVector<f64>,
    obs_var: Vec<f64>,
    /// `beta_sd^2 X_o X_o'`.
    fixed_cov: DMatrix<f64>,
    /// Rows of the eigenvector matrix at observed areas.
    basis_obs: DMatrix<f64>,
    structure: SpatialStructure,
    sd_prior: SdPrior,
    phi_prior: CompiledPhiPrior,
}

impl MarginalTarget {
    fn marginal_cov(&self, sigma: f64, phi: f64) -> DMatrix<f64> {
        let spectrum = self.structure.bym2_spectrum(phi);
        let scaled = DMatrix::from_fn(self.basis_obs.nrows(), spectrum.len(), |i, k| self.basis_obs[(i, k)] * spectrum[k]);
        let mut s = &self.fixed_cov + (scaled * self.basis_obs.transpose()) * (sigma * sigma);
        for (i, v) in self.obs_var.iter().enumerate() {
            s[(i, i)] += v;
        }
        s
    }

    fn log_likelihood(&self, sigma: f64, phi: f64) -> f64 {
        let s = self.marginal_cov(sigma, phi);
        let Some(ch) = s.cholesky() else { return f64::NAN };
        let alpha = ch.solve(&self.z);
        let log_det: f64 = ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * self.z.dot(&alpha) - 0.5 * log_det
    }
}

impl LogPosterior for MarginalTarget {
    fn dim(&self) -> usize {
        2
    }

    fn log_posterior(&mut self, x: &[f64]) -> f64 {
        let (sigma, phi) = (x[0].exp(), expit(x[1]));
        if !(sigma > 0.0 && sigma.is_finite() && phi > 0.0 && phi < 1.0) {
            return f64::NEG_INFINITY;
        }
        self.log_likelihood(sigma, phi) + self.sd_prior.log_density_log(x[0]) + self.phi_prior.log_density_logit(x[1])
    }
}

/// Fits the smoothed direct model. Columns of the returned fit:
/// `beta[j]`, `sigma_b`, `phi`, `b[id]`, `theta[id]` and `p[id]`, areas in
/// graph order.
pub fn fit_smoothed_direct(spec: &SmoothedDirectSpec) -> Result<PosteriorFit> {
    spec.mcmc.validate()?;
    spec.priors.sd.validate()?;
    if !(spec.priors.beta_sd > 0.0 && spec.priors.beta_sd.is_finite()) {
        return Err(Error::invalid("priors", "beta_sd must be positive"));
    }
    let structure = spec.structure;
    let m = structure.len();
    let x = design_matrix(m, spec.covariates)?;
    let p = x.ncols();

    let mut obs: Vec<(usize, f64, f64)> = Vec::new();
    for e in spec.estimates {
        let i = structure.index_of(&e.area).ok_or_else(|| Error::UnknownArea(e.area.clone()))?;
        if let (Some(z), Some(v)) = (e.logit_est, e.logit_var) {
            if !(v.is_finite() && z.is_finite()) {
                return Err(Error::invalid("estimates", format!("non-finite logit estimate or variance for `{}`", e.area)));
            }
            if v > 0.0 {
                obs.push((i, z, v));
            }
        }
    }
    obs.sort_by_key(|o| o.0);
    if obs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid("estimates", "duplicate area in estimates"));
    }
    if obs.len() < 3 {
        return Err(Error::invalid("estimates", format!("need at least 3 areas with usable logit estimates, found {}", obs.len())));
    }

    let n_o = obs.len();
    let x_o = DMatrix::from_fn(n_o, p, |r, j| x[(obs[r].0, j)]);
    let beta_var = spec.priors.beta_sd * spec.priors.beta_sd;
    let basis = structure.eigenvectors();
    let target = MarginalTarget {
        z: DVector::from_iterator(n_o, obs.iter().map(|o| o.1)),
        obs_var: obs.iter().map(|o| o.2).collect(),
        fixed_cov: (&x_o * x_o.transpose()) * beta_var,
        basis_obs: DMatrix::from_fn(n_o, m, |r, k| basis[(obs[r].0, k)]),
        structure: structure.clone(),
        sd_prior: spec.priors.sd,
        phi_prior: spec.priors.phi.compile(structure)?,
    };

    let mut blocks = Vec::new();
    let sigma_fixed = match spec.priors.sd {
        SdPrior::Fixed(s) => Some(s),
        SdPrior::Pc { .. } => {
            blocks.push(vec![0]);
            None
        }
    };
    let phi_fixed = target.phi_prior.fixed();
    if phi_fixed.is_none() {
        blocks.push(vec![1]);
    }
    let inits: Vec<Vec<f64>> = (0..spec.mcmc.n_chains)
        .map(|c| {
            let spread = [0.4, 0.9, 0.2, 1.4][c % 4];
            let share = [0.3, 0.7, 0.5, 0.85][c % 4];
            vec![sigma_fixed.unwrap_or(spread).ln(), logit(phi_fixed.unwrap_or(share))]
        })
        .collect();

    let hyper = if blocks.is_empty() {
        // Nothing to sample: replicate the fixed values.
        let row = inits[0].clone();
        let n = spec.mcmc.retained();
        PosteriorFit::new(
            vec!["log_sigma".into(), "logit_phi".into()],
            (0..spec.mcmc.n_chains).map(|_| row.iter().copied().cycle().take(2 * n).collect()).collect(),
            vec![Vec::new(); spec.mcmc.n_chains],
        )?
    } else {
        run_chains(&target, &inits, &blocks, vec!["log_sigma".into(), "logit_phi".into()], &spec.mcmc)?
    };

    let mut names: Vec<String> = (0..p).map(|j| format!("beta[{j}]")).collect();
    names.push("sigma_b".into());
    names.push("phi".into());
    for prefix in ["b", "theta", "p"] {
        names.extend(structure.ids().iter().map(|id| format!("{prefix}[{id}]")));
    }

    let mut rngs: Vec<_> = (0..spec.mcmc.n_chains)
        .map(|c| stream_rng(derive_seed(spec.mcmc.seed, c as u64), 1))
        .collect();
    let obs_index: Vec<usize> = obs.iter().map(|o| o.0).collect();
    let mut failure = None;
    let fit = hyper.map(names, |c, row| {
        let (sigma, phi) = (row[0].exp(), expit(row[1]));
        match latent_draw(&target, &x, &x_o, &obs_index, beta_var, sigma, phi, &mut rngs[c]) {
            Ok((beta, b)) => {
                let theta: Vec<f64> = (0..m).map(|i| (0..p).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + b[i]).collect();
                let mut out = beta;
                out.push(sigma);
                out.push(phi);
                out.extend_from_slice(&b);
                out.extend_from_slice(&theta);
                out.extend(theta.iter().map(|&t| expit(t)));
                out
            }
            Err(e) => {
                failure.get_or_insert(e);
                vec![f64::NAN; p + 2 + 3 * m]
            }
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(fit),
    }
}

/// Exact draw of `(beta, b)` given `(sigma, phi)` and the data, by
/// perturbing a prior draw with the conditional-mean correction.
#[allow(clippy::too_many_arguments)]
fn latent_draw<R: Rng>(
    t: &MarginalTarget,
    x: &DMatrix<f64>,
    x_o: &DMatrix<f64>,
    obs: &[usize],
    beta_var: f64,
    sigma: f64,
    phi: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = x.nrows();
    let p = x.ncols();
    let basis = t.structure.eigenvectors();
    let spectrum = t.structure.bym2_spectrum(phi);
    let beta0 = normal_vector(rng, p) * beta_var.sqrt();
    let eps = normal_vector(rng, m).component_mul(&DVector::from_iterator(m, spectrum.iter().map(|c| c.sqrt())));
    let b0 = (basis * eps) * sigma;
    let mut resid = t.z.clone() - x_o * &beta0;
    for (r, &i) in obs.iter().enumerate() {
        let noise: f64 = rng.sample(StandardNormal);
        resid[r] -= b0[i] + t.obs_var[r].sqrt() * noise;
    }
    let s = t.marginal_cov(sigma, phi);
    let ch = s.cholesky().ok_or_else(|| Error::Cholesky("marginal covariance of the smoothed direct model".into()))?;
    let alpha = ch.solve(&resid);
    let beta = beta0 + (x_o.transpose() * &alpha) * beta_var;
    // C[:, obs] alpha with C = V diag(spectrum) V'.
    let proj = t.basis_obs.transpose() * &alpha;
    let weighted = DVector::from_fn(m, |k, _| spectrum[k] * proj[k]);
    let b = b0 + (basis * weighted) * (sigma * sigma);
    Ok((beta.iter().copied().collect(), b.iter().copied().collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaSummary {
    pub area: String,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Posterior summaries of area prevalence with a central interval of the
/// given coverage. Uses `p[id]` columns, or `expit(theta[id])` when the fit
/// has no prevalence columns.
pub fn posterior_prevalence(fit: &PosteriorFit, coverage: f64) -> Vec<AreaSummary> {
    let (prefix, transform) = if fit.names().iter().any(|n| n.starts_with("p[")) {
        ("p[", false)
    } else {
        ("theta[", true)
    };
    fit.names_with_prefix(prefix)
        .into_iter()
        .map(|name| {
            let mut draws = fit.column(&name).expect("column exists");
            if transform {
                draws.iter_mut().for_each(|t| *t = expit(*t));
            }
            let s = summarize(&draws, coverage);
            AreaSummary {
                area: name[prefix.len()..name.len() - 1].to_owned(),
                mean: s.mean,
                median: s.median,
                sd: s.sd,
                lower: s.lower,
                upper: s.upper,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::direct::DirectStatus;
    use crate::math::{mean, sample_variance};
    use crate::spatial::Lattice;

    fn record(area: &str, z: Option<f64>, v: f64) -> AreaDirect {
        AreaDirect {
            area: area.into(),
            est: z.map(expit),
            var: Some(v),
            n: 100,
            clusters: 5,
            logit_est: z,
            logit_var: z.map(|_| v),
            status: if z.is_some() { DirectStatus::Ok } else { DirectStatus::Boundary },
        }
    }

    fn cfg(seed: u64) -> ChainConfig {
        ChainConfig { n_iter: 3000, burn_in: 1000, thin: 2, n_chains: 2, seed, ..Default::default() }
    }

    #[test]
    fn posterior_prevalence_degenerate_draws() {
        let fit = PosteriorFit::new(vec!["theta[A]".into()], vec![vec![0.0; 10], vec![0.0; 10]], vec![vec![], vec![]]).unwrap();
        let s = &posterior_prevalence(&fit, 0.9)[0];
        assert_eq!((s.area.as_str(), s.median, s.sd), ("A", 0.5, 0.0));
    }

    #[test]
    fn tiny_sigma_collapses_to_gls() {
        let lattice = Lattice::new(2, 3);
        let s = lattice.structure().unwrap();
        let zs = [-1.0, -0.6, -1.4, -0.9, -1.2, -0.7];
        let vs = [0.05, 0.1, 0.02, 0.2, 0.08, 0.04];
        let est: Vec<AreaDirect> = lattice.ids().iter().zip(zs).zip(vs).map(|((a, z), v)| record(a, Some(z), v)).collect();
        let spec = SmoothedDirectSpec {
            estimates: &est,
            structure: &s,
            covariates: None,
            priors: AreaPriors { sd: SdPrior::Fixed(1e-4), ..Default::default() },
            mcmc: cfg(1),
        };
        let fit = fit_smoothed_direct(&spec).unwrap();
        let gls = zs.iter().zip(vs).map(|(z, v)| z / v).sum::<f64>() / vs.iter().map(|v| 1.0 / v).sum::<f64>();
        for id in lattice.ids() {
            let t = mean(&fit.column(&format!("theta[{id}]")).unwrap());
            assert!((t - gls).abs() < 0.01, "{t} vs {gls}");
        }
    }

    #[test]
    fn known_hyperparameters_give_gaussian_posterior() {
        // With sigma and phi fixed, theta | Z is Gaussian; compare with a
        // dense solve of the joint precision.
        let lattice = Lattice::new(2, 2);
        let s = lattice.structure().unwrap();
        let zs = [-1.0, 0.2, -0.4, 0.5];
        let vs = [0.3, 0.1, 0.5, 0.2];
        let mut est: Vec<AreaDirect> = lattice.ids().iter().zip(zs).zip(vs).map(|((a, z), v)| record(a, Some(z), v)).collect();
        est[3] = record(&est[3].area.clone(), None, 0.0);
        let (sigma, phi, beta_sd) = (0.7, 0.6, 2.0);
        let spec = SmoothedDirectSpec {
            estimates: &est,
            structure: &s,
            covariates: None,
            priors: AreaPriors { sd: SdPrior::Fixed(sigma), phi: PhiPrior::Fixed(phi), beta_sd },
            mcmc: ChainConfig { n_iter: 40_000, burn_in: 1, thin: 1, n_chains: 1, seed: 3, ..Default::default() },
        };
        let fit = fit_smoothed_direct(&spec).unwrap();
        // Prior covariance of theta = beta_sd^2 11' + sigma^2 C.
        let m = 4;
        let v = s.eigenvectors();
        let spec_c = s.bym2_spectrum(phi);
        let c = DMatrix::from_fn(m, m, |i, j| (0..m).map(|k| v[(i, k)] * spec_c[k] * v[(j, k)]).sum::<f64>());
        let prior = DMatrix::from_element(m, m, beta_sd * beta_sd) + c * (sigma * sigma);
        let obs = [0usize, 1, 2];
        let s_oo = DMatrix::from_fn(3, 3, |a, b| prior[(obs[a], obs[b])] + if a == b { vs[a] } else { 0.0 });
        let s_inv = s_oo.try_inverse().unwrap();
        let k = DMatrix::from_fn(m, 3, |i, b| prior[(i, obs[b])]);
        let zo = DVector::from_vec(vec![zs[0], zs[1], zs[2]]);
        let post_mean = &k * &s_inv * zo;
        let post_cov = &prior - &k * &s_inv * k.transpose();
        for (i, id) in lattice.ids().iter().enumerate() {
            let d = fit.column(&format!("theta[{id}]")).unwrap();
            let se = (post_cov[(i, i)] / d.len() as f64).sqrt();
            assert!((mean(&d) - post_mean[i]).abs() < 5.0 * se, "{i}");
            assert!((sample_variance(&d) / post_cov[(i, i)] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn boundary_areas_are_predicted() {
        let lattice = Lattice::new(2, 3);
        let s = lattice.structure().unwrap();
        let mut est: Vec<AreaDirect> = lattice.ids().iter().map(|a| record(a, Some(-1.0), 0.05)).collect();
        est[2] = record("A03", None, 0.0);
        let spec = SmoothedDirectSpec { estimates: &est, structure: &s, covariates: None, priors: AreaPriors::default(), mcmc: cfg(2) };
        let fit = fit_smoothed_direct(&spec).unwrap();
        let summaries = posterior_prevalence(&fit, 0.9);
        assert_eq!(summaries.len(), 6);
        for sm in &summaries {
            assert!(sm.lower <= sm.median && sm.median <= sm.upper);
            assert!(sm.median.is_finite());
        }
        assert!(summaries[2].sd > summaries[0].sd);
    }

    #[test]
    fn input_errors() {
        let lattice = Lattice::new(2, 2);
        let s = lattice.structure().unwrap();
        let est: Vec<AreaDirect> = lattice.ids().iter().map(|a| record(a, None, 0.0)).collect();
        let spec = SmoothedDirectSpec { estimates: &est, structure: &s, covariates: None, priors: AreaPriors::default(), mcmc: cfg(1) };
        assert!(fit_smoothed_direct(&spec).is_err());
        let mut est: Vec<AreaDirect> = lattice.ids().iter().map(|a| record(a, Some(0.1), 0.1)).collect();
        est[0].logit_var = Some(f64::INFINITY);
        let spec = SmoothedDirectSpec { estimates: &est, ..spec };
        assert!(fit_smoothed_direct(&spec).is_err());
        let covs = vec![vec![1.0]; 4];
        assert!(matches!(design_matrix(4, Some(&covs)), Err(Error::Singular(_))));
    }
}

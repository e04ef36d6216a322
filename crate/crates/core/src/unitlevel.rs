//! Unit-level models for cluster counts.
//!
//! The beta-binomial model has
//! `Y_c ~ BetaBin(n_c, p_c, lambda)`, `logit p_c = x_i' beta + gamma z_c + b_i`
//! with `b` a BYM2 area effect and `z_c` the urban indicator; area
//! prevalence mixes the rural and urban strata by the urban fraction `q_i`.
//! The Gaussian-process model replaces `b_i` by a latent Matérn field plus
//! an iid nugget at each cluster location, and aggregates over a weighted
//! pixel grid with the nugget left out.

use crate::arealevel::design_matrix;
use crate::error::{Error, Result};
use crate::math::{expit, ln_choose, logit, softplus};
use crate::mcmc::{normal_vector, run_chains, ChainConfig, CompiledPhiPrior, LogPosterior, PhiPrior, PosteriorFit, SdPrior};
use crate::population::SamplingFrame;
use crate::prelude::*;
use crate::rng::{derive_seed, stream_rng};
use crate::sampling::SurveySample;
use crate::spatial::{matern_correlation, SpatialStructure};
use nalgebra::{DMatrix, DVector};

/// One sampled cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRow {
    pub cluster_id: String,
    pub area: String,
    pub urban: bool,
    pub n: u64,
    pub y: u64,
    pub location: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterData {
    rows: Vec<ClusterRow>,
}

impl ClusterData {
    pub fn new(rows: Vec<ClusterRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::NoData);
        }
        let mut ids = BTreeSet::new();
        for r in &rows {
            if r.y > r.n {
                return Err(Error::invalid("cluster data", format!("cluster `{}` has {} positives out of {}", r.cluster_id, r.y, r.n)));
            }
            if !ids.insert(r.cluster_id.as_str()) {
                return Err(Error::invalid("cluster data", format!("duplicate cluster `{}`", r.cluster_id)));
            }
        }
        Ok(ClusterData { rows })
    }

    pub fn from_sample(sample: &SurveySample) -> Result<Self> {
        ClusterData::new(
            sample
                .rows
                .iter()
                .map(|r| ClusterRow {
                    cluster_id: r.cluster_id.clone(),
                    area: r.area.clone(),
                    urban: r.urban,
                    n: r.n_tested,
                    y: r.y_positive,
                    location: r.location,
                })
                .collect(),
        )
    }

    pub fn rows(&self) -> &[ClusterRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The data with every cluster of `area` removed.
    pub fn without_area(&self, area: &str) -> Result<ClusterData> {
        ClusterData::new(self.rows.iter().filter(|r| r.area != area).cloned().collect())
    }

    fn pooled_logit(&self) -> f64 {
        let n: u64 = self.rows.iter().map(|r| r.n).sum();
        let y: u64 = self.rows.iter().map(|r| r.y).sum();
        logit(((y as f64 + 0.5) / (n as f64 + 1.0)).clamp(1e-4, 1.0 - 1e-4))
    }
}

/// Urban fraction `q_i` per area.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UrbanFractions(BTreeMap<String, f64>);

impl UrbanFractions {
    pub fn new<I: IntoIterator<Item = (String, f64)>>(items: I) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (area, q) in items {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::invalid("urban fractions", format!("q = {q} for `{area}` outside [0, 1]")));
            }
            if map.insert(area.clone(), q).is_some() {
                return Err(Error::invalid("urban fractions", format!("duplicate area `{area}`")));
            }
        }
        Ok(UrbanFractions(map))
    }

    /// Urban share of households per area.
    pub fn from_frame(frame: &SamplingFrame) -> Self {
        UrbanFractions(frame.urban_fractions().into_iter().collect())
    }

    pub fn get(&self, area: &str) -> Option<f64> {
        self.0.get(area).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(a, q)| (a.as_str(), *q))
    }
}

/// `ln prod_{j<k} (start + j step)`, accumulated in products with
/// occasional flushes to the log scale.
fn log_rising(start: f64, step: f64, k: u64) -> f64 {
    let mut acc = 0.0;
    let mut prod = 1.0;
    let mut term = start;
    for _ in 0..k {
        prod *= term;
        term += step;
        if !(1e-250..=1e250).contains(&prod) {
            acc += prod.ln();
            prod = 1.0;
        }
    }
    acc + prod.ln()
}

/// Beta-binomial log mass without the binomial coefficient; `q = 1 - p`.
fn bb_kernel(y: u64, n: u64, p: f64, q: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        let mut out = 0.0;
        if y > 0 {
            out += y as f64 * p.ln();
        }
        if n > y {
            out += (n - y) as f64 * q.ln();
        }
        return out;
    }
    let r = 1.0 - lambda;
    log_rising(p * r, lambda, y) + log_rising(q * r, lambda, n - y) - log_rising(r, lambda, n)
}

/// Beta-binomial log mass with mean `p` and intra-cluster correlation
/// `lambda`, i.e. shapes `p(1-lambda)/lambda` and `(1-p)(1-lambda)/lambda`,
/// so that `Var(Y) = n p (1-p) (1 + (n-1) lambda)`. `lambda = 0` is the binomial.
pub fn betabinomial_logpmf(y: u64, n: u64, p: f64, lambda: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("beta-binomial", format!("p = {p} outside (0, 1)")));
    }
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::invalid("beta-binomial", format!("lambda = {lambda} outside [0, 1)")));
    }
    if y > n {
        return Err(Error::invalid("beta-binomial", format!("y = {y} exceeds n = {n}")));
    }
    Ok(ln_choose(n, y) + bb_kernel(y, n, p, 1.0 - p, lambda))
}

/// Prior on the overdispersion `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OverdispersionPrior {
    /// Exponential on `sqrt(lambda)` with `Pr(sqrt(lambda) > u) = alpha`.
    Pc { u: f64, alpha: f64 },
    Uniform,
    /// Fixed value; 0 gives the binomial model.
    Fixed(f64),
}

impl Default for OverdispersionPrior {
    fn default() -> Self {
        OverdispersionPrior::Pc { u: 0.5, alpha: 0.01 }
    }
}

impl OverdispersionPrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OverdispersionPrior::Pc { u, alpha } if u > 0.0 && u < 1.0 && alpha > 0.0 && alpha < 1.0 => Ok(()),
            OverdispersionPrior::Pc { .. } => Err(Error::invalid("prior", "overdispersion prior needs u in (0, 1) and alpha in (0, 1)")),
            OverdispersionPrior::Uniform => Ok(()),
            OverdispersionPrior::Fixed(l) if (0.0..1.0).contains(&l) => Ok(()),
            OverdispersionPrior::Fixed(_) => Err(Error::invalid("prior", "fixed lambda must lie in [0, 1)")),
        }
    }

    /// Log density of `logit(lambda)` including the Jacobian.
    pub fn log_density_logit(&self, l: f64) -> f64 {
        match *self {
            OverdispersionPrior::Pc { u, alpha } => {
                let theta = -alpha.ln() / u;
                let lambda = expit(l);
                let s = lambda.sqrt();
                theta.ln() - theta * s + (s * expit(-l) / 2.0).ln()
            }
            OverdispersionPrior::Uniform => -softplus(l) - softplus(-l),
            OverdispersionPrior::Fixed(_) => 0.0,
        }
    }

    fn fixed(&self) -> Option<f64> {
        match *self {
            OverdispersionPrior::Fixed(l) => Some(l),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitPriors {
    pub sd: SdPrior,
    pub phi: PhiPrior,
    pub beta_sd: f64,
    pub overdispersion: OverdispersionPrior,
}

impl Default for UnitPriors {
    fn default() -> Self {
        UnitPriors { sd: SdPrior::default(), phi: PhiPrior::default(), beta_sd: 31.6, overdispersion: OverdispersionPrior::default() }
    }
}

pub struct BetaBinomialSpec<'a> {
    pub data: &'a ClusterData,
    pub structure: &'a SpatialStructure,
    /// Area covariate rows in graph order, without the intercept.
    pub covariates: Option<&'a [Vec<f64>]>,
    /// Include the urban stratum effect `gamma`.
    pub urban: bool,
    pub priors: UnitPriors,
    pub mcmc: ChainConfig,
}

#[derive(Debug, Clone, Copy)]
struct Obs {
    urban: bool,
    n: u64,
    y: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BbMove {
    Fixed,
    Sigma,
    Phi,
    Lambda,
    Area(usize),
}

/// Coordinates: fixed effects (with `gamma` last when present), `ln sigma`,
/// `logit phi`, `logit lambda`, then `b`.
#[derive(Clone)]
struct BbTarget {
    obs: Vec<Obs>,
    by_area: Vec<Vec<usize>>,
    x: DMatrix<f64>,
    n_fixed: usize,
    urban: bool,
    basis: DMatrix<f64>,
    structure: SpatialStructure,
    sd_prior: SdPrior,
    phi_prior: CompiledPhiPrior,
    od_prior: OverdispersionPrior,
    beta_var: f64,
    moves: Vec<BbMove>,
}

impl BbTarget {
    fn b_offset(&self) -> usize {
        self.n_fixed + 3
    }

    fn sigma(&self, x: &[f64]) -> f64 {
        match self.sd_prior {
            SdPrior::Fixed(s) => s,
            SdPrior::Pc { .. } => x[self.n_fixed].exp(),
        }
    }

    fn phi(&self, x: &[f64]) -> f64 {
        self.phi_prior.fixed().unwrap_or_else(|| expit(x[self.n_fixed + 1]))
    }

    fn lambda(&self, x: &[f64]) -> f64 {
        self.od_prior.fixed().unwrap_or_else(|| expit(x[self.n_fixed + 2]))
    }

    fn gamma(&self, x: &[f64]) -> f64 {
        if self.urban {
            x[self.n_fixed - 1]
        } else {
            0.0
        }
    }

    fn area_eta(&self, x: &[f64], i: usize) -> f64 {
        let p = self.x.ncols();
        (0..p).map(|j| self.x[(i, j)] * x[j]).sum::<f64>() + x[self.b_offset() + i]
    }

    fn loglik_area(&self, x: &[f64], i: usize, gamma: f64, lambda: f64) -> f64 {
        let eta = self.area_eta(x, i);
        self.by_area[i]
            .iter()
            .map(|&c| {
                let o = self.obs[c];
                let e = if o.urban { eta + gamma } else { eta };
                bb_kernel(o.y, o.n, expit(e), expit(-e), lambda)
            })
            .sum()
    }

    fn loglik(&self, x: &[f64]) -> f64 {
        let (gamma, lambda) = (self.gamma(x), self.lambda(x));
        (0..self.by_area.len()).map(|i| self.loglik_area(x, i, gamma, lambda)).sum()
    }

    fn beta_prior(&self, x: &[f64]) -> f64 {
        -0.5 * x[..self.n_fixed].iter().map(|b| b * b).sum::<f64>() / self.beta_var
    }

    fn b_prior(&self, x: &[f64]) -> f64 {
        let sigma = self.sigma(x);
        let spectrum = self.structure.bym2_spectrum(self.phi(x));
        let b = &x[self.b_offset()..];
        bym2_log_density(&self.basis, &spectrum, sigma, b)
    }
}

/// Log density of `b ~ N(0, sigma^2 V diag(c) V')` up to `2 pi` terms.
fn bym2_log_density(basis: &DMatrix<f64>, spectrum: &[f64], sigma: f64, b: &[f64]) -> f64 {
    let m = b.len();
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for (k, &c) in spectrum.iter().enumerate() {
        let col = basis.column(k);
        let proj: f64 = (0..m).map(|i| col[i] * b[i]).sum();
        quad += proj * proj / c;
        log_det += c.ln();
    }
    let out = -0.5 * quad / (sigma * sigma) - m as f64 * sigma.ln() - 0.5 * log_det;
    if out.is_nan() {
        f64::NEG_INFINITY
    } else {
        out
    }
}

impl LogPosterior for BbTarget {
    fn dim(&self) -> usize {
        self.b_offset() + self.by_area.len()
    }

    fn log_posterior(&mut self, x: &[f64]) -> f64 {
        let nf = self.n_fixed;
        self.loglik(x)
            + self.beta_prior(x)
            + self.b_prior(x)
            + self.sd_prior.log_density_log(x[nf])
            + self.phi_prior.log_density_logit(x[nf + 1])
            + self.od_prior.log_density_logit(x[nf + 2])
    }

    fn block_log_posterior(&mut self, x: &[f64], block: usize) -> f64 {
        let nf = self.n_fixed;
        match self.moves[block] {
            BbMove::Fixed => self.loglik(x) + self.beta_prior(x),
            BbMove::Sigma => self.b_prior(x) + self.sd_prior.log_density_log(x[nf]),
            BbMove::Phi => self.b_prior(x) + self.phi_prior.log_density_logit(x[nf + 1]),
            BbMove::Lambda => self.loglik(x) + self.od_prior.log_density_logit(x[nf + 2]),
            BbMove::Area(i) => self.loglik_area(x, i, self.gamma(x), self.lambda(x)) + self.b_prior(x),
        }
    }

    fn has_block_conditionals(&self) -> bool {
        true
    }
}

fn fixed_effect_names(p: usize, urban: bool) -> Vec<String> {
    let mut names: Vec<String> = (0..p).map(|j| format!("beta[{j}]")).collect();
    if urban {
        names.push("gamma".into());
    }
    names
}

fn urban_column_check(data: &ClusterData) -> Result<()> {
    let urban = data.rows().iter().filter(|r| r.urban).count();
    if urban == 0 || urban == data.len() {
        return Err(Error::invalid("cluster data", "the urban effect needs both urban and rural clusters"));
    }
    Ok(())
}

/// Fits the beta-binomial BYM2 model. Columns: `beta[j]` (intercept first),
/// `gamma` when the urban effect is included, `sigma_b`, `phi`, `lambda`
/// and `b[id]` in graph order.
pub fn fit_betabinomial(spec: &BetaBinomialSpec) -> Result<PosteriorFit> {
    spec.mcmc.validate()?;
    spec.priors.sd.validate()?;
    spec.priors.overdispersion.validate()?;
    if !(spec.priors.beta_sd > 0.0 && spec.priors.beta_sd.is_finite()) {
        return Err(Error::invalid("priors", "beta_sd must be positive"));
    }
    let structure = spec.structure;
    let m = structure.len();
    let x = design_matrix(m, spec.covariates)?;
    if spec.urban {
        urban_column_check(spec.data)?;
    }
    let mut by_area = vec![Vec::new(); m];
    let mut obs = Vec::with_capacity(spec.data.len());
    for r in spec.data.rows() {
        let i = structure.index_of(&r.area).ok_or_else(|| Error::UnknownArea(r.area.clone()))?;
        by_area[i].push(obs.len());
        obs.push(Obs { urban: r.urban, n: r.n, y: r.y });
    }
    let p = x.ncols();
    let n_fixed = p + usize::from(spec.urban);
    let phi_prior = spec.priors.phi.compile(structure)?;

    let mut blocks = vec![(0..n_fixed).collect::<Vec<_>>()];
    let mut moves = vec![BbMove::Fixed];
    if !matches!(spec.priors.sd, SdPrior::Fixed(_)) {
        blocks.push(vec![n_fixed]);
        moves.push(BbMove::Sigma);
    }
    if phi_prior.fixed().is_none() {
        blocks.push(vec![n_fixed + 1]);
        moves.push(BbMove::Phi);
    }
    if spec.priors.overdispersion.fixed().is_none() {
        blocks.push(vec![n_fixed + 2]);
        moves.push(BbMove::Lambda);
    }
    for i in 0..m {
        blocks.push(vec![n_fixed + 3 + i]);
        moves.push(BbMove::Area(i));
    }
    let target = BbTarget {
        obs,
        by_area,
        x,
        n_fixed,
        urban: spec.urban,
        basis: structure.eigenvectors().clone(),
        structure: structure.clone(),
        sd_prior: spec.priors.sd,
        phi_prior,
        od_prior: spec.priors.overdispersion,
        beta_var: spec.priors.beta_sd * spec.priors.beta_sd,
        moves,
    };

    let base = spec.data.pooled_logit();
    let inits: Vec<Vec<f64>> = (0..spec.mcmc.n_chains)
        .map(|c| {
            let mut v = vec![0.0; target.dim()];
            v[0] = base + [0.0, 0.2, -0.2, 0.1][c % 4];
            v[n_fixed] = [0.3f64, 0.6, 0.2, 1.0][c % 4].ln();
            v[n_fixed + 1] = logit([0.5, 0.3, 0.7, 0.5][c % 4]);
            v[n_fixed + 2] = logit([0.02, 0.05, 0.01, 0.1][c % 4]);
            v
        })
        .collect();
    let mut raw_names = fixed_effect_names(p, spec.urban);
    raw_names.extend(["log_sigma", "logit_phi", "logit_lambda"].map(String::from));
    raw_names.extend(structure.ids().iter().map(|id| format!("b[{id}]")));
    let raw = run_chains(&target, &inits, &blocks, raw_names, &spec.mcmc)?;

    let mut names = fixed_effect_names(p, spec.urban);
    names.extend(["sigma_b", "phi", "lambda"].map(String::from));
    names.extend(structure.ids().iter().map(|id| format!("b[{id}]")));
    raw.map(names, |_, row| {
        let mut out = row[..n_fixed].to_vec();
        out.push(target.sigma(row));
        out.push(target.phi(row));
        out.push(target.lambda(row));
        out.extend_from_slice(&row[n_fixed + 3..]);
        out
    })
}

/// `(1 - q) expit(eta) + q expit(eta + gamma)`.
pub fn strata_mixture(eta_rural: f64, gamma: f64, q: f64) -> f64 {
    (1.0 - q) * expit(eta_rural) + q * expit(eta_rural + gamma)
}

/// Area prevalence draws `p[id]` from a [`fit_betabinomial`] fit, mixing
/// the strata by the urban fractions. `covariates` must be those used for
/// the fit.
pub fn aggregate_strata(
    fit: &PosteriorFit,
    structure: &SpatialStructure,
    covariates: Option<&[Vec<f64>]>,
    q: &UrbanFractions,
) -> Result<PosteriorFit> {
    let m = structure.len();
    let x = design_matrix(m, covariates)?;
    let p = x.ncols();
    let missing = |name: String| Error::invalid("posterior fit", format!("missing column `{name}`"));
    let beta: Vec<usize> = (0..p)
        .map(|j| fit.index_of(&format!("beta[{j}]")).ok_or_else(|| missing(format!("beta[{j}]"))))
        .collect::<Result<_>>()?;
    if fit.index_of(&format!("beta[{p}]")).is_some() {
        return Err(Error::invalid("covariates", "fit has more fixed effects than the supplied covariates"));
    }
    let gamma = fit.index_of("gamma");
    let ids = structure.ids();
    let b: Vec<usize> = ids
        .iter()
        .map(|id| fit.index_of(&format!("b[{id}]")).ok_or_else(|| missing(format!("b[{id}]"))))
        .collect::<Result<_>>()?;
    let qs: Vec<f64> = ids
        .iter()
        .map(|id| q.get(id).ok_or_else(|| Error::invalid("urban fractions", format!("no urban fraction for `{id}`"))))
        .collect::<Result<_>>()?;
    let names = ids.iter().map(|id| format!("p[{id}]")).collect();
    fit.map(names, |_, row| {
        let g = gamma.map_or(0.0, |j| row[j]);
        (0..m)
            .map(|i| {
                let eta = (0..p).map(|j| x[(i, j)] * row[beta[j]]).sum::<f64>() + row[b[i]];
                strata_mixture(eta, g, qs[i])
            })
            .collect()
    })
}

/// Prior on the Matérn range: `Pr(rho < u) = alpha` with density
/// `k rho^-2 exp(-k / rho)` for two-dimensional fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangePrior {
    Pc { u: f64, alpha: f64 },
    Fixed(f64),
}

impl RangePrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RangePrior::Pc { u, alpha } if u > 0.0 && u.is_finite() && alpha > 0.0 && alpha < 1.0 => Ok(()),
            RangePrior::Fixed(r) if r > 0.0 && r.is_finite() => Ok(()),
            _ => Err(Error::invalid("prior", "range prior needs u > 0 and alpha in (0, 1), or a positive fixed range")),
        }
    }

    /// Log density of `ln(rho)` including the Jacobian.
    pub fn log_density_log(&self, log_rho: f64) -> f64 {
        match *self {
            RangePrior::Pc { u, alpha } => {
                let k = -alpha.ln() * u;
                k.ln() - log_rho - k * (-log_rho).exp()
            }
            RangePrior::Fixed(_) => 0.0,
        }
    }
}

/// Prior on the nugget standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NuggetPrior {
    Pc { u: f64, alpha: f64 },
    /// Fixed value; 0 removes the nugget.
    Fixed(f64),
}

impl NuggetPrior {
    fn as_sd_prior(&self) -> SdPrior {
        match *self {
            NuggetPrior::Pc { u, alpha } => SdPrior::Pc { u, alpha },
            NuggetPrior::Fixed(t) => SdPrior::Fixed(t),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NuggetPrior::Fixed(t) if t >= 0.0 && t.is_finite() => Ok(()),
            NuggetPrior::Fixed(_) => Err(Error::invalid("prior", "fixed nugget must be non-negative")),
            pc => pc.as_sd_prior().validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpPriors {
    pub sd: SdPrior,
    pub range: RangePrior,
    pub nugget: NuggetPrior,
    pub beta_sd: f64,
}

impl Default for GpPriors {
    fn default() -> Self {
        GpPriors {
            sd: SdPrior::default(),
            range: RangePrior::Pc { u: 0.5, alpha: 0.05 },
            nugget: NuggetPrior::Pc { u: 1.0, alpha: 0.01 },
            beta_sd: 31.6,
        }
    }
}

pub struct GpUnitSpec<'a> {
    /// Clusters; every row needs a location.
    pub data: &'a ClusterData,
    pub urban: bool,
    /// Matérn smoothness `nu`, held fixed.
    pub smoothness: f64,
    pub priors: GpPriors,
    /// Standard deviation added in quadrature to the nugget to keep the
    /// covariance well conditioned.
    pub nugget_floor: f64,
    pub mcmc: ChainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum GpMove {
    Fixed,
    Sigma,
    Range,
    Nugget,
    Site(usize),
}

#[derive(Clone)]
struct CovCache {
    key: [u64; 3],
    precision: DMatrix<f64>,
    log_det: f64,
}

/// Coordinates: fixed effects, `ln sigma`, `ln rho`, `ln tau`, then the
/// latent `U = S + eps` at each cluster.
#[derive(Clone)]
struct GpTarget {
    obs: Vec<(bool, u64, u64)>,
    dist: DMatrix<f64>,
    smoothness: f64,
    floor2: f64,
    n_fixed: usize,
    urban: bool,
    sd_prior: SdPrior,
    range_prior: RangePrior,
    nugget_prior: NuggetPrior,
    beta_var: f64,
    moves: Vec<GpMove>,
    cache: Vec<CovCache>,
}

/// `sigma^2 R(rho) + (tau^2 + floor^2) I` plus a tiny relative jitter.
fn gp_covariance(dist: &DMatrix<f64>, sigma: f64, range: f64, smoothness: f64, diag: f64) -> DMatrix<f64> {
    let s2 = sigma * sigma;
    let mut c = dist.map(|d| s2 * matern_correlation(d, range, smoothness));
    for i in 0..c.nrows() {
        c[(i, i)] += diag + 1e-10 * s2;
    }
    c
}

fn cholesky_error(n: usize) -> Error {
    Error::Cholesky(format!(
        "Gaussian-process covariance over {n} clusters is not positive definite; set a positive nugget floor"
    ))
}

impl GpTarget {
    fn hypers(&self, x: &[f64]) -> (f64, f64, f64) {
        let nf = self.n_fixed;
        let sigma = match self.sd_prior {
            SdPrior::Fixed(s) => s,
            SdPrior::Pc { .. } => x[nf].exp(),
        };
        let range = match self.range_prior {
            RangePrior::Fixed(r) => r,
            RangePrior::Pc { .. } => x[nf + 1].exp(),
        };
        let tau = match self.nugget_prior {
            NuggetPrior::Fixed(t) => t,
            NuggetPrior::Pc { .. } => x[nf + 2].exp(),
        };
        (sigma, range, tau)
    }

    /// Index into the cache of the precision for the given hyperparameters.
    fn precision(&mut self, sigma: f64, range: f64, tau: f64) -> Option<usize> {
        let key = [sigma.to_bits(), range.to_bits(), tau.to_bits()];
        if let Some(i) = self.cache.iter().position(|c| c.key == key) {
            return Some(i);
        }
        if !(sigma > 0.0 && range > 0.0 && sigma.is_finite() && range.is_finite() && tau.is_finite()) {
            return None;
        }
        let c = gp_covariance(&self.dist, sigma, range, self.smoothness, tau * tau + self.floor2);
        let ch = c.cholesky()?;
        let log_det = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let entry = CovCache { key, precision: ch.inverse(), log_det };
        if self.cache.len() >= 2 {
            self.cache.pop();
        }
        self.cache.insert(0, entry);
        Some(0)
    }

    fn site_eta(&self, x: &[f64], j: usize) -> f64 {
        let (urban, _, _) = self.obs[j];
        let mut e = x[0] + x[self.n_fixed + 3 + j];
        if self.urban && urban {
            e += x[self.n_fixed - 1];
        }
        e
    }

    fn site_loglik(&self, x: &[f64], j: usize) -> f64 {
        let (_, n, y) = self.obs[j];
        let e = self.site_eta(x, j);
        -(y as f64) * softplus(-e) - (n - y) as f64 * softplus(e)
    }

    fn loglik(&self, x: &[f64]) -> f64 {
        (0..self.obs.len()).map(|j| self.site_loglik(x, j)).sum()
    }

    fn field_prior(&mut self, x: &[f64]) -> f64 {
        let (s, r, t) = self.hypers(x);
        let Some(k) = self.precision(s, r, t) else { return f64::NAN };
        let u = &x[self.n_fixed + 3..];
        let q = &self.cache[k].precision;
        let n = u.len();
        let mut quad = 0.0;
        for j in 0..n {
            let col = q.column(j);
            quad += u[j] * (0..n).map(|i| col[i] * u[i]).sum::<f64>();
        }
        -0.5 * quad - 0.5 * self.cache[k].log_det
    }

    fn site_prior(&mut self, x: &[f64], j: usize) -> f64 {
        let (s, r, t) = self.hypers(x);
        let Some(k) = self.precision(s, r, t) else { return f64::NAN };
        let u = &x[self.n_fixed + 3..];
        let col = self.cache[k].precision.column(j);
        let cross: f64 = (0..u.len()).filter(|&i| i != j).map(|i| col[i] * u[i]).sum();
        -0.5 * col[j] * u[j] * u[j] - u[j] * cross
    }

    fn beta_prior(&self, x: &[f64]) -> f64 {
        -0.5 * x[..self.n_fixed].iter().map(|b| b * b).sum::<f64>() / self.beta_var
    }

    fn hyper_prior(&self, x: &[f64]) -> f64 {
        let nf = self.n_fixed;
        self.sd_prior.log_density_log(x[nf])
            + self.range_prior.log_density_log(x[nf + 1])
            + self.nugget_prior.as_sd_prior().log_density_log(x[nf + 2])
    }
}

impl LogPosterior for GpTarget {
    fn dim(&self) -> usize {
        self.n_fixed + 3 + self.obs.len()
    }

    fn log_posterior(&mut self, x: &[f64]) -> f64 {
        self.loglik(x) + self.beta_prior(x) + self.field_prior(x) + self.hyper_prior(x)
    }

    fn block_log_posterior(&mut self, x: &[f64], block: usize) -> f64 {
        let nf = self.n_fixed;
        match self.moves[block] {
            GpMove::Fixed => self.loglik(x) + self.beta_prior(x),
            GpMove::Sigma => self.field_prior(x) + self.sd_prior.log_density_log(x[nf]),
            GpMove::Range => self.field_prior(x) + self.range_prior.log_density_log(x[nf + 1]),
            GpMove::Nugget => self.field_prior(x) + self.nugget_prior.as_sd_prior().log_density_log(x[nf + 2]),
            GpMove::Site(j) => self.site_loglik(x, j) + self.site_prior(x, j),
        }
    }

    fn has_block_conditionals(&self) -> bool {
        true
    }
}

fn locations(data: &ClusterData) -> Result<Vec<(f64, f64)>> {
    let locs: Vec<(f64, f64)> = data
        .rows()
        .iter()
        .map(|r| {
            r.location
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .ok_or_else(|| Error::invalid("cluster data", format!("cluster `{}` has no location", r.cluster_id)))
        })
        .collect::<Result<_>>()?;
    let mut sorted: Vec<_> = locs.iter().map(|&(a, b)| (a.to_bits(), b.to_bits())).collect();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("cluster data", "cluster locations must be distinct"));
    }
    Ok(locs)
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    libm::hypot(a.0 - b.0, a.1 - b.1)
}

/// Fits the Gaussian-process cluster model with a binomial likelihood.
/// Columns: `beta[0]`, `gamma` when the urban effect is included,
/// `sigma_s`, `range`, `nugget` and `u[cluster_id]` (field plus nugget at
/// each cluster).
pub fn fit_gp_unit(spec: &GpUnitSpec) -> Result<PosteriorFit> {
    spec.mcmc.validate()?;
    spec.priors.sd.validate()?;
    spec.priors.range.validate()?;
    spec.priors.nugget.validate()?;
    if !(spec.smoothness > 0.0 && spec.smoothness.is_finite()) {
        return Err(Error::invalid("matern", "smoothness must be positive"));
    }
    if !(spec.nugget_floor >= 0.0 && spec.nugget_floor.is_finite()) {
        return Err(Error::invalid("gp", "nugget floor must be non-negative"));
    }
    if !(spec.priors.beta_sd > 0.0 && spec.priors.beta_sd.is_finite()) {
        return Err(Error::invalid("priors", "beta_sd must be positive"));
    }
    let data = spec.data;
    let locs = locations(data)?;
    if spec.urban {
        urban_column_check(data)?;
    }
    let n = locs.len();
    let dist = DMatrix::from_fn(n, n, |i, j| distance(locs[i], locs[j]));
    let n_fixed = 1 + usize::from(spec.urban);

    let mut blocks = vec![(0..n_fixed).collect::<Vec<_>>()];
    let mut moves = vec![GpMove::Fixed];
    if !matches!(spec.priors.sd, SdPrior::Fixed(_)) {
        blocks.push(vec![n_fixed]);
        moves.push(GpMove::Sigma);
    }
    if !matches!(spec.priors.range, RangePrior::Fixed(_)) {
        blocks.push(vec![n_fixed + 1]);
        moves.push(GpMove::Range);
    }
    if !matches!(spec.priors.nugget, NuggetPrior::Fixed(_)) {
        blocks.push(vec![n_fixed + 2]);
        moves.push(GpMove::Nugget);
    }
    for j in 0..n {
        blocks.push(vec![n_fixed + 3 + j]);
        moves.push(GpMove::Site(j));
    }
    let mut target = GpTarget {
        obs: data.rows().iter().map(|r| (r.urban, r.n, r.y)).collect(),
        dist,
        smoothness: spec.smoothness,
        floor2: spec.nugget_floor * spec.nugget_floor,
        n_fixed,
        urban: spec.urban,
        sd_prior: spec.priors.sd,
        range_prior: spec.priors.range,
        nugget_prior: spec.priors.nugget,
        beta_var: spec.priors.beta_sd * spec.priors.beta_sd,
        moves,
        cache: Vec::new(),
    };

    let mut max_d: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            max_d = max_d.max(target.dist[(i, j)]);
        }
    }
    let base = data.pooled_logit();
    let inits: Vec<Vec<f64>> = (0..spec.mcmc.n_chains)
        .map(|c| {
            let mut v = vec![0.0; target.dim()];
            v[0] = base + [0.0, 0.2, -0.2, 0.1][c % 4];
            v[n_fixed] = [0.5f64, 0.8, 0.3, 1.0][c % 4].ln();
            v[n_fixed + 1] = ([0.2, 0.1, 0.3, 0.05][c % 4] * max_d.max(1e-3)).ln();
            v[n_fixed + 2] = [0.3f64, 0.5, 0.2, 0.4][c % 4].ln();
            v
        })
        .collect();
    for init in &inits {
        let (s, r, t) = target.hypers(init);
        if target.precision(s, r, t).is_none() {
            return Err(cholesky_error(n));
        }
    }
    let mut raw_names = fixed_effect_names(1, spec.urban);
    raw_names.extend(["log_sigma", "log_range", "log_nugget"].map(String::from));
    raw_names.extend(data.rows().iter().map(|r| format!("u[{}]", r.cluster_id)));
    let raw = run_chains(&target, &inits, &blocks, raw_names, &spec.mcmc)?;

    let mut names = fixed_effect_names(1, spec.urban);
    names.extend(["sigma_s", "range", "nugget"].map(String::from));
    names.extend(data.rows().iter().map(|r| format!("u[{}]", r.cluster_id)));
    raw.map(names, |_, row| {
        let (s, r, t) = target.hypers(row);
        let mut out = row[..n_fixed].to_vec();
        out.extend([s, r, t]);
        out.extend_from_slice(&row[n_fixed + 3..]);
        out
    })
}

/// Population-weighted prediction points.
#[derive(Debug, Clone, PartialEq)]
pub struct Pixel {
    pub area: String,
    pub x: f64,
    pub y: f64,
    pub weight: f64,
    pub urban: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pixels: Vec<Pixel>,
    areas: Vec<String>,
    area_of: Vec<usize>,
    normalized: Vec<f64>,
}

impl PixelGrid {
    /// Validates the weights and normalizes them to sum to 1 within each area.
    pub fn new(pixels: Vec<Pixel>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::NoData);
        }
        let mut areas: Vec<String> = Vec::new();
        let mut area_of = Vec::with_capacity(pixels.len());
        for px in &pixels {
            if !(px.weight >= 0.0 && px.weight.is_finite() && px.x.is_finite() && px.y.is_finite()) {
                return Err(Error::invalid("pixel grid", format!("bad pixel in `{}`", px.area)));
            }
            let k = match areas.iter().position(|a| *a == px.area) {
                Some(k) => k,
                None => {
                    areas.push(px.area.clone());
                    areas.len() - 1
                }
            };
            area_of.push(k);
        }
        let mut totals = vec![0.0; areas.len()];
        for (px, &k) in pixels.iter().zip(&area_of) {
            totals[k] += px.weight;
        }
        if let Some(k) = totals.iter().position(|&t| !(t > 0.0)) {
            return Err(Error::invalid("pixel grid", format!("area `{}` has zero total weight", areas[k])));
        }
        let normalized = pixels.iter().zip(&area_of).map(|(px, &k)| px.weight / totals[k]).collect();
        Ok(PixelGrid { pixels, areas, area_of, normalized })
    }

    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    /// Areas in order of first appearance.
    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn normalized_weights(&self) -> &[f64] {
        &self.normalized
    }
}

/// `sum_l q(s_l) p(s_l)` per area, in [`PixelGrid::areas`] order.
pub fn aggregate_pixels(grid: &PixelGrid, risks: &[f64]) -> Result<Vec<f64>> {
    if risks.len() != grid.pixels.len() {
        return Err(Error::invalid("pixel grid", "one risk per pixel is required"));
    }
    let mut out = vec![0.0; grid.areas.len()];
    for ((&k, &w), &r) in grid.area_of.iter().zip(&grid.normalized).zip(risks) {
        out[k] += w * r;
    }
    Ok(out)
}

/// Options for conditional simulation from a GP fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Upper bound on the posterior draws used, spread evenly over chains.
    pub max_draws: usize,
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions { max_draws: 400, seed: 1 }
    }
}

/// Positions `(chain, draw)` of an even subsample of at most `max_draws`
/// draws per fit, grouped by chain.
fn subsample(fit: &PosteriorFit, max_draws: usize) -> Vec<Vec<usize>> {
    let per_chain = (max_draws / fit.n_chains()).max(1).min(fit.draws_per_chain());
    let n = fit.draws_per_chain();
    (0..fit.n_chains())
        .map(|_| (0..per_chain).map(|k| k * n / per_chain).collect())
        .collect()
}

/// Joint draws of the field `S` (nugget excluded) at `points`, one row per
/// selected posterior draw, grouped by chain.
pub fn predict_latent(fit: &PosteriorFit, spec: &GpUnitSpec, points: &[(f64, f64)], opts: &PredictOptions) -> Result<Vec<Vec<Vec<f64>>>> {
    let locs = locations(spec.data)?;
    let n = locs.len();
    let col = |name: &str| fit.index_of(name).ok_or_else(|| Error::invalid("posterior fit", format!("missing column `{name}`")));
    let (js, jr, jt) = (col("sigma_s")?, col("range")?, col("nugget")?);
    let ju: Vec<usize> = spec.data.rows().iter().map(|r| col(&format!("u[{}]", r.cluster_id))).collect::<Result<_>>()?;
    let dist = DMatrix::from_fn(n, n, |i, j| distance(locs[i], locs[j]));
    let cross = DMatrix::from_fn(points.len(), n, |a, j| distance(points[a], locs[j]));
    let pp = DMatrix::from_fn(points.len(), points.len(), |a, b| distance(points[a], points[b]));
    let floor2 = spec.nugget_floor * spec.nugget_floor;
    let mut out = Vec::with_capacity(fit.n_chains());
    for (c, picks) in subsample(fit, opts.max_draws).into_iter().enumerate() {
        let mut rng = stream_rng(derive_seed(opts.seed, c as u64), 2);
        let mut rows = Vec::with_capacity(picks.len());
        for t in picks {
            let row = fit.row(c, t);
            let (s, r, tau) = (row[js], row[jr], row[jt]);
            let cov = gp_covariance(&dist, s, r, spec.smoothness, tau * tau + floor2);
            let ch = cov.cholesky().ok_or_else(|| cholesky_error(n))?;
            let u = DVector::from_iterator(n, ju.iter().map(|&j| row[j]));
            let k = cross.map(|d| s * s * matern_correlation(d, r, spec.smoothness));
            // A = L^{-1} K', so mean = A' L^{-1} u and cov = K** - A'A.
            let a = ch.l_dirty().solve_lower_triangular(&k.transpose()).ok_or_else(|| cholesky_error(n))?;
            let lu = ch.l_dirty().solve_lower_triangular(&u).ok_or_else(|| cholesky_error(n))?;
            let mean = a.transpose() * lu;
            let mut cond = pp.map(|d| s * s * matern_correlation(d, r, spec.smoothness)) - a.transpose() * &a;
            let draw = conditional_draw(&mut cond, &mean, s, &mut rng)?;
            rows.push(draw);
        }
        out.push(rows);
    }
    Ok(out)
}

/// `mean + L z` for `cov = L L'`, adding jitter until the factorisation succeeds.
fn conditional_draw<R: rand::Rng>(cov: &mut DMatrix<f64>, mean: &DVector<f64>, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    let p = mean.len();
    let mut jitter = 1e-10 * sigma * sigma;
    for _ in 0..8 {
        let mut c = cov.clone();
        for i in 0..p {
            c[(i, i)] += jitter;
        }
        if let Some(ch) = c.cholesky() {
            let z = normal_vector(rng, p);
            return Ok((mean + ch.l_dirty().lower_triangle() * z).iter().copied().collect());
        }
        jitter *= 10.0;
    }
    Err(Error::Cholesky("conditional covariance at prediction points is not positive definite".into()))
}

/// Area prevalence draws `p[area]` from a GP fit: the expit of the linear
/// predictor at each pixel, nugget excluded, averaged with the pixel weights.
pub fn aggregate_continuous(fit: &PosteriorFit, spec: &GpUnitSpec, grid: &PixelGrid, opts: &PredictOptions) -> Result<PosteriorFit> {
    let points: Vec<(f64, f64)> = grid.pixels.iter().map(|p| (p.x, p.y)).collect();
    let fields = predict_latent(fit, spec, &points, opts)?;
    let b0 = fit.index_of("beta[0]").ok_or_else(|| Error::invalid("posterior fit", "missing column `beta[0]`"))?;
    let gamma = fit.index_of("gamma");
    let picks = subsample(fit, opts.max_draws);
    let mut chains = Vec::with_capacity(fields.len());
    for (c, rows) in fields.into_iter().enumerate() {
        let mut flat = Vec::with_capacity(rows.len() * grid.areas.len());
        for (field, &t) in rows.iter().zip(&picks[c]) {
            let row = fit.row(c, t);
            let risks: Vec<f64> = grid
                .pixels
                .iter()
                .zip(field)
                .map(|(px, s)| {
                    let g = if px.urban { gamma.map_or(0.0, |j| row[j]) } else { 0.0 };
                    expit(row[b0] + g + s)
                })
                .collect();
            flat.extend(aggregate_pixels(grid, &risks)?);
        }
        chains.push(flat);
    }
    let names = grid.areas.iter().map(|a| format!("p[{a}]")).collect();
    PosteriorFit::new(names, chains, fit.acceptance().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{ln_gamma, mean, sample_variance};
    use crate::spatial::Lattice;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Beta, Binomial, Distribution};

    fn binomial_logpmf(y: u64, n: u64, p: f64) -> f64 {
        ln_choose(n, y) + y as f64 * p.ln() + (n - y) as f64 * (1.0 - p).ln()
    }

    #[test]
    fn binomial_limit_and_single_trial() {
        for (y, n, p) in [(0, 10, 0.2), (3, 10, 0.2), (17, 40, 0.55), (40, 40, 0.9)] {
            let bb = betabinomial_logpmf(y, n, p, 1e-12).unwrap();
            assert!((bb - binomial_logpmf(y, n, p)).abs() < 1e-6);
            assert!((betabinomial_logpmf(y, n, p, 0.0).unwrap() - binomial_logpmf(y, n, p)).abs() < 1e-12);
        }
        for lambda in [0.0, 0.1, 0.7] {
            assert!((betabinomial_logpmf(1, 1, 0.3, lambda).unwrap() - 0.3f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_gamma_function_form() {
        for (y, n, p, l) in [(2u64, 9u64, 0.3, 0.2), (0, 5, 0.1, 0.5), (12, 30, 0.7, 0.05)] {
            let a = p * (1.0 - l) / l;
            let b = (1.0 - p) * (1.0 - l) / l;
            let lbeta = |a: f64, b: f64| ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
            let direct = ln_choose(n, y) + lbeta(y as f64 + a, (n - y) as f64 + b) - lbeta(a, b);
            assert!((betabinomial_logpmf(y, n, p, l).unwrap() - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(betabinomial_logpmf(1, 5, 0.0, 0.1).is_err());
        assert!(betabinomial_logpmf(1, 5, 0.5, 1.0).is_err());
        assert!(betabinomial_logpmf(6, 5, 0.5, 0.1).is_err());
    }

    #[test]
    fn pmf_normalizes_on_grid() {
        for n in [1u64, 5, 25, 100] {
            for p in [0.01, 0.1, 0.5, 0.93] {
                for l in [0.0, 1e-6, 0.05, 0.3, 0.9] {
                    let total: f64 = (0..=n).map(|y| betabinomial_logpmf(y, n, p, l).unwrap().exp()).sum();
                    assert!((total - 1.0).abs() < 1e-10, "n={n} p={p} l={l}: {total}");
                }
            }
        }
    }

    #[test]
    fn monte_carlo_variance() {
        let (n, p, l) = (25u64, 0.1, 0.1);
        let beta = Beta::new(p * (1.0 - l) / l, (1.0 - p) * (1.0 - l) / l).unwrap();
        let mut rng = stream_rng(11, 0);
        let draws: Vec<f64> = (0..1_000_000)
            .map(|_| Binomial::new(n, beta.sample(&mut rng)).unwrap().sample(&mut rng) as f64)
            .collect();
        let expected = n as f64 * p * (1.0 - p) * (1.0 + (n as f64 - 1.0) * l);
        assert!((sample_variance(&draws) / expected - 1.0).abs() < 0.02);
        assert!((mean(&draws) / (n as f64 * p) - 1.0).abs() < 0.01);
    }

    #[test]
    fn strata_mixture_examples() {
        let eta = logit(0.05);
        let p = strata_mixture(eta, 2f64.ln(), 0.5);
        assert!((p - 0.07262).abs() < 5e-6, "{p}");
        assert!((strata_mixture(eta, 1.0, 0.0) - 0.05).abs() < 1e-15);
        assert!((strata_mixture(eta, 1.0, 1.0) - expit(eta + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn aggregate_strata_from_hand_built_fit() {
        let lattice = Lattice::new(1, 3);
        let s = lattice.structure().unwrap();
        let names: Vec<String> = ["beta[0]", "gamma", "b[A01]", "b[A02]", "b[A03]"].map(String::from).to_vec();
        let row = [logit(0.05), 2f64.ln(), 0.0, 0.0, 0.0];
        let fit = PosteriorFit::new(names, vec![row.to_vec()], vec![vec![]]).unwrap();
        let q = UrbanFractions::new([("A01".into(), 0.5), ("A02".into(), 0.0), ("A03".into(), 1.0)]).unwrap();
        let agg = aggregate_strata(&fit, &s, None, &q).unwrap();
        let p = agg.row(0, 0);
        assert!((p[0] - 0.07262).abs() < 5e-6);
        assert!((p[1] - 0.05).abs() < 1e-12);
        assert!((p[2] - expit(logit(0.05) + 2f64.ln())).abs() < 1e-12);
        let partial = UrbanFractions::new([("A01".into(), 0.5)]).unwrap();
        assert!(aggregate_strata(&fit, &s, None, &partial).is_err());
    }

    fn pixel(area: &str, weight: f64) -> Pixel {
        Pixel { area: area.into(), x: 0.0, y: 0.0, weight, urban: false }
    }

    #[test]
    fn pixel_aggregation_examples() {
        let grid = PixelGrid::new(vec![pixel("A", 0.25), pixel("A", 0.75), pixel("B", 3.0)]).unwrap();
        let p = aggregate_pixels(&grid, &[0.1, 0.2, 0.4]).unwrap();
        assert!((p[0] - 0.175).abs() < 1e-15);
        assert_eq!(p[1], 0.4);
        let grid = PixelGrid::new((0..7).map(|_| pixel("A", 1.0)).collect()).unwrap();
        assert!((aggregate_pixels(&grid, &[0.3; 7]).unwrap()[0] - 0.3).abs() < 1e-15);
        assert!(PixelGrid::new(vec![pixel("A", 0.0), pixel("B", 1.0)]).is_err());
    }

    proptest! {
        #[test]
        fn pmf_sums_to_one(n in 0u64..60, p in 0.001f64..0.999, l in 0.0f64..0.95) {
            let total: f64 = (0..=n).map(|y| betabinomial_logpmf(y, n, p, l).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }

        #[test]
        fn mixture_is_convex(eta in -6.0f64..6.0, gamma in -3.0f64..3.0, q in 0.0f64..=1.0) {
            let p = strata_mixture(eta, gamma, q);
            let (a, b) = (expit(eta), expit(eta + gamma));
            prop_assert!(p >= a.min(b) - 1e-15 && p <= a.max(b) + 1e-15);
        }

        #[test]
        fn scaling_weights_is_invariant(ws in proptest::collection::vec(0.01f64..5.0, 1..12), seed in 0u64..100) {
            let mut rng = stream_rng(seed, 0);
            let risks: Vec<f64> = ws.iter().map(|_| rng.random::<f64>()).collect();
            let areas = ["A", "B"];
            let build = |k: f64| PixelGrid::new(ws.iter().enumerate().map(|(i, w)| pixel(areas[i % 2], k * w)).collect()).unwrap();
            let a = aggregate_pixels(&build(1.0), &risks).unwrap();
            let b = aggregate_pixels(&build(2.0), &risks).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn cfg(seed: u64) -> ChainConfig {
        ChainConfig { n_iter: 3000, burn_in: 1000, thin: 2, n_chains: 2, seed, ..Default::default() }
    }

    #[test]
    fn binomial_limit_recovers_pooled_rate() {
        let lattice = Lattice::new(1, 3);
        let s = lattice.structure().unwrap();
        let rows: Vec<ClusterRow> = (0..12)
            .map(|k| ClusterRow { cluster_id: format!("c{k}"), area: "A01".into(), urban: false, n: 20, y: [1, 3, 0, 2][k % 4], location: None })
            .collect();
        let data = ClusterData::new(rows).unwrap();
        let spec = BetaBinomialSpec {
            data: &data,
            structure: &s,
            covariates: None,
            urban: false,
            priors: UnitPriors { sd: SdPrior::Fixed(1e-3), overdispersion: OverdispersionPrior::Fixed(0.0), ..Default::default() },
            mcmc: cfg(4),
        };
        let fit = fit_betabinomial(&spec).unwrap();
        let p: Vec<f64> = fit.column("beta[0]").unwrap().iter().map(|&b| expit(b)).collect();
        let pooled = 18.0 / 240.0;
        assert!((crate::math::quantiles(&p, &[0.5])[0] - pooled).abs() < 0.01);
        assert!(fit.column("lambda").unwrap().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn unknown_area_and_constant_urban_are_errors() {
        let s = Lattice::new(1, 3).structure().unwrap();
        let row = |a: &str, u: bool| ClusterRow { cluster_id: format!("{a}{u}"), area: a.into(), urban: u, n: 5, y: 1, location: None };
        let data = ClusterData::new(vec![row("A01", false), row("ZZ", false)]).unwrap();
        let spec = BetaBinomialSpec { data: &data, structure: &s, covariates: None, urban: false, priors: UnitPriors::default(), mcmc: cfg(1) };
        assert!(matches!(fit_betabinomial(&spec), Err(Error::UnknownArea(_))));
        let data = ClusterData::new(vec![row("A01", false), row("A02", false)]).unwrap();
        let spec = BetaBinomialSpec { data: &data, urban: true, ..spec };
        assert!(fit_betabinomial(&spec).is_err());
        assert!(ClusterData::new(vec![ClusterRow { y: 6, ..row("A01", true) }]).is_err());
    }

    fn gp_data(n: usize, seed: u64) -> ClusterData {
        let mut rng = stream_rng(seed, 0);
        ClusterData::new(
            (0..n)
                .map(|k| ClusterRow {
                    cluster_id: format!("c{k}"),
                    area: "A".into(),
                    urban: k % 3 == 0,
                    n: 20,
                    y: rng.random_range(0..6),
                    location: Some((rng.random::<f64>(), rng.random::<f64>())),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn gp_prediction_interpolates_without_nugget() {
        let data = gp_data(25, 5);
        let spec = GpUnitSpec {
            data: &data,
            urban: false,
            smoothness: 1.5,
            priors: GpPriors { nugget: NuggetPrior::Fixed(0.0), ..Default::default() },
            nugget_floor: 0.0,
            mcmc: ChainConfig { n_iter: 400, burn_in: 200, thin: 2, n_chains: 1, seed: 2, ..Default::default() },
        };
        let fit = fit_gp_unit(&spec).unwrap();
        let at = data.rows()[3].location.unwrap();
        let opts = PredictOptions { max_draws: 20, seed: 9 };
        let pred = predict_latent(&fit, &spec, &[at], &opts).unwrap();
        let u = fit.chain_column(0, fit.index_of("u[c3]").unwrap());
        for (k, t) in subsample(&fit, 20)[0].iter().enumerate() {
            let sd = fit.row(0, *t)[fit.index_of("sigma_s").unwrap()];
            assert!((pred[0][k][0] - u[*t]).abs() < 1e-3 * sd.max(1.0), "{} vs {}", pred[0][k][0], u[*t]);
        }
    }

    #[test]
    fn gp_tiny_range_decouples_clusters() {
        let data = gp_data(30, 6);
        let spec = GpUnitSpec {
            data: &data,
            urban: false,
            smoothness: 0.5,
            priors: GpPriors { range: RangePrior::Fixed(1e-6), ..Default::default() },
            nugget_floor: 0.0,
            mcmc: ChainConfig { n_iter: 3000, burn_in: 1000, thin: 2, n_chains: 1, seed: 3, ..Default::default() },
        };
        let fit = fit_gp_unit(&spec).unwrap();
        // Nearest pair of clusters.
        let locs: Vec<_> = data.rows().iter().map(|r| r.location.unwrap()).collect();
        let (mut bi, mut bj, mut bd) = (0, 1, f64::INFINITY);
        for i in 0..locs.len() {
            for j in 0..i {
                let d = distance(locs[i], locs[j]);
                if d < bd {
                    (bi, bj, bd) = (i, j, d);
                }
            }
        }
        // Centre each draw across clusters so the intercept trade-off drops out.
        let cols: Vec<Vec<f64>> = (0..locs.len()).map(|k| fit.column(&format!("u[c{k}]")).unwrap()).collect();
        let centred = |k: usize| -> Vec<f64> {
            (0..cols[0].len()).map(|t| cols[k][t] - cols.iter().map(|c| c[t]).sum::<f64>() / cols.len() as f64).collect()
        };
        let (ui, uj) = (centred(bi), centred(bj));
        let (mi, mj) = (mean(&ui), mean(&uj));
        let cov: f64 = ui.iter().zip(&uj).map(|(a, b)| (a - mi) * (b - mj)).sum::<f64>() / (ui.len() as f64 - 1.0);
        let r = cov / (sample_variance(&ui) * sample_variance(&uj)).sqrt();
        assert!(r.abs() < 0.1, "{r}");
    }

    #[test]
    fn gp_rejects_duplicate_locations() {
        let mut data = gp_data(5, 1);
        data.rows[1].location = data.rows[0].location;
        let spec = GpUnitSpec { data: &data, urban: false, smoothness: 0.5, priors: GpPriors::default(), nugget_floor: 0.0, mcmc: cfg(1) };
        assert!(fit_gp_unit(&spec).is_err());
    }
}

//! Adaptive Metropolis-within-Gibbs sampling, convergence diagnostics and
//! penalised-complexity priors.
//!
//! Parameters are grouped into blocks. A block of one coordinate gets a
//! Gaussian random-walk proposal; larger blocks use a proposal whose shape
//! follows the empirical covariance of the burn-in draws. Step sizes are
//! tuned toward a target acceptance rate in windows during burn-in only and
//! are frozen afterwards. Coordinates outside every block stay at their
//! initial values.

use crate::error::{Error, Result};
use crate::math::{expit, quantile_sorted, sample_variance, softplus};
use crate::prelude::*;
use crate::rng::{derive_seed, stream_rng, StreamRng};
use crate::spatial::SpatialStructure;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// An unnormalised log posterior density.
pub trait LogPosterior {
    fn dim(&self) -> usize;

    fn log_posterior(&mut self, x: &[f64]) -> f64;

    /// Log density up to terms that do not involve the coordinates of
    /// `block`. Only consulted when [`LogPosterior::has_block_conditionals`]
    /// returns true.
    fn block_log_posterior(&mut self, x: &[f64], block: usize) -> f64 {
        let _ = block;
        self.log_posterior(x)
    }

    fn has_block_conditionals(&self) -> bool {
        false
    }
}

/// Wraps a closure as a [`LogPosterior`].
#[derive(Clone)]
pub struct FnTarget<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64> FnTarget<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnTarget { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64> LogPosterior for FnTarget<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_posterior(&mut self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub target_scalar: f64,
    pub target_block: f64,
    pub adapt_window: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_iter: 6000,
            burn_in: 2000,
            thin: 2,
            n_chains: 2,
            seed: 1,
            target_scalar: 0.44,
            target_block: 0.234,
            adapt_window: 50,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::invalid("chain config", "burn_in must be smaller than n_iter"));
        }
        if self.thin == 0 || self.n_chains == 0 || self.adapt_window == 0 {
            return Err(Error::invalid("chain config", "thin, n_chains and adapt_window must be >= 1"));
        }
        for t in [self.target_scalar, self.target_block] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::invalid("chain config", "target acceptance must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Draws kept per chain: `floor((n_iter - burn_in) / thin)`.
    pub fn retained(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

/// Proposal state of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub indices: Vec<usize>,
    pub log_scale: f64,
    target: f64,
    window_tried: usize,
    window_accepted: usize,
    windows: usize,
    pub tried: usize,
    pub accepted: usize,
    // Running moments of burn-in draws for multi-coordinate blocks.
    count: usize,
    mean: Vec<f64>,
    comoment: Vec<f64>,
    shape: Option<DMatrix<f64>>,
}

impl BlockState {
    fn new(indices: Vec<usize>, cfg: &ChainConfig) -> Self {
        let d = indices.len();
        let target = if d == 1 { cfg.target_scalar } else { cfg.target_block };
        BlockState {
            log_scale: if d == 1 { 0.5f64.ln() } else { (0.1f64).ln() },
            target,
            window_tried: 0,
            window_accepted: 0,
            windows: 0,
            tried: 0,
            accepted: 0,
            count: 0,
            mean: vec![0.0; if d > 1 { d } else { 0 }],
            comoment: vec![0.0; if d > 1 { d * d } else { 0 }],
            shape: None,
            indices,
        }
    }

    fn propose(&self, x: &[f64], out: &mut [f64], rng: &mut StreamRng) {
        let s = self.log_scale.exp();
        let d = self.indices.len();
        if d == 1 {
            let z: f64 = rng.sample(StandardNormal);
            out[self.indices[0]] = x[self.indices[0]] + s * z;
            return;
        }
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        match &self.shape {
            Some(l) => {
                for (a, &i) in self.indices.iter().enumerate() {
                    let step: f64 = (0..=a).map(|b| l[(a, b)] * z[b]).sum();
                    out[i] = x[i] + s * step;
                }
            }
            None => {
                for (a, &i) in self.indices.iter().enumerate() {
                    out[i] = x[i] + s * z[a];
                }
            }
        }
    }

    fn record_burn_in(&mut self, x: &[f64]) {
        let d = self.indices.len();
        if d == 1 {
            return;
        }
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = self.indices.iter().enumerate().map(|(a, &i)| x[i] - self.mean[a]).collect();
        for a in 0..d {
            self.mean[a] += delta[a] / n;
        }
        for a in 0..d {
            let da_new = x[self.indices[a]] - self.mean[a];
            for b in 0..d {
                self.comoment[a * d + b] += da_new * delta[b];
            }
        }
    }

    fn adapt(&mut self) {
        self.windows += 1;
        let rate = self.window_accepted as f64 / self.window_tried as f64;
        let gain = 3.0 / (self.windows as f64).sqrt();
        self.log_scale += gain * (rate - self.target);
        self.window_tried = 0;
        self.window_accepted = 0;
        let d = self.indices.len();
        if d > 1 && self.count >= 10 * d + 20 {
            let n = self.count as f64;
            let mut cov = DMatrix::from_fn(d, d, |a, b| self.comoment[a * d + b] / (n - 1.0));
            let ridge = 1e-8 * (0..d).map(|a| cov[(a, a)]).fold(0.0, f64::max).max(1e-12);
            for a in 0..d {
                cov[(a, a)] += ridge;
            }
            if let Some(ch) = cov.cholesky() {
                let fresh = self.shape.is_none();
                let scale = 2.38 / (d as f64).sqrt();
                self.shape = Some(ch.l() * scale);
                if fresh {
                    self.log_scale = 0.0;
                }
            }
        }
    }
}

/// Complete state of one chain; enough to resume it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub iteration: usize,
    pub blocks: Vec<BlockState>,
    rng: StreamRng,
    current_lp: f64,
    nan_streak: usize,
}

/// One Markov chain over a target it owns.
pub struct Chain<T> {
    target: T,
    cfg: ChainConfig,
    state: ChainState,
    proposal: Vec<f64>,
}

const MAX_NAN_STREAK: usize = 1000;

impl<T: LogPosterior> Chain<T> {
    pub fn new(mut target: T, init: &[f64], blocks: &[Vec<usize>], cfg: &ChainConfig, chain: usize) -> Result<Self> {
        cfg.validate()?;
        validate_blocks(target.dim(), init, blocks)?;
        let lp = target.log_posterior(init);
        if !lp.is_finite() {
            return Err(Error::NonFinite {
                context: format!("at the initial value of chain {chain} ({lp})"),
                snapshot: init.to_vec(),
            });
        }
        let state = ChainState {
            x: init.to_vec(),
            iteration: 0,
            blocks: blocks.iter().map(|b| BlockState::new(b.clone(), cfg)).collect(),
            rng: stream_rng(derive_seed(cfg.seed, chain as u64), 0),
            current_lp: lp,
            nan_streak: 0,
        };
        Ok(Chain { target, cfg: cfg.clone(), proposal: init.to_vec(), state })
    }

    /// Resumes from a snapshot taken with [`Chain::state`].
    pub fn from_state(target: T, state: ChainState, cfg: &ChainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Chain { target, cfg: cfg.clone(), proposal: state.x.clone(), state })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn target_mut(&mut self) -> &mut T {
        &mut self.target
    }

    /// One sweep over all blocks.
    pub fn step(&mut self) -> Result<()> {
        let burn_in = self.state.iteration < self.cfg.burn_in;
        let conditional = self.target.has_block_conditionals();
        for b in 0..self.state.blocks.len() {
            let st = &mut self.state;
            self.proposal.copy_from_slice(&st.x);
            st.blocks[b].propose(&st.x, &mut self.proposal, &mut st.rng);
            let (cur, prop) = if conditional {
                let c = self.target.block_log_posterior(&st.x, b);
                (c, self.target.block_log_posterior(&self.proposal, b))
            } else {
                (st.current_lp, self.target.log_posterior(&self.proposal))
            };
            let block = &mut st.blocks[b];
            block.tried += 1;
            block.window_tried += 1;
            if prop.is_nan() {
                st.nan_streak += 1;
                if st.nan_streak > MAX_NAN_STREAK {
                    return Err(Error::NonFinite {
                        context: format!("for {MAX_NAN_STREAK} consecutive proposals"),
                        snapshot: self.proposal.clone(),
                    });
                }
            } else {
                st.nan_streak = 0;
                let log_u = st.rng.random::<f64>().ln();
                if log_u < prop - cur {
                    for &i in &block.indices {
                        st.x[i] = self.proposal[i];
                    }
                    if !conditional {
                        st.current_lp = prop;
                    }
                    block.accepted += 1;
                    block.window_accepted += 1;
                }
            }
            if burn_in {
                let block = &mut st.blocks[b];
                block.record_burn_in(&st.x);
                if block.window_tried == self.cfg.adapt_window {
                    block.adapt();
                }
            }
        }
        self.state.iteration += 1;
        if self.state.iteration == self.cfg.burn_in {
            for block in &mut self.state.blocks {
                block.tried = 0;
                block.accepted = 0;
            }
        }
        Ok(())
    }

    /// Runs to `n_iter`, returning the retained draws row-major.
    pub fn run(&mut self) -> Result<Vec<f64>> {
        let dim = self.state.x.len();
        let mut draws = Vec::with_capacity(self.cfg.retained() * dim);
        while self.state.iteration < self.cfg.n_iter {
            self.step()?;
            let t = self.state.iteration;
            if t > self.cfg.burn_in && (t - self.cfg.burn_in) % self.cfg.thin == 0 {
                draws.extend_from_slice(&self.state.x);
            }
        }
        Ok(draws)
    }

    /// Post-burn-in acceptance rate of each block.
    pub fn acceptance(&self) -> Vec<f64> {
        self.state
            .blocks
            .iter()
            .map(|b| if b.tried == 0 { f64::NAN } else { b.accepted as f64 / b.tried as f64 })
            .collect()
    }
}

fn validate_blocks(dim: usize, init: &[f64], blocks: &[Vec<usize>]) -> Result<()> {
    if init.len() != dim {
        return Err(Error::invalid("mcmc", format!("initial value has length {}, target dimension {dim}", init.len())));
    }
    let mut seen = vec![false; dim];
    for b in blocks {
        if b.is_empty() {
            return Err(Error::invalid("mcmc", "empty block"));
        }
        for &i in b {
            if i >= dim || seen[i] {
                return Err(Error::invalid("mcmc", format!("block index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
    }
    Ok(())
}

/// Retained draws of several chains with summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorFit {
    names: Vec<String>,
    /// Per chain, row-major `draws x names`.
    chains: Vec<Vec<f64>>,
    acceptance: Vec<Vec<f64>>,
    rhat: Vec<Option<f64>>,
}

impl PosteriorFit {
    pub fn new(names: Vec<String>, chains: Vec<Vec<f64>>, acceptance: Vec<Vec<f64>>) -> Result<Self> {
        let dim = names.len();
        if chains.is_empty() || dim == 0 {
            return Err(Error::invalid("posterior fit", "needs at least one chain and one parameter"));
        }
        let len = chains[0].len();
        if chains.iter().any(|c| c.len() != len || c.len() % dim != 0) {
            return Err(Error::invalid("posterior fit", "chains must hold the same number of complete draws"));
        }
        let mut fit = PosteriorFit { names, chains, acceptance, rhat: Vec::new() };
        fit.rhat = (0..dim).map(|j| fit.column_rhat(j)).collect();
        Ok(fit)
    }

    fn column_rhat(&self, j: usize) -> Option<f64> {
        if self.chains.len() < 2 || self.draws_per_chain() < 4 {
            return None;
        }
        let cols: Vec<Vec<f64>> = (0..self.chains.len()).map(|c| self.chain_column(c, j)).collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        gelman_rubin(&refs).ok().flatten()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains[0].len() / self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn chain_column(&self, chain: usize, j: usize) -> Vec<f64> {
        let dim = self.names.len();
        self.chains[chain].iter().skip(j).step_by(dim).copied().collect()
    }

    /// Draws of column `j` pooled over chains.
    pub fn column_at(&self, j: usize) -> Vec<f64> {
        (0..self.chains.len()).flat_map(|c| self.chain_column(c, j)).collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.index_of(name).map(|j| self.column_at(j))
    }

    /// Row `t` of chain `c`.
    pub fn row(&self, chain: usize, t: usize) -> &[f64] {
        let dim = self.names.len();
        &self.chains[chain][t * dim..(t + 1) * dim]
    }

    pub fn acceptance(&self) -> &[Vec<f64>] {
        &self.acceptance
    }

    pub fn rhat(&self) -> &[Option<f64>] {
        &self.rhat
    }

    pub fn max_rhat(&self) -> Option<f64> {
        self.rhat.iter().flatten().copied().fold(None, |m, r| Some(m.map_or(r, |m: f64| m.max(r))))
    }

    /// New fit whose rows are `f(chain, row)` with the given column names.
    pub fn map<F>(&self, names: Vec<String>, mut f: F) -> Result<PosteriorFit>
    where
        F: FnMut(usize, &[f64]) -> Vec<f64>,
    {
        let n = self.draws_per_chain();
        let mut chains = Vec::with_capacity(self.chains.len());
        for c in 0..self.chains.len() {
            let mut out = Vec::with_capacity(n * names.len());
            for t in 0..n {
                let row = f(c, self.row(c, t));
                if row.len() != names.len() {
                    return Err(Error::invalid("posterior fit", "mapped row length differs from names"));
                }
                out.extend(row);
            }
            chains.push(out);
        }
        PosteriorFit::new(names, chains, self.acceptance.clone())
    }

    /// Keeps the named columns in the given order.
    pub fn select(&self, names: &[String]) -> Result<PosteriorFit> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.index_of(n).ok_or_else(|| Error::invalid("posterior fit", format!("no column `{n}`"))))
            .collect::<Result<_>>()?;
        self.map(names.to_vec(), |_, row| idx.iter().map(|&j| row[j]).collect())
    }

    /// Column names with the given prefix, e.g. `"p["`.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.names.iter().filter(|n| n.starts_with(prefix)).cloned().collect()
    }
}

/// Runs `cfg.n_chains` chains, each on its own clone of `target`. `inits`
/// holds one starting point per chain, or one shared by all.
pub fn run_chains<T>(target: &T, inits: &[Vec<f64>], blocks: &[Vec<usize>], names: Vec<String>, cfg: &ChainConfig) -> Result<PosteriorFit>
where
    T: LogPosterior + Clone + Send + Sync,
{
    cfg.validate()?;
    if inits.is_empty() || (inits.len() != 1 && inits.len() != cfg.n_chains) {
        return Err(Error::invalid("mcmc", "need one initial value or one per chain"));
    }
    if names.len() != target.dim() {
        return Err(Error::invalid("mcmc", "one name per parameter is required"));
    }
    let run_one = |c: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let init = if inits.len() == 1 { &inits[0] } else { &inits[c] };
        let mut chain = Chain::new(target.clone(), init, blocks, cfg, c)?;
        let draws = chain.run()?;
        Ok((draws, chain.acceptance()))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = {
        use rayon::prelude::*;
        (0..cfg.n_chains).into_par_iter().map(run_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..cfg.n_chains).map(run_one).collect();

    let mut chains = Vec::with_capacity(cfg.n_chains);
    let mut acceptance = Vec::with_capacity(cfg.n_chains);
    for r in results {
        let (d, a) = r?;
        chains.push(d);
        acceptance.push(a);
    }
    PosteriorFit::new(names, chains, acceptance)
}

/// Split-R̂ of one parameter. `None` when the within-chain variance is zero.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<Option<f64>> {
    if chains.len() < 2 {
        return Err(Error::invalid("rhat", "at least two chains are required"));
    }
    let len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let half = len / 2;
    if half < 2 {
        return Err(Error::invalid("rhat", "chains are too short"));
    }
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        halves.push(&c[..half]);
        halves.push(&c[len - half..len]);
    }
    let n = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let w = halves.iter().map(|h| sample_variance(h)).sum::<f64>() / halves.len() as f64;
    let b = n * sample_variance(&means);
    if !(w > 0.0) {
        return Ok(None);
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok(Some((var_plus / w).sqrt()))
}

fn check_tail(u: f64, alpha: f64) -> Result<()> {
    if !(u > 0.0 && u.is_finite() && alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("pc prior", format!("need U > 0 and 0 < alpha < 1, got U={u}, alpha={alpha}")));
    }
    Ok(())
}

/// Rate `-ln(alpha) / U` of the exponential PC prior on a standard deviation.
pub fn pc_prior_sd_rate(u: f64, alpha: f64) -> Result<f64> {
    check_tail(u, alpha)?;
    Ok(-alpha.ln() / u)
}

/// `ln(lambda) - lambda sigma` with `Pr(sigma > U) = alpha`.
pub fn pc_prior_sd_logdensity(sigma: f64, u: f64, alpha: f64) -> Result<f64> {
    let rate = pc_prior_sd_rate(u, alpha)?;
    if !(sigma > 0.0) {
        return Err(Error::invalid("pc prior", "sigma must be positive"));
    }
    Ok(rate.ln() - rate * sigma)
}

/// PC prior of the BYM2 mixing parameter for one graph, tabulated on the
/// logit scale.
///
/// The distance `d(phi) = sqrt(2 KLD)` from the unstructured model is taken
/// in the sum-to-zero subspace where the structured component lives, so it
/// is bounded by `d(1)`. The prior is exponential in `d` truncated to
/// `[0, d(1)]`, with the rate chosen by bisection so that
/// `Pr(phi > U) = alpha`; a tail statement that needs more mass near
/// `phi = 1` than the untruncated exponential allows gives a negative rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PcPhiPrior {
    gammas: Vec<f64>,
    rate: f64,
    d_max: f64,
    table: Vec<f64>,
}

const PHI_GRID_MIN: f64 = -20.0;
const PHI_GRID_STEP: f64 = 0.005;
const PHI_GRID_LEN: usize = 8001;

/// `Pr(d > du)` for the exponential with `rate` truncated to `[0, dmax]`.
fn truncated_tail(rate: f64, du: f64, dmax: f64) -> f64 {
    if rate == 0.0 {
        (dmax - du) / dmax
    } else if rate > 0.0 {
        ((-rate * du).exp() - (-rate * dmax).exp()) / -libm::expm1(-rate * dmax)
    } else {
        let k = -rate;
        -libm::expm1(-k * (dmax - du)) / -libm::expm1(-k * dmax)
    }
}

impl PcPhiPrior {
    /// Calibrated so that `Pr(phi > U) = alpha`.
    pub fn new(structure: &SpatialStructure, u: f64, alpha: f64) -> Result<Self> {
        check_tail(u, alpha)?;
        if u >= 1.0 {
            return Err(Error::invalid("pc prior", "U for the mixing parameter must lie in (0, 1)"));
        }
        // Eigenvalues of the generalised inverse of the scaled structure.
        let gammas: Vec<f64> = structure
            .scaled_eigenvalues()
            .iter()
            .filter(|&&l| l > 1e-9)
            .map(|&l| 1.0 / l)
            .collect();
        let kld_max: f64 = gammas.iter().map(|g| 0.5 * ((g - 1.0) - g.ln())).sum();
        let d_max = (2.0 * kld_max).sqrt();
        let mut prior = PcPhiPrior { gammas, rate: 0.0, d_max, table: Vec::new() };
        let du = prior.distance(crate::math::logit(u));
        if !(du > 0.0 && du < d_max) {
            return Err(Error::Numeric(format!("distance at U = {u} is {du}, bound {d_max}")));
        }
        // The tail probability decreases in the rate.
        let mut bound = 1.0 / d_max;
        let mut expansions = 0;
        while !(truncated_tail(-bound, du, d_max) > alpha && truncated_tail(bound, du, d_max) < alpha) {
            bound *= 2.0;
            expansions += 1;
            if expansions > 60 {
                return Err(Error::Numeric(format!("cannot calibrate the mixing prior to Pr(phi > {u}) = {alpha}")));
            }
        }
        let (mut lo, mut hi) = (-bound, bound);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if truncated_tail(mid, du, d_max) > alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        prior.rate = 0.5 * (lo + hi);
        prior.table = (0..PHI_GRID_LEN)
            .map(|k| prior.direct_logit(PHI_GRID_MIN + k as f64 * PHI_GRID_STEP))
            .collect();
        Ok(prior)
    }

    /// `sqrt(2 KLD)` of the mixture against the unstructured base model.
    fn distance(&self, l: f64) -> f64 {
        (2.0 * self.kld_parts(l).0.max(0.0)).sqrt()
    }

    /// KLD and `phi (1 - phi) dKLD/dphi` at `phi = expit(l)`.
    fn kld_parts(&self, l: f64) -> (f64, f64) {
        let phi = expit(l);
        let phic = expit(-l);
        let mut kld = 0.0;
        let mut slope = 0.0;
        for &g in &self.gammas {
            let x = phi * (g - 1.0);
            let denom = phic + phi * g;
            let term = if x.abs() < 1e-4 {
                x * x * (0.5 - x * (1.0 / 3.0 - x * 0.25))
            } else if x.abs() < 0.5 {
                x - libm::log1p(x)
            } else {
                x - denom.ln()
            };
            kld += 0.5 * term;
            slope += 0.5 * phi * phi * (g - 1.0) * (g - 1.0) * phic / denom;
        }
        (kld, slope)
    }

    /// Log density of the distance `d` under the truncated exponential.
    fn log_distance_density(&self, d: f64) -> f64 {
        let (r, m) = (self.rate, self.d_max);
        if r == 0.0 {
            -m.ln()
        } else if r > 0.0 {
            r.ln() - r * d - libm::log1p(-(-r * m).exp())
        } else {
            let k = -r;
            k.ln() + k * (d - m) - libm::log1p(-(-k * m).exp())
        }
    }

    /// Log density of `logit(phi)` by direct evaluation.
    pub fn direct_logit(&self, l: f64) -> f64 {
        let (kld, slope) = self.kld_parts(l);
        if !(kld > 0.0 && slope > 0.0) {
            // phi -> 0, where d ~ c phi with c^2 = sum (gamma - 1)^2 / 2.
            let c2: f64 = self.gammas.iter().map(|g| 0.5 * (g - 1.0) * (g - 1.0)).sum();
            return self.log_distance_density(0.0) + 0.5 * c2.ln() - softplus(-l) - softplus(l);
        }
        let d = (2.0 * kld).sqrt();
        self.log_distance_density(d) + (slope / d).ln()
    }

    /// Log density of `logit(phi)`, interpolated from the table inside
    /// `[-20, 20]`.
    pub fn logdensity_logit(&self, l: f64) -> f64 {
        let pos = (l - PHI_GRID_MIN) / PHI_GRID_STEP;
        if !(pos >= 0.0 && pos <= (PHI_GRID_LEN - 1) as f64) {
            return self.direct_logit(l);
        }
        let k = (pos.floor() as usize).min(PHI_GRID_LEN - 2);
        let f = pos - k as f64;
        self.table[k] * (1.0 - f) + self.table[k + 1] * f
    }

    /// Log density on the `phi` scale.
    pub fn logdensity(&self, phi: f64) -> f64 {
        if !(phi > 0.0 && phi < 1.0) {
            return f64::NEG_INFINITY;
        }
        self.logdensity_logit(crate::math::logit(phi)) - (phi * (1.0 - phi)).ln()
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

/// One-off evaluation of the PC prior density of `phi`; build a
/// [`PcPhiPrior`] to evaluate repeatedly.
pub fn pc_prior_phi_logdensity(phi: f64, structure: &SpatialStructure, u: f64, alpha: f64) -> Result<f64> {
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Error::invalid("pc prior", "phi must lie in (0, 1)"));
    }
    Ok(PcPhiPrior::new(structure, u, alpha)?.logdensity(phi))
}

/// Prior on a BYM2 total standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SdPrior {
    Pc { u: f64, alpha: f64 },
    Fixed(f64),
}

impl Default for SdPrior {
    fn default() -> Self {
        SdPrior::Pc { u: 1.0, alpha: 0.01 }
    }
}

impl SdPrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SdPrior::Pc { u, alpha } => check_tail(u, alpha),
            SdPrior::Fixed(s) if s > 0.0 && s.is_finite() => Ok(()),
            SdPrior::Fixed(_) => Err(Error::invalid("prior", "fixed standard deviation must be positive")),
        }
    }

    /// Log density of `ln(sigma)` including the Jacobian.
    pub fn log_density_log(&self, log_sigma: f64) -> f64 {
        match *self {
            SdPrior::Pc { u, alpha } => {
                let rate = -alpha.ln() / u;
                rate.ln() - rate * log_sigma.exp() + log_sigma
            }
            SdPrior::Fixed(_) => 0.0,
        }
    }
}

/// Prior on the BYM2 mixing parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhiPrior {
    Pc { u: f64, alpha: f64 },
    Uniform,
    Fixed(f64),
}

impl Default for PhiPrior {
    fn default() -> Self {
        PhiPrior::Pc { u: 0.5, alpha: 2.0 / 3.0 }
    }
}

/// A [`PhiPrior`] prepared for a particular graph.
#[derive(Debug, Clone, PartialEq)]
pub enum CompiledPhiPrior {
    Pc(PcPhiPrior),
    Uniform,
    Fixed(f64),
}

impl PhiPrior {
    pub fn compile(&self, structure: &SpatialStructure) -> Result<CompiledPhiPrior> {
        match *self {
            PhiPrior::Pc { u, alpha } => Ok(CompiledPhiPrior::Pc(PcPhiPrior::new(structure, u, alpha)?)),
            PhiPrior::Uniform => Ok(CompiledPhiPrior::Uniform),
            PhiPrior::Fixed(p) if p > 0.0 && p < 1.0 => Ok(CompiledPhiPrior::Fixed(p)),
            PhiPrior::Fixed(_) => Err(Error::invalid("prior", "fixed phi must lie in (0, 1)")),
        }
    }
}

impl CompiledPhiPrior {
    /// Log density of `logit(phi)` including the Jacobian.
    pub fn log_density_logit(&self, l: f64) -> f64 {
        match self {
            CompiledPhiPrior::Pc(p) => p.logdensity_logit(l),
            CompiledPhiPrior::Uniform => -softplus(l) - softplus(-l),
            CompiledPhiPrior::Fixed(_) => 0.0,
        }
    }

    pub fn fixed(&self) -> Option<f64> {
        match self {
            CompiledPhiPrior::Fixed(p) => Some(*p),
            _ => None,
        }
    }
}

/// Summaries of pooled posterior draws of one column.
pub fn summarize_column(fit: &PosteriorFit, name: &str, coverage: f64) -> Option<crate::math::Summary> {
    fit.column(name).map(|d| crate::math::summarize(&d, coverage))
}

/// Lower and upper quantiles of a sorted sample for the central interval.
pub fn central_interval(sorted: &[f64], coverage: f64) -> (f64, f64) {
    let tail = 0.5 * (1.0 - coverage);
    (quantile_sorted(sorted, tail), quantile_sorted(sorted, 1.0 - tail))
}

/// Draws a standard normal vector of length `n`.
pub(crate) fn normal_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

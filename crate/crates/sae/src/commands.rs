//! The subcommands. Each one reads its inputs from the configuration,
//! writes CSV outputs to the output directory and returns the run metadata.

use crate::config::{AssessLevel, RunConfig, UnitKind};
use crate::error::{CliError, CliResult};
use crate::io::{self, fmt, fmt_opt, SummaryRow};
use crate::metadata::{Diagnostics, Metadata};
use sae_core::arealevel::{fit_smoothed_direct, posterior_prevalence, SmoothedDirectSpec};
use sae_core::assess::{direct_draws, loo_area_cv, rank_distribution, CvModel, CvSpec, CvStatus};
use sae_core::direct::{binomial_proportion, direct_by_area, jackknife_variance, logit_transform, AreaDirect, DirectStatus};
use sae_core::math::{expit, normal_quantile, summarize};
use sae_core::mcmc::PosteriorFit;
use sae_core::population::{generate_population, synthetic_frame, SamplingFrame};
use sae_core::rng::derive_seed;
use sae_core::sampling::{draw_two_stage, SampleRow, SurveySample};
use sae_core::spatial::{Lattice, SpatialStructure};
use sae_core::unitlevel::{
    aggregate_continuous, aggregate_strata, fit_betabinomial, fit_gp_unit, BetaBinomialSpec, ClusterData, GpUnitSpec, Pixel, PixelGrid,
    PredictOptions, UrbanFractions,
};
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Sample,
    Direct,
    Smooth,
    Unit,
    Assess,
    Rank,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Sample => "sample",
            Command::Direct => "direct",
            Command::Smooth => "smooth",
            Command::Unit => "unit",
            Command::Assess => "assess",
            Command::Rank => "rank",
        }
    }

    pub fn from_name(name: &str) -> Option<Command> {
        [Command::Simulate, Command::Sample, Command::Direct, Command::Smooth, Command::Unit, Command::Assess, Command::Rank]
            .into_iter()
            .find(|c| c.name() == name)
    }
}

/// What a command reports back for the metadata file.
#[derive(Default)]
struct Outcome {
    model_tag: Option<String>,
    outputs: Vec<String>,
    diagnostics: Option<Diagnostics>,
    results: serde_json::Value,
}

/// Runs `command`, writes its outputs and `run.json` to `out`, and returns
/// the metadata.
pub fn run(command: Command, config: &RunConfig, out: &Path) -> CliResult<Metadata> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Validation(format!("cannot create {}: {e}", out.display())))?;
    let outcome = match command {
        Command::Simulate => simulate(config, out)?,
        Command::Sample => sample(config, out)?,
        Command::Direct => direct(config, out)?,
        Command::Smooth => smooth(config, out)?,
        Command::Unit => unit(config, out)?,
        Command::Assess => assess(config, out)?,
        Command::Rank => rank(config, out)?,
    };
    let meta = Metadata::new(command.name(), outcome.model_tag, outcome.outputs, outcome.diagnostics, outcome.results, config.clone());
    meta.write(&out.join("run.json"))?;
    Ok(meta)
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str, command: &str) -> CliResult<&'a Path> {
    path.as_deref().ok_or_else(|| CliError::Validation(format!("`{command}` needs inputs.{key} in the config")))
}

fn simulate(cfg: &RunConfig, out: &Path) -> CliResult<Outcome> {
    let seed = cfg.require_seed()?;
    let sim = &cfg.simulate;
    let (frame, structure) = match &cfg.inputs.frame {
        Some(path) => {
            let frame = io::read_frame(path)?;
            let adjacency = required(&cfg.inputs.adjacency, "adjacency", "simulate")?;
            let structure = io::read_adjacency(adjacency, frame.areas())?;
            (frame, structure)
        }
        None => {
            let [rows, cols] = sim.lattice;
            if rows * cols < 2 {
                return Err(CliError::Validation("simulate.lattice needs at least two areas".into()));
            }
            let lattice = Lattice::new(rows, cols);
            let frame = synthetic_frame(&lattice.ids(), &sim.layout(), Some(&lattice.bounding_boxes()), derive_seed(seed, 0))?;
            (frame, lattice.structure()?)
        }
    };
    let pop = generate_population(&frame, &structure, &sim.population(derive_seed(seed, 1)))?;
    let mut outputs = vec!["frame.csv", "adjacency.csv", "population.csv", "truth.csv", "urban_fractions.csv"];
    io::write_frame(&out.join("frame.csv"), &frame)?;
    io::write_adjacency(&out.join("adjacency.csv"), &structure)?;
    io::write_population(&out.join("population.csv"), &pop)?;
    io::write_truth(&out.join("truth.csv"), &pop)?;
    io::write_urban_fractions(&out.join("urban_fractions.csv"), &UrbanFractions::from_frame(&frame))?;
    if !sim.covariate_effects.is_empty() {
        let mut header = vec!["area_id".to_owned()];
        header.extend((1..=sim.covariate_effects.len()).map(|k| format!("x{k}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = structure.ids().iter().zip(pop.covariates()).map(|(id, x)| {
            let mut row = vec![id.clone()];
            row.extend(x.iter().map(|&v| fmt(v)));
            row
        });
        io::write_csv(&out.join("covariates.csv"), &header, rows)?;
        outputs.push("covariates.csv");
    }
    let individuals: u64 = pop.truth().iter().map(|t| t.individuals).sum();
    let positives: u64 = pop.truth().iter().map(|t| t.positives).sum();
    Ok(Outcome {
        outputs: outputs.into_iter().map(str::to_owned).collect(),
        results: json!({
            "areas": structure.len(),
            "clusters": frame.clusters().len(),
            "individuals": individuals,
            "prevalence": positives as f64 / individuals as f64,
        }),
        ..Outcome::default()
    })
}

fn sample(cfg: &RunConfig, out: &Path) -> CliResult<Outcome> {
    let seed = cfg.require_seed()?;
    let frame = io::read_frame(required(&cfg.inputs.frame, "frame", "sample")?)?;
    let design = cfg.design.design(&frame, seed);
    let pop = io::read_population(required(&cfg.inputs.population, "population", "sample")?, frame)?;
    let sample = draw_two_stage(&pop, &design)?;
    io::write_sample(&out.join("sample.csv"), &sample)?;
    Ok(Outcome {
        outputs: vec!["sample.csv".into()],
        results: json!({
            "clusters": sample.rows.len(),
            "tested": sample.rows.iter().map(|r| r.n_tested).sum::<u64>(),
        }),
        ..Outcome::default()
    })
}

/// Direct record from unweighted counts with binomial variance.
fn binomial_direct(area: &str, y: u64, n: u64, clusters: usize) -> AreaDirect {
    let mut rec = AreaDirect {
        area: area.to_owned(),
        est: None,
        var: None,
        n,
        clusters,
        logit_est: None,
        logit_var: None,
        status: DirectStatus::NoSample,
    };
    let Ok((p, se)) = binomial_proportion(y, n) else {
        return rec;
    };
    rec.est = Some(p);
    rec.var = Some(se * se);
    rec.status = match logit_transform(p, se * se) {
        Ok((z, v)) => {
            rec.logit_est = Some(z);
            rec.logit_var = Some(v);
            DirectStatus::Ok
        }
        Err(_) => DirectStatus::Boundary,
    };
    rec
}

/// Per-area and national direct estimates from the configured sample or
/// counts.
fn compute_direct(cfg: &RunConfig, command: &str) -> CliResult<(Vec<AreaDirect>, AreaDirect)> {
    let frame_areas = match &cfg.inputs.frame {
        Some(p) => io::read_frame(p)?.areas().to_vec(),
        None => Vec::new(),
    };
    if let Some(path) = &cfg.inputs.sample {
        let sample = io::read_sample(path)?;
        let areas = if frame_areas.is_empty() { sample.areas() } else { frame_areas };
        if let Some(a) = sample.areas().into_iter().find(|a| !areas.contains(a)) {
            return Err(CliError::Validation(format!("{}: area `{a}` is not in the frame", path.display())));
        }
        if cfg.direct.weighted {
            let national = weighted_national(&sample);
            Ok((direct_by_area(&sample, &areas), national))
        } else {
            let rows = areas
                .iter()
                .map(|a| {
                    let rows: Vec<&SampleRow> = sample.rows_in_area(a).collect();
                    let clusters = rows.iter().filter(|r| r.n_tested > 0).count();
                    binomial_direct(a, rows.iter().map(|r| r.y_positive).sum(), rows.iter().map(|r| r.n_tested).sum(), clusters)
                })
                .collect();
            let y = sample.rows.iter().map(|r| r.y_positive).sum();
            let n = sample.rows.iter().map(|r| r.n_tested).sum();
            Ok((rows, binomial_direct("national", y, n, sample.rows.len())))
        }
    } else if let Some(path) = &cfg.inputs.counts {
        let counts = io::read_counts(path)?;
        let mut seen = std::collections::BTreeSet::new();
        if let Some(c) = counts.iter().find(|c| !seen.insert(c.area_id.as_str())) {
            return Err(CliError::Validation(format!("{}: duplicate area `{}`", path.display(), c.area_id)));
        }
        let mut rows: Vec<AreaDirect> = counts.iter().map(|c| binomial_direct(&c.area_id, c.y_positive, c.n_tested, 0)).collect();
        if !frame_areas.is_empty() {
            for a in &frame_areas {
                if !seen.contains(a.as_str()) {
                    rows.push(binomial_direct(a, 0, 0, 0));
                }
            }
        }
        let y = counts.iter().map(|c| c.y_positive).sum();
        let n = counts.iter().map(|c| c.n_tested).sum();
        Ok((rows, binomial_direct("national", y, n, 0)))
    } else {
        Err(CliError::Validation(format!("`{command}` needs inputs.sample or inputs.counts in the config")))
    }
}

fn weighted_national(sample: &SurveySample) -> AreaDirect {
    let rows: Vec<&SampleRow> = sample.rows.iter().collect();
    let n = rows.iter().map(|r| r.n_tested).sum();
    let clusters = rows.iter().filter(|r| r.n_tested > 0).count();
    let mut rec = binomial_direct("national", 0, 0, clusters);
    rec.n = n;
    if n == 0 {
        return rec;
    }
    let wy: f64 = rows.iter().map(|r| r.adjusted_weight * r.y_positive as f64).sum();
    let wn: f64 = rows.iter().map(|r| r.adjusted_weight * r.n_tested as f64).sum();
    let est = wy / wn;
    rec.est = Some(est);
    rec.var = jackknife_variance(&rows).ok();
    rec.status = match rec.var.map(|v| logit_transform(est, v)) {
        None => DirectStatus::SingleCluster,
        Some(Ok((z, v))) => {
            rec.logit_est = Some(z);
            rec.logit_var = Some(v);
            DirectStatus::Ok
        }
        Some(Err(_)) => DirectStatus::Boundary,
    };
    rec
}

fn check_coverage(coverage: f64, key: &str) -> CliResult<()> {
    if coverage > 0.0 && coverage < 1.0 {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{key} must lie in (0, 1)")))
    }
}

/// Logit-scale interval, back-transformed.
fn logit_interval(rec: &AreaDirect, coverage: f64) -> (Option<f64>, Option<f64>) {
    match (rec.logit_est, rec.logit_var) {
        (Some(z), Some(v)) if rec.has_logit() => {
            let h = normal_quantile(0.5 + coverage / 2.0) * v.sqrt();
            (Some(expit(z - h)), Some(expit(z + h)))
        }
        _ => (None, None),
    }
}

fn direct(cfg: &RunConfig, out: &Path) -> CliResult<Outcome> {
    check_coverage(cfg.direct.coverage, "direct.coverage")?;
    let (rows, national) = compute_direct(cfg, "direct")?;
    let intervals: Vec<_> = rows.iter().map(|r| logit_interval(r, cfg.direct.coverage)).collect();
    io::write_direct(&out.join("direct.csv"), &rows, &intervals, "direct")?;
    io::write_direct(&out.join("national.csv"), std::slice::from_ref(&national), &[logit_interval(&national, cfg.direct.coverage)], "direct")?;
    let statuses: std::collections::BTreeMap<&str, usize> = rows.iter().fold(Default::default(), |mut m, r| {
        *m.entry(r.status.as_str()).or_default() += 1;
        m
    });
    Ok(Outcome {
        model_tag: Some("direct".into()),
        outputs: vec!["direct.csv".into(), "national.csv".into()],
        results: json!({
            "national": {"estimate": national.est, "se": national.se(), "n": national.n},
            "status_counts": statuses,
        }),
        ..Outcome::default()
    })
}

/// Direct estimates from `inputs.direct`, or computed from the sample or
/// counts.
fn load_direct(cfg: &RunConfig, command: &str) -> CliResult<Vec<AreaDirect>> {
    match &cfg.inputs.direct {
        Some(p) => io::read_direct(p),
        None => Ok(compute_direct(cfg, command)?.0),
    }
}

/// The adjacency structure with nodes in frame order when a frame is given,
/// else in order of first mention in the edge list.
fn load_structure(cfg: &RunConfig, command: &str) -> CliResult<SpatialStructure> {
    let path = required(&cfg.inputs.adjacency, "adjacency", command)?;
    let nodes = match &cfg.inputs.frame {
        Some(p) => io::read_frame(p)?.areas().to_vec(),
        None => Vec::new(),
    };
    io::read_adjacency(path, &nodes)
}

fn load_covariates(cfg: &RunConfig, structure: &SpatialStructure, command: &str) -> CliResult<Option<Vec<Vec<f64>>>> {
    if cfg.model.covariates.is_empty() {
        return Ok(None);
    }
    let path = required(&cfg.inputs.covariates, "covariates", command)?;
    Ok(Some(io::read_covariates(path, &cfg.model.covariates, structure.ids())?))
}

fn summary_rows(fit: &PosteriorFit, coverage: f64) -> Vec<SummaryRow> {
    posterior_prevalence(fit, coverage)
        .into_iter()
        .map(|s| SummaryRow { area: s.area, estimate: Some(s.median), sd: Some(s.sd), ci_low: Some(s.lower), ci_high: Some(s.upper) })
        .collect()
}

fn is_area_column(name: &str) -> bool {
    ["p[", "theta[", "b[", "u["].iter().any(|p| name.starts_with(p))
}

/// Summaries of the scalar parameters: `parameter,mean,median,sd,ci_low,ci_high,rhat`.
fn write_params(path: &Path, fit: &PosteriorFit, coverage: f64) -> CliResult<()> {
    let rows = fit.names().iter().enumerate().filter(|(_, n)| !is_area_column(n)).map(|(j, name)| {
        let s = summarize(&fit.column_at(j), coverage);
        vec![name.clone(), fmt(s.mean), fmt(s.median), fmt(s.sd), fmt(s.lower), fmt(s.upper), fmt_opt(fit.rhat()[j])]
    });
    io::write_csv(path, &["parameter", "mean", "median", "sd", "ci_low", "ci_high", "rhat"], rows)
}

/// Writes summary, parameter and draw files for a fitted model.
fn write_fit(out: &Path, tag: &str, fit: &PosteriorFit, prevalence: &PosteriorFit, coverage: f64) -> CliResult<Outcome> {
    let rows = summary_rows(prevalence, coverage);
    io::write_summary(&out.join("summary.csv"), &rows, tag)?;
    write_params(&out.join("params.csv"), fit, coverage)?;
    io::write_draws(&out.join("draws.csv"), prevalence)?;
    Ok(Outcome {
        model_tag: Some(tag.to_owned()),
        outputs: vec!["summary.csv".into(), "params.csv".into(), "draws.csv".into()],
        diagnostics: Some(Diagnostics::from_fit(fit)),
        results: json!({"areas": rows.len()}),
    })
}

fn smooth(cfg: &RunConfig, out: &Path) -> CliResult<Outcome> {
    let seed = cfg.require_seed()?;
    check_coverage(cfg.model.coverage, "model.coverage")?;
    let estimates = load_direct(cfg, "smooth")?;
    let structure = load_structure(cfg, "smooth")?;
    let covariates = load_covariates(cfg, &structure, "smooth")?;
    let fit = fit_smoothed_direct(&SmoothedDirectSpec {
        estimates: &estimates,
        structure: &structure,
        covariates: covariates.as_deref(),
        priors: cfg.model.priors.area()?,
        mcmc: cfg.mcmc.chain(seed),
    })?;
    let tag = if covariates.is_some() { "smoothed_direct_cov" } else { "smoothed_direct" };
    let prevalence = fit.select(&fit.names_with_prefix("p["))?;
    write_fit(out, tag, &fit, &prevalence, cfg.model.coverage)
}

pub fn unit_tag(kind: UnitKind, urban: bool, covariates: bool) -> String {
    let mut tag = String::from(match kind {
        UnitKind::BetaBinomial => "unit_bb",
        UnitKind::Gp => "unit_gp",
    });
    if urban {
        tag.push_str("_urban");
    }
    if covariates {
        tag.push_str("_cov");
    }
    tag
}

/// Urban fractions from file or frame; zero everywhere when the model has
/// no urban effect and neither is given.
fn load_fractions(cfg: &RunConfig, structure: &SpatialStructure, command: &str) -> CliResult<UrbanFractions> {
    if let Some(p) = &cfg.inputs.urban_fractions {
        return io::read_urban_fractions(p);
    }
    if let Some(p) = &cfg.inputs.frame {
        return Ok(UrbanFractions::from_frame(&io::read_frame(p)?));
    }
    if cfg.model.urban {
        return Err(CliError::Validation(format!("`{command}` with an urban effect needs inputs.urban_fractions or inputs.frame")));
    }
    Ok(UrbanFractions::new(structure.ids().iter().map(|a| (a.clone(), 0.0)))?)
}

fn load_clusters(cfg: &RunConfig, command: &str) -> CliResult<ClusterData> {
    let sample = io::read_sample(required(&cfg.inputs.sample, "sample", command)?)?;
    Ok(ClusterData::from_sample(&sample)?)
}

/// Pixels from `inputs.pixels`, or one pixel per frame cluster weighted by
/// its households.
fn load_pixels(cfg: &RunConfig) -> CliResult<PixelGrid> {
    if let Some(p) = &cfg.inputs.pixels {
        return io::read_pixels(p);
    }
    let path = required(&cfg.inputs.frame, "pixels or inputs.frame", "unit")?;
    let frame: SamplingFrame = io::read_frame(path)?;
    let mut pixels = Vec::with_capacity(frame.clusters().len());
    for (c, cl) in frame.clusters().iter().enumerate() {
        let Some((x, y)) = cl.location else {
            return Err(CliError::Validation(format!("{}: cluster `{}` has no coordinates", path.display(), cl.id)));
        };
        let s = frame.stratum_of(c);
        pixels.push(Pixel { area: s.area.clone(), x, y, weight: cl.households as f64, urban: s.urban });
    }
    Ok(PixelGrid::new(pixels)?)
}

fn unit(cfg: &RunConfig, out: &Path) -> CliResult<Outcome> {
    let seed = cfg.require_seed()?;
    check_coverage(cfg.model.coverage, "model.coverage")?;
    let data = load_clusters(cfg, "unit")?;
    let m = &cfg.model;
    match m.kind {
        UnitKind::BetaBinomial => {
            let structure = load_structure(cfg, "unit")?;
            let covariates = load_covariates(cfg, &structure, "unit")?;
            let fractions = load_fractions(cfg, &structure, "unit")?;
            let fit = fit_betabinomial(&BetaBinomialSpec {
                data: &data,
                structure: &structure,
                covariates: covariates.as_deref(),
                urban: m.urban,
                priors: m.priors.unit()?,
                mcmc: cfg.mcmc.chain(seed),
            })?;
            let prevalence = aggregate_strata(&fit, &structure, covariates.as_deref(), &fractions)?;
            write_fit(out, &unit_tag(m.kind, m.urban, covariates.is_some()), &fit, &prevalence, m.coverage)
        }
        UnitKind::Gp => {
            if !m.covariates.is_empty() {
                return Err(CliError::Validation("the Gaussian-process model takes no area covariates".into()));
            }
            let grid = load_pixels(cfg)?;
            let spec = GpUnitSpec {
                data: &data,
                urban: m.urban,
                smoothness: m.smoothness,
                priors: m.priors.gp()?,
                nugget_floor: m.nugget_floor,
                mcmc: cfg.mcmc.chain(seed),
            };
            let fit = fit_gp_unit(&spec)?;
            let prevalence = aggregate_continuous(&fit, &spec, &grid, &PredictOptions { max_draws: m.max_draws, seed: derive_seed(seed, 1) })?;
            write_fit(out, &unit_tag(m.kind, m.urban, false), &fit, &prevalence, m.coverage)
        }
    }
}

fn assess(cfg: &RunConfig, out: &Path) -> CliResult<Outcome> {
    let seed = cfg.require_seed()?;
    check_coverage(cfg.model.coverage, "model.coverage")?;
    let estimates = load_direct(cfg, "assess")?;
    let structure = load_structure(cfg, "assess")?;
    let covariates = load_covariates(cfg, &structure, "assess")?;
    let data;
    let fractions;
    let (model, tag) = match cfg.assess.level {
        AssessLevel::Area => {
            let tag = if covariates.is_some() { "smoothed_direct_cov" } else { "smoothed_direct" };
            (CvModel::SmoothedDirect { covariates: covariates.as_deref(), priors: cfg.model.priors.area()? }, tag.to_owned())
        }
        AssessLevel::Unit => {
            if cfg.model.kind != UnitKind::BetaBinomial {
                return Err(CliError::Validation("unit-level cross-validation supports the beta-binomial model only".into()));
            }
            data = load_clusters(cfg, "assess")?;
            fractions = load_fractions(cfg, &structure, "assess")?;
            let model = CvModel::BetaBinomial {
                data: &data,
                covariates: covariates.as_deref(),
                urban: cfg.model.urban,
                fractions: &fractions,
                priors: cfg.model.priors.unit()?,
            };
            (model, unit_tag(UnitKind::BetaBinomial, cfg.model.urban, covariates.is_some()))
        }
    };
    let report = loo_area_cv(&CvSpec {
        estimates: &estimates,
        structure: &structure,
        model,
        mcmc: cfg.mcmc.chain(seed),
        coverage: cfg.model.coverage,
    })?;
    let rows = report.records.iter().map(|r| {
        let (status, reason) = match &r.status {
            CvStatus::Ok => ("ok", String::new()),
            CvStatus::Excluded(why) => ("excluded", why.clone()),
            CvStatus::Failed(why) => ("failed", why.clone()),
        };
        let p = r.prediction.as_ref();
        vec![
            r.area.clone(),
            fmt_opt(r.direct),
            fmt_opt(r.direct_se),
            fmt_opt(p.map(|p| p.median)),
            fmt_opt(p.map(|p| p.lower)),
            fmt_opt(p.map(|p| p.upper)),
            fmt_opt(p.map(|p| p.discrepancy)),
            p.map(|p| u8::from(p.covered).to_string()).unwrap_or_default(),
            status.to_owned(),
            reason,
            tag.clone(),
        ]
    });
    io::write_csv(
        &out.join("cv.csv"),
        &["area_id", "direct", "direct_se", "pred_median", "pred_low", "pred_high", "discrepancy", "covered", "status", "reason", "model_tag"],
        rows,
    )?;
    let (covered, evaluated) = report.coverage_count();
    let failed = report.records.iter().filter(|r| matches!(r.status, CvStatus::Failed(_))).count();
    let mean_discrepancy = report.mean_discrepancy();
    Ok(Outcome {
        model_tag: Some(tag),
        outputs: vec!["cv.csv".into()],
        diagnostics: None,
        results: json!({
            "evaluated": evaluated,
            "covered": covered,
            "failed": failed,
            "mean_discrepancy": mean_discrepancy.is_finite().then_some(mean_discrepancy),
        }),
    })
}

fn rank(cfg: &RunConfig, out: &Path) -> CliResult<Outcome> {
    check_coverage(cfg.rank.coverage, "rank.coverage")?;
    let (fit, default_tag) = match &cfg.inputs.draws {
        Some(p) => (io::read_draws(p)?, "posterior"),
        None => {
            let seed = cfg.require_seed()?;
            let estimates = load_direct(cfg, "rank")?;
            (direct_draws(&estimates, cfg.rank.direct_draws, seed)?, "direct")
        }
    };
    if fit.names_with_prefix("p[").is_empty() {
        return Err(CliError::Validation("rank needs prevalence draws in columns named p[area]".into()));
    }
    let tag = cfg.rank.model_tag.clone().unwrap_or_else(|| default_tag.to_owned());
    let ranks = rank_distribution(&fit, cfg.rank.coverage);
    io::write_csv(
        &out.join("ranks.csv"),
        &["area_id", "mean_rank", "median_rank", "rank_low", "rank_high", "model_tag"],
        ranks.iter().map(|r| vec![r.area.clone(), fmt(r.mean_rank), fmt(r.median_rank), fmt(r.lower), fmt(r.upper), tag.clone()]),
    )?;
    Ok(Outcome {
        model_tag: Some(tag),
        outputs: vec!["ranks.csv".into()],
        diagnostics: None,
        results: json!({"areas": ranks.len(), "draws": fit.n_chains() * fit.draws_per_chain()}),
    })
}

//! CSV schemas. Every file is UTF-8 and comma separated with a header row;
//! missing values are empty fields.

use crate::error::{CliError, CliResult};
use sae_core::direct::{AreaDirect, DirectStatus};
use sae_core::mcmc::PosteriorFit;
use sae_core::population::{Cluster, FinitePopulation, SamplingFrame, Stratum};
use sae_core::sampling::{SampleRow, SurveySample};
use sae_core::spatial::SpatialStructure;
use sae_core::unitlevel::{Pixel, PixelGrid, UrbanFractions};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer};
use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

const MAX_LISTED: usize = 20;

fn open(path: &Path) -> CliResult<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| CliError::Validation(format!("cannot open {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// Deserializes every row, collecting row-level schema errors.
pub fn read_rows<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut reader = open(path)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (i, rec) in reader.deserialize::<T>().enumerate() {
        match rec {
            Ok(r) => rows.push(r),
            Err(e) => errors.push(format!("  row {}: {}", i + 1, schema_message(&e))),
        }
    }
    if !errors.is_empty() {
        let more = errors.len().saturating_sub(MAX_LISTED);
        let mut listed: Vec<String> = errors.into_iter().take(MAX_LISTED).collect();
        if more > 0 {
            listed.push(format!("  ... and {more} more"));
        }
        return Err(CliError::Validation(format!("schema errors in {}:\n{}", path.display(), listed.join("\n"))));
    }
    Ok(rows)
}

fn schema_message(e: &csv::Error) -> String {
    match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => match err.field() {
            Some(f) => format!("field {}: {}", f + 1, err.kind()),
            None => err.kind().to_string(),
        },
        _ => e.to_string(),
    }
}

/// Row errors found after parsing, reported like schema errors.
fn row_errors(path: &Path, errors: Vec<String>) -> CliResult<()> {
    if errors.is_empty() {
        return Ok(());
    }
    let listed: Vec<String> = errors.iter().take(MAX_LISTED).map(|e| format!("  {e}")).collect();
    Err(CliError::Validation(format!("invalid rows in {}:\n{}", path.display(), listed.join("\n"))))
}

fn non_empty<T>(path: &Path, rows: Vec<T>) -> CliResult<Vec<T>> {
    if rows.is_empty() {
        return Err(CliError::Validation(format!("{} has no data rows", path.display())));
    }
    Ok(rows)
}

/// Accepts `0`/`1`/`true`/`false`.
fn flag<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    let s = String::deserialize(d)?;
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(serde::de::Error::custom(format!("expected 0/1 or true/false, found `{other}`"))),
    }
}

pub fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

fn fmt_flag(b: bool) -> String {
    u8::from(b).to_string()
}

/// Writes a header and rows, creating parent directories.
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let io = |e: csv::Error| CliError::Validation(format!("cannot write {}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

#[derive(Debug, Deserialize)]
struct FrameRecord {
    cluster_id: String,
    stratum: String,
    area_id: String,
    #[serde(deserialize_with = "flag")]
    urban: bool,
    households: u32,
    lon: Option<f64>,
    lat: Option<f64>,
}

pub const FRAME_HEADER: [&str; 7] = ["cluster_id", "stratum", "area_id", "urban", "households", "lon", "lat"];

pub fn read_frame(path: &Path) -> CliResult<SamplingFrame> {
    let rows: Vec<FrameRecord> = non_empty(path, read_rows(path)?)?;
    let mut strata: Vec<Stratum> = Vec::new();
    let mut errors = Vec::new();
    let mut clusters = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        match strata.iter().find(|s| s.id == r.stratum) {
            Some(s) if s.area != r.area_id || s.urban != r.urban => {
                errors.push(format!("row {}: stratum `{}` has inconsistent area or urban flag", i + 1, r.stratum));
            }
            Some(_) => {}
            None => strata.push(Stratum { id: r.stratum.clone(), area: r.area_id.clone(), urban: r.urban }),
        }
        let location = match (r.lon, r.lat) {
            (Some(x), Some(y)) => Some((x, y)),
            (None, None) => None,
            _ => {
                errors.push(format!("row {}: give both lon and lat or neither", i + 1));
                None
            }
        };
        clusters.push(Cluster { id: r.cluster_id, stratum: r.stratum, households: r.households, location });
    }
    row_errors(path, errors)?;
    Ok(SamplingFrame::new(strata, clusters)?)
}

pub fn write_frame(path: &Path, frame: &SamplingFrame) -> CliResult<()> {
    write_csv(
        path,
        &FRAME_HEADER,
        frame.clusters().iter().enumerate().map(|(c, cl)| {
            let s = frame.stratum_of(c);
            vec![
                cl.id.clone(),
                s.id.clone(),
                s.area.clone(),
                fmt_flag(s.urban),
                cl.households.to_string(),
                fmt_opt(cl.location.map(|l| l.0)),
                fmt_opt(cl.location.map(|l| l.1)),
            ]
        }),
    )
}

#[derive(Debug, Deserialize)]
struct EdgeRecord {
    area_a: String,
    area_b: String,
}

/// Reads an edge list `area_a,area_b`. `nodes`, when non-empty, fixes the
/// node set and order; otherwise nodes appear in order of first mention.
pub fn read_adjacency(path: &Path, nodes: &[String]) -> CliResult<SpatialStructure> {
    let rows: Vec<EdgeRecord> = read_rows(path)?;
    let edges: Vec<(String, String)> = rows.into_iter().map(|r| (r.area_a, r.area_b)).collect();
    if nodes.is_empty() {
        let edges = non_empty(path, edges)?;
        Ok(SpatialStructure::from_edges(&edges)?)
    } else {
        Ok(SpatialStructure::with_nodes(nodes, &edges)?)
    }
}

pub fn write_adjacency(path: &Path, structure: &SpatialStructure) -> CliResult<()> {
    let ids = structure.ids();
    write_csv(path, &["area_a", "area_b"], structure.edges().iter().map(|&(a, b)| vec![ids[a].clone(), ids[b].clone()]))
}

#[derive(Debug, Deserialize)]
struct HouseholdRecord {
    cluster_id: String,
    household: u32,
    persons: u32,
    positives: u32,
}

/// One row per household: `cluster_id,household,persons,positives`.
pub fn write_population(path: &Path, pop: &FinitePopulation) -> CliResult<()> {
    let pph = pop.persons_per_household() as usize;
    let frame = pop.frame();
    let rows = frame.clusters().iter().enumerate().flat_map(|(c, cl)| {
        pop.outcomes(c).chunks(pph).enumerate().map(move |(h, ys)| {
            vec![cl.id.clone(), (h + 1).to_string(), pph.to_string(), ys.iter().map(|&y| u32::from(y)).sum::<u32>().to_string()]
        })
    });
    write_csv(path, &["cluster_id", "household", "persons", "positives"], rows)
}

pub fn read_population(path: &Path, frame: SamplingFrame) -> CliResult<FinitePopulation> {
    let rows: Vec<HouseholdRecord> = non_empty(path, read_rows(path)?)?;
    let pph = rows[0].persons;
    let index: BTreeMap<&str, usize> = frame.clusters().iter().enumerate().map(|(c, cl)| (cl.id.as_str(), c)).collect();
    let mut outcomes: Vec<Vec<u8>> = vec![Vec::new(); frame.clusters().len()];
    let mut errors = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if r.persons != pph || r.positives > r.persons {
            errors.push(format!("row {}: persons must equal {pph} on every row and positives must not exceed persons", i + 1));
            continue;
        }
        match index.get(r.cluster_id.as_str()) {
            Some(&c) => {
                let ys = &mut outcomes[c];
                if ys.len() != (r.household as usize - 1) * pph as usize {
                    errors.push(format!("row {}: households of `{}` must be listed in order from 1", i + 1, r.cluster_id));
                    continue;
                }
                ys.extend((0..pph).map(|k| u8::from(k < r.positives)));
            }
            None => errors.push(format!("row {}: cluster `{}` is not in the frame", i + 1, r.cluster_id)),
        }
    }
    row_errors(path, errors)?;
    Ok(FinitePopulation::from_outcomes(frame, pph, outcomes)?)
}

pub fn write_truth(path: &Path, pop: &FinitePopulation) -> CliResult<()> {
    write_csv(
        path,
        &["area_id", "individuals", "positives", "mean"],
        pop.truth().iter().map(|t| vec![t.area.clone(), t.individuals.to_string(), t.positives.to_string(), fmt(t.mean)]),
    )
}

#[derive(Debug, Deserialize)]
struct SampleRecord {
    cluster_id: String,
    stratum: String,
    area_id: String,
    #[serde(deserialize_with = "flag")]
    urban: bool,
    n_tested: u64,
    y_positive: u64,
    pi1: f64,
    pi2: f64,
    design_weight: f64,
    adjusted_weight: f64,
    lon: Option<f64>,
    lat: Option<f64>,
}

pub const SAMPLE_HEADER: [&str; 12] = [
    "cluster_id",
    "stratum",
    "area_id",
    "urban",
    "n_tested",
    "y_positive",
    "pi1",
    "pi2",
    "design_weight",
    "adjusted_weight",
    "lon",
    "lat",
];

pub fn read_sample(path: &Path) -> CliResult<SurveySample> {
    let rows: Vec<SampleRecord> = non_empty(path, read_rows(path)?)?;
    let mut errors = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if r.y_positive > r.n_tested {
            errors.push(format!("row {}: y_positive {} exceeds n_tested {}", i + 1, r.y_positive, r.n_tested));
        }
        if !(r.adjusted_weight > 0.0 && r.adjusted_weight.is_finite()) {
            errors.push(format!("row {}: adjusted_weight must be positive", i + 1));
        }
        if r.lon.is_some() != r.lat.is_some() {
            errors.push(format!("row {}: give both lon and lat or neither", i + 1));
        }
    }
    row_errors(path, errors)?;
    Ok(SurveySample::new(
        rows.into_iter()
            .map(|r| SampleRow {
                cluster_id: r.cluster_id,
                stratum: r.stratum,
                area: r.area_id,
                urban: r.urban,
                n_tested: r.n_tested,
                y_positive: r.y_positive,
                pi1: r.pi1,
                pi2: r.pi2,
                design_weight: r.design_weight,
                adjusted_weight: r.adjusted_weight,
                location: r.lon.zip(r.lat),
            })
            .collect(),
    )?)
}

pub fn write_sample(path: &Path, sample: &SurveySample) -> CliResult<()> {
    write_csv(
        path,
        &SAMPLE_HEADER,
        sample.rows.iter().map(|r| {
            vec![
                r.cluster_id.clone(),
                r.stratum.clone(),
                r.area.clone(),
                fmt_flag(r.urban),
                r.n_tested.to_string(),
                r.y_positive.to_string(),
                fmt(r.pi1),
                fmt(r.pi2),
                fmt(r.design_weight),
                fmt(r.adjusted_weight),
                fmt_opt(r.location.map(|l| l.0)),
                fmt_opt(r.location.map(|l| l.1)),
            ]
        }),
    )
}

/// Aggregated counts without design information.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CountRecord {
    pub area_id: String,
    pub y_positive: u64,
    pub n_tested: u64,
}

pub fn read_counts(path: &Path) -> CliResult<Vec<CountRecord>> {
    let rows: Vec<CountRecord> = non_empty(path, read_rows(path)?)?;
    let errors = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.y_positive > r.n_tested)
        .map(|(i, r)| format!("row {}: y_positive {} exceeds n_tested {}", i + 1, r.y_positive, r.n_tested))
        .collect();
    row_errors(path, errors)?;
    Ok(rows)
}

pub const SUMMARY_HEADER: [&str; 6] = ["area_id", "estimate", "sd", "ci_low", "ci_high", "model_tag"];

/// One per-area summary line.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub area: String,
    pub estimate: Option<f64>,
    pub sd: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

pub fn write_summary(path: &Path, rows: &[SummaryRow], tag: &str) -> CliResult<()> {
    write_csv(
        path,
        &SUMMARY_HEADER,
        rows.iter().map(|r| {
            vec![r.area.clone(), fmt_opt(r.estimate), fmt_opt(r.sd), fmt_opt(r.ci_low), fmt_opt(r.ci_high), tag.to_owned()]
        }),
    )
}

#[derive(Debug, Deserialize)]
struct DirectRecord {
    area_id: String,
    estimate: Option<f64>,
    se: Option<f64>,
    n: u64,
    clusters: usize,
    status: String,
    logit_est: Option<f64>,
    logit_var: Option<f64>,
}

pub const DIRECT_HEADER: [&str; 11] =
    ["area_id", "estimate", "se", "ci_low", "ci_high", "model_tag", "n", "clusters", "status", "logit_est", "logit_var"];

pub fn write_direct(path: &Path, rows: &[AreaDirect], intervals: &[(Option<f64>, Option<f64>)], tag: &str) -> CliResult<()> {
    write_csv(
        path,
        &DIRECT_HEADER,
        rows.iter().zip(intervals).map(|(r, (lo, hi))| {
            vec![
                r.area.clone(),
                fmt_opt(r.est),
                fmt_opt(r.se()),
                fmt_opt(*lo),
                fmt_opt(*hi),
                tag.to_owned(),
                r.n.to_string(),
                r.clusters.to_string(),
                r.status.as_str().to_owned(),
                fmt_opt(r.logit_est),
                fmt_opt(r.logit_var),
            ]
        }),
    )
}

pub fn read_direct(path: &Path) -> CliResult<Vec<AreaDirect>> {
    let rows: Vec<DirectRecord> = non_empty(path, read_rows(path)?)?;
    let mut errors = Vec::new();
    let out = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let status = match r.status.as_str() {
                "ok" => DirectStatus::Ok,
                "no_sample" => DirectStatus::NoSample,
                "single_cluster" => DirectStatus::SingleCluster,
                "boundary" => DirectStatus::Boundary,
                other => {
                    errors.push(format!("row {}: unknown status `{other}`", i + 1));
                    DirectStatus::NoSample
                }
            };
            AreaDirect {
                area: r.area_id,
                est: r.estimate,
                var: r.se.map(|s| s * s),
                n: r.n,
                clusters: r.clusters,
                logit_est: r.logit_est,
                logit_var: r.logit_var,
                status,
            }
        })
        .collect();
    row_errors(path, errors)?;
    Ok(out)
}

/// Selected covariate columns for `ids`, in that order.
pub fn read_covariates(path: &Path, columns: &[String], ids: &[String]) -> CliResult<Vec<Vec<f64>>> {
    let mut reader = open(path)?;
    let header = reader.headers().map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?.clone();
    let find = |name: &str| header.iter().position(|h| h == name);
    let area_col = find("area_id").ok_or_else(|| CliError::Validation(format!("{} has no `area_id` column", path.display())))?;
    let cols: Vec<usize> = columns
        .iter()
        .map(|c| find(c).ok_or_else(|| CliError::Validation(format!("{} has no column `{c}`", path.display()))))
        .collect::<CliResult<_>>()?;
    let mut by_area = BTreeMap::new();
    let mut errors = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let values: Result<Vec<f64>, _> = cols.iter().map(|&c| rec.get(c).unwrap_or("").parse::<f64>()).collect();
        match values {
            Ok(v) if v.iter().all(|x| x.is_finite()) => {
                by_area.insert(rec.get(area_col).unwrap_or("").to_owned(), v);
            }
            _ => errors.push(format!("row {}: covariates must be finite numbers", i + 1)),
        }
    }
    row_errors(path, errors)?;
    ids.iter()
        .map(|id| by_area.get(id).cloned().ok_or_else(|| CliError::Validation(format!("{} has no row for area `{id}`", path.display()))))
        .collect()
}

#[derive(Debug, Deserialize)]
struct FractionRecord {
    area_id: String,
    q: f64,
}

pub fn read_urban_fractions(path: &Path) -> CliResult<UrbanFractions> {
    let rows: Vec<FractionRecord> = non_empty(path, read_rows(path)?)?;
    Ok(UrbanFractions::new(rows.into_iter().map(|r| (r.area_id, r.q)))?)
}

pub fn write_urban_fractions(path: &Path, q: &UrbanFractions) -> CliResult<()> {
    write_csv(path, &["area_id", "q"], q.iter().map(|(a, v)| vec![a.to_owned(), fmt(v)]))
}

#[derive(Debug, Deserialize)]
struct PixelRecord {
    area_id: String,
    lon: f64,
    lat: f64,
    weight: f64,
    #[serde(deserialize_with = "flag")]
    urban: bool,
}

pub fn read_pixels(path: &Path) -> CliResult<PixelGrid> {
    let rows: Vec<PixelRecord> = non_empty(path, read_rows(path)?)?;
    Ok(PixelGrid::new(
        rows.into_iter().map(|r| Pixel { area: r.area_id, x: r.lon, y: r.lat, weight: r.weight, urban: r.urban }).collect(),
    )?)
}

/// Raw draws: `chain,draw,<names...>`.
pub fn write_draws(path: &Path, fit: &PosteriorFit) -> CliResult<()> {
    let mut header = vec!["chain", "draw"];
    header.extend(fit.names().iter().map(String::as_str));
    let rows = (0..fit.n_chains()).flat_map(|c| {
        (0..fit.draws_per_chain()).map(move |t| {
            let mut row = vec![c.to_string(), t.to_string()];
            row.extend(fit.row(c, t).iter().map(|&v| fmt(v)));
            row
        })
    });
    write_csv(path, &header, rows)
}

pub fn read_draws(path: &Path) -> CliResult<PosteriorFit> {
    let mut reader = open(path)?;
    let header = reader.headers().map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?.clone();
    if header.len() < 3 || &header[0] != "chain" || &header[1] != "draw" {
        return Err(CliError::Validation(format!("{} must start with columns chain,draw", path.display())));
    }
    let names: Vec<String> = header.iter().skip(2).map(str::to_owned).collect();
    let mut chains: Vec<Vec<f64>> = Vec::new();
    let mut errors = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let chain: usize = match rec[0].parse() {
            Ok(c) => c,
            Err(_) => {
                errors.push(format!("row {}: bad chain index", i + 1));
                continue;
            }
        };
        if chain > chains.len() {
            errors.push(format!("row {}: chains must be numbered from 0 in order", i + 1));
            continue;
        }
        if chain == chains.len() {
            chains.push(Vec::new());
        }
        for v in rec.iter().skip(2) {
            match v.parse::<f64>() {
                Ok(x) => chains[chain].push(x),
                Err(_) => {
                    errors.push(format!("row {}: non-numeric draw `{v}`", i + 1));
                    chains[chain].push(f64::NAN);
                }
            }
        }
    }
    row_errors(path, errors)?;
    let chains = non_empty(path, chains)?;
    let n = chains.len();
    Ok(PosteriorFit::new(names, chains, vec![Vec::new(); n])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sae_core::population::{generate_population, synthetic_frame, FrameLayout, PopulationConfig};
    use sae_core::spatial::Lattice;

    #[test]
    fn frame_and_population_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lattice = Lattice::new(2, 2);
        let s = lattice.structure().unwrap();
        let layout = FrameLayout { urban_clusters: 1, rural_clusters: 2, min_households: 3, max_households: 6 };
        let frame = synthetic_frame(&lattice.ids(), &layout, Some(&lattice.bounding_boxes()), 3).unwrap();
        let cfg = PopulationConfig { intercept: -1.0, persons_per_household: 2, seed: 4, ..Default::default() };
        let pop = generate_population(&frame, &s, &cfg).unwrap();
        write_frame(&dir.path().join("frame.csv"), &frame).unwrap();
        write_population(&dir.path().join("pop.csv"), &pop).unwrap();
        write_adjacency(&dir.path().join("adj.csv"), &s).unwrap();
        let frame2 = read_frame(&dir.path().join("frame.csv")).unwrap();
        assert_eq!(frame2, frame);
        let pop2 = read_population(&dir.path().join("pop.csv"), frame2).unwrap();
        assert_eq!(pop2.truth(), pop.truth());
        let s2 = read_adjacency(&dir.path().join("adj.csv"), &lattice.ids()).unwrap();
        assert_eq!(s2.edges(), s.edges());
    }

    #[test]
    fn schema_errors_list_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("counts.csv");
        std::fs::write(&p, "area_id,y_positive,n_tested\nA,1,10\nB,x,10\nC,5,3\n").unwrap();
        let err = read_counts(&p).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        std::fs::write(&p, "area_id,y_positive,n_tested\nA,1,10\nC,5,3\n").unwrap();
        let err = read_counts(&p).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        std::fs::write(&p, "area_id,y_positive,n_tested\n").unwrap();
        assert!(read_counts(&p).is_err());
    }

    #[test]
    fn draws_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fit = PosteriorFit::new(vec!["p[a]".into(), "p[b]".into()], vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.5, 0.6, 0.7, 0.8]], vec![vec![], vec![]]).unwrap();
        let p = dir.path().join("draws.csv");
        write_draws(&p, &fit).unwrap();
        let back = read_draws(&p).unwrap();
        assert_eq!(back.names(), fit.names());
        assert_eq!(back.row(1, 1), fit.row(1, 1));
    }
}

//! End-to-end runs of the `sae` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

const SAE: &str = env!("CARGO_BIN_EXE_sae");

fn sae(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(SAE).arg("--config").arg(config).arg("--out").arg(out).args(args).output().expect("run sae")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "sae failed: {}", stderr(&o));
    o
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn metadata(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

const INPUTS: &str = r#""inputs": {"frame": "sim/frame.csv", "adjacency": "sim/adjacency.csv", "population": "sim/population.csv",
    "sample": "sample/sample.csv", "direct": "direct/direct.csv", "covariates": "sim/covariates.csv", "draws": "smooth/draws.csv"}"#;

/// A simulated population with one covariate, a sample and direct estimates.
fn pipeline() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let sim = write(root, "simulate.json", r#"{"seed": 3, "simulate": {"covariate_effects": [0.5]}}"#);
    ok(sae(&sim, &root.join("sim"), &["simulate"]));
    let cfg = write(root, "base.json", &format!(r#"{{"seed": 3, {INPUTS}}}"#));
    ok(sae(&cfg, &root.join("sample"), &["sample"]));
    ok(sae(&cfg, &root.join("direct"), &["direct"]));
    dir
}

fn model_config(root: &Path, name: &str, model: &str) -> PathBuf {
    write(
        root,
        name,
        &format!(r#"{{"seed": 3, {INPUTS}, "model": {model}, "mcmc": {{"n_iter": 1200, "burn_in": 400, "thin": 2, "n_chains": 2}}}}"#),
    )
}

#[test]
fn missing_frame_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"seed": 1, "inputs": {"frame": "nowhere/frame.csv"}}"#);
    let o = sae(&cfg, &dir.path().join("out"), &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/frame.csv"), "{}", stderr(&o));
}

#[test]
fn stochastic_command_without_seed_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", "{}");
    let o = sae(&cfg, &dir.path().join("out"), &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
}

#[test]
fn empty_sample_exits_2() {
    let dir = pipeline();
    let root = dir.path();
    let header = std::fs::read_to_string(root.join("sample/sample.csv")).unwrap().lines().next().unwrap().to_owned();
    write(root, "empty.csv", &format!("{header}\n"));
    let cfg = write(root, "c.json", r#"{"seed": 1, "inputs": {"sample": "empty.csv"}}"#);
    let o = sae(&cfg, &root.join("out"), &["direct"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn schema_violations_list_the_offending_rows() {
    let dir = pipeline();
    let root = dir.path();
    let (header, mut rows) = read_csv(&root.join("sample/sample.csv"));
    let tested = header.iter().position(|h| h == "n_tested").unwrap();
    let positive = header.iter().position(|h| h == "y_positive").unwrap();
    for k in [1, 3] {
        rows[k][positive] = (rows[k][tested].parse::<u64>().unwrap() + 1).to_string();
    }
    let mut w = csv::Writer::from_path(root.join("bad.csv")).unwrap();
    w.write_record(&header).unwrap();
    rows.iter().for_each(|r| w.write_record(r).unwrap());
    w.flush().unwrap();
    let cfg = write(root, "c.json", r#"{"seed": 1, "inputs": {"sample": "bad.csv"}}"#);
    let o = sae(&cfg, &root.join("out"), &["direct"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("row 2") && e.contains("row 4") && !e.contains("row 3:"), "{e}");
}

#[test]
fn zero_threads_is_rejected_and_env_fallback_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"seed": 1, "simulate": {"lattice": [2, 2]}}"#);
    let o = Command::new(SAE).arg("--config").arg(&cfg).arg("--out").arg(dir.path().join("a")).args(["--threads", "0", "simulate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(SAE).env("SAE_THREADS", "0").arg("--config").arg(&cfg).arg("--out").arg(dir.path().join("b")).arg("simulate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(SAE).env("SAE_THREADS", "1").arg("--config").arg(&cfg).arg("--out").arg(dir.path().join("c")).arg("simulate").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"seed": 1, "simulate": {"lattice": [2, 2]}}"#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(sae(&cfg, &a, &["simulate"]));
    ok(sae(&cfg, &b, &["--seed", "2", "simulate"]));
    assert_eq!(metadata(&b)["seed"], 2);
    assert_ne!(std::fs::read(a.join("population.csv")).unwrap(), std::fs::read(b.join("population.csv")).unwrap());
}

#[test]
fn truth_resums_from_population_and_frame() {
    let dir = pipeline();
    let sim = dir.path().join("sim");
    let (fh, frame) = read_csv(&sim.join("frame.csv"));
    let (ci, ai) = (fh.iter().position(|h| h == "cluster_id").unwrap(), fh.iter().position(|h| h == "area_id").unwrap());
    let area_of: BTreeMap<String, String> = frame.iter().map(|r| (r[ci].clone(), r[ai].clone())).collect();
    let (ph, pop) = read_csv(&sim.join("population.csv"));
    assert_eq!(ph, ["cluster_id", "household", "persons", "positives"]);
    let mut sums: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for r in &pop {
        let e = sums.entry(area_of[&r[0]].clone()).or_default();
        e.0 += r[2].parse::<u64>().unwrap();
        e.1 += r[3].parse::<u64>().unwrap();
    }
    let (th, truth) = read_csv(&sim.join("truth.csv"));
    assert_eq!(th, ["area_id", "individuals", "positives", "mean"]);
    assert_eq!(truth.len(), sums.len());
    for r in truth {
        let (n, y) = sums[&r[0]];
        assert_eq!((r[1].parse::<u64>().unwrap(), r[2].parse::<u64>().unwrap()), (n, y), "{}", r[0]);
        assert!((r[3].parse::<f64>().unwrap() - y as f64 / n as f64).abs() < 1e-15);
    }
}

#[test]
fn six_standard_outputs_carry_their_tags() {
    let dir = pipeline();
    let root = dir.path();
    let runs = [
        ("smooth", r#"{}"#, "smoothed_direct"),
        ("smooth", r#"{"covariates": ["x1"]}"#, "smoothed_direct_cov"),
        ("unit", r#"{"urban": false}"#, "unit_bb"),
        ("unit", r#"{"urban": true}"#, "unit_bb_urban"),
        ("unit", r#"{"urban": true, "covariates": ["x1"]}"#, "unit_bb_urban_cov"),
    ];
    let mut tags = vec![read_csv(&root.join("direct/direct.csv")).1[0][5].clone()];
    for (k, (command, model, tag)) in runs.iter().enumerate() {
        let cfg = model_config(root, &format!("m{k}.json"), model);
        let out = root.join(format!("m{k}"));
        ok(sae(&cfg, &out, &[command]));
        let (header, rows) = read_csv(&out.join("summary.csv"));
        assert_eq!(header, ["area_id", "estimate", "sd", "ci_low", "ci_high", "model_tag"]);
        assert_eq!(rows.len(), 27);
        assert!(rows.iter().all(|r| r[5] == *tag));
        for r in &rows {
            let v: Vec<f64> = r[1..5].iter().map(|s| s.parse().unwrap()).collect();
            assert!(v[2] <= v[0] && v[0] <= v[3] && v[1] > 0.0, "{r:?}");
        }
        assert_eq!(metadata(&out)["model_tag"], *tag);
        tags.push(rows[0][5].clone());
    }
    assert_eq!(tags, ["direct", "smoothed_direct", "smoothed_direct_cov", "unit_bb", "unit_bb_urban", "unit_bb_urban_cov"]);
}

#[test]
fn metadata_reruns_the_command() {
    let dir = pipeline();
    let root = dir.path();
    let cfg = model_config(root, "m.json", "{}");
    let (first, second) = (root.join("first"), root.join("second"));
    ok(sae(&cfg, &first, &["smooth"]));
    let meta = metadata(&first);
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["config_sha256"].as_str().unwrap().len(), 64);
    assert!(meta["versions"]["sae"].is_string() && meta["versions"]["sae_core"].is_string());
    assert_eq!(meta["diagnostics"]["chains"], 2);
    ok(sae(&first.join("run.json"), &second, &["smooth"]));
    for name in ["summary.csv", "params.csv", "draws.csv", "run.json"] {
        assert_eq!(std::fs::read(first.join(name)).unwrap(), std::fs::read(second.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn district_counts_give_the_pooled_national_rate() {
    let dir = tempfile::tempdir().unwrap();
    sae::districts::write_counts(&dir.path().join("counts.csv")).unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"inputs": {"counts": "counts.csv"}, "direct": {"weighted": false}}"#);
    let out = dir.path().join("out");
    ok(sae(&cfg, &out, &["direct"]));
    let (header, rows) = read_csv(&out.join("national.csv"));
    assert_eq!(&header[..6], ["area_id", "estimate", "se", "ci_low", "ci_high", "model_tag"]);
    let est: f64 = rows[0][1].parse().unwrap();
    let se: f64 = rows[0][2].parse().unwrap();
    assert_eq!(format!("{:.4}", est), "0.0628");
    assert!((0.0036..=0.00375).contains(&se), "{se}");
    assert_eq!(read_csv(&out.join("direct.csv")).1.len(), 27);
}

#[test]
fn short_chains_flag_non_convergence_but_succeed() {
    let dir = pipeline();
    let root = dir.path();
    let cfg = write(root, "m.json", &format!(r#"{{"seed": 3, {INPUTS}, "mcmc": {{"n_iter": 30, "burn_in": 10, "thin": 1, "n_chains": 2}}}}"#));
    let out = root.join("short");
    let o = ok(sae(&cfg, &out, &["unit"]));
    let meta = metadata(&out);
    assert_eq!(meta["warning"], true);
    assert!(meta["diagnostics"]["max_rhat"].as_f64().unwrap() > 1.1);
    assert!(stderr(&o).contains("warning:"));
}

#[test]
fn ranks_come_from_posterior_draws_or_direct_estimates() {
    let dir = pipeline();
    let root = dir.path();
    let cfg = model_config(root, "m.json", "{}");
    ok(sae(&cfg, &root.join("smooth"), &["smooth"]));
    for (out, tag) in [("ranks_post", "posterior"), ("ranks_direct", "direct")] {
        let cfg = if tag == "direct" { write(root, "rd.json", r#"{"seed": 3, "inputs": {"direct": "direct/direct.csv"}}"#) } else { cfg.clone() };
        ok(sae(&cfg, &root.join(out), &["rank"]));
        let (header, rows) = read_csv(&root.join(out).join("ranks.csv"));
        assert_eq!(header, ["area_id", "mean_rank", "median_rank", "rank_low", "rank_high", "model_tag"]);
        let mean_total: f64 = rows.iter().map(|r| r[1].parse::<f64>().unwrap()).sum();
        assert!((mean_total - (27.0 * 28.0 / 2.0)).abs() < 1e-6, "{mean_total}");
        assert!(rows.iter().all(|r| r[5] == tag));
    }
}

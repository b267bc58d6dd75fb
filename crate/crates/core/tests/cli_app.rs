use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sitelasso::dataset::PointDataset;
use sitelasso::pipeline::Manifest;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sitelasso"));
    c.env_remove("SITELASSO_OUTPUT_DIR").env("RUST_LOG", "error");
    c
}

fn quickstart() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../quickstart")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    let mut c = bin();
    c.arg("synth").arg(quickstart().join("synth.toml")).arg("--out").arg(&data).args(extra);
    ok(c.output().unwrap());
    data
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL_RUN: &str = r#"
points = "data/points.csv"
rasters = "data/rasters"
methods = ["m1-b1", "m1-b2", "m2", "m3"]
n_splits = 30
max_order = 2
seed = 5
output = "out"
"#;

#[test]
fn synth_writes_two_sites() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let points = PointDataset::read_csv(&data.join("points.csv")).unwrap();
    assert_eq!(points.site_rows("B1").len(), 60);
    assert_eq!(points.site_rows("B2").len(), 56);
    assert!(data.join("rasters/B1/ECA.asc").is_file());
    assert!(data.join("truth.json").is_file());

    let other = synth(&dir.path().join("other"), &["--seed", "99"]);
    let b = PointDataset::read_csv(&other.join("points.csv")).unwrap();
    assert_eq!(b.covariate_names(), points.covariate_names());
    assert_eq!(b.len(), points.len());
    assert_ne!(b, points);
}

#[test]
fn invalid_inputs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nsites = []\ncovariates = []\n").unwrap();
    let out = bin().arg("synth").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("sitelasso: config error:"));

    let cfg = write_config(dir.path(), "points = \"missing.csv\"\n");
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    synth(dir.path(), &[]);
    let cfg = write_config(dir.path(), "points = \"data/points.csv\"\nthreshold = 2.0\n");
    assert_eq!(bin().arg("run").arg(&cfg).output().unwrap().status.code(), Some(2));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
}

#[test]
fn run_is_deterministic_and_verifiable() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let cfg = write_config(dir.path(), SMALL_RUN);
    ok(bin().arg("run").arg(&cfg).output().unwrap());
    let out = dir.path().join("out");
    let first = std::fs::read(out.join("manifest.json")).unwrap();
    let metrics = std::fs::read(out.join("metrics.csv")).unwrap();
    ok(bin().arg("run").arg(&cfg).output().unwrap());
    assert_eq!(std::fs::read(out.join("manifest.json")).unwrap(), first);
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), metrics);

    let manifest = Manifest::read(&out).unwrap();
    assert_eq!(manifest.ensembles["m3"], "ensemble_m2.json");
    assert_eq!(manifest.ensembles["m2"], "ensemble_m2.json");
    assert!(!out.join("ensemble_m3.json").exists());
    assert_eq!(manifest.stage2.len(), 2);
    for name in ["split_plan.csv", "residuals_m3.csv", "prediction_m3_B2.asc", "transforms_m1-b1.csv"] {
        assert!(manifest.files.contains_key(name), "{name}");
    }
    assert_eq!(manifest.config.n_splits, 30);
    assert_eq!(manifest.config.threshold, 0.95);

    ok(bin().arg("verify").arg(&out).output().unwrap());
    std::fs::write(out.join("metrics.csv"), "tampered\n").unwrap();
    let v = bin().arg("verify").arg(&out).output().unwrap();
    assert_eq!(v.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&v.stderr).contains("metrics.csv"));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let cfg = write_config(dir.path(), &SMALL_RUN.replace("[\"m1-b1\", \"m1-b2\", \"m2\", \"m3\"]", "[\"m2\"]"));
    let elsewhere = dir.path().join("elsewhere");
    ok(bin().arg("run").arg(&cfg).env("SITELASSO_OUTPUT_DIR", &elsewhere).output().unwrap());
    assert!(elsewhere.join("manifest.json").is_file());
    assert!(!dir.path().join("out").exists());
}

fn metrics_cell(path: &Path, target: &str, column: &str) -> f64 {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == column).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        if &rec[0] == target {
            return rec[idx].parse().unwrap();
        }
    }
    panic!("no row {target}");
}

#[test]
fn transfer_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &[]);
    let cfg = write_config(dir.path(), SMALL_RUN);
    ok(bin().arg("run").arg(&cfg).output().unwrap());
    let run = dir.path().join("out");
    let points = PointDataset::read_csv(&data.join("points.csv")).unwrap();

    let b1 = dir.path().join("b1.csv");
    points.subset(&points.site_rows("B1")).write_csv(&b1).unwrap();
    let t = dir.path().join("t1");
    ok(bin().args(["transfer", "--method", "m1-b1", "--out"]).arg(&t).arg(&run).arg(&b1).output().unwrap());
    let got = metrics_cell(&t.join("transfer_m1-b1.csv"), "m1-b1", "r2");
    let want = metrics_cell(&run.join("metrics.csv"), "B1", "m1-b1_r2");
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    let b2 = points.subset(&points.site_rows("B2"));
    let mut shifted = b2.records().to_vec();
    let eca = b2.covariate_index("ECA").unwrap();
    for r in shifted.iter_mut() {
        r.covariates[eca] += 40.0;
    }
    let far = dir.path().join("far.csv");
    PointDataset::new(b2.covariate_names().to_vec(), shifted).unwrap().write_csv(&far).unwrap();
    let t = dir.path().join("t2");
    ok(bin().args(["transfer", "--method", "m1-b1", "--out"]).arg(&t).arg(&run).arg(&far).output().unwrap());
    let mut r = csv::Reader::from_path(t.join("support_m1-b1.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    let flag = |term: &str| rows.iter().find(|x| &x[0] == term && x[1].starts_with("target-")).map(|x| x[7].to_string());
    assert_eq!(flag("ECA").as_deref(), Some("true"));
    assert_eq!(flag("NDVI").as_deref(), Some("false"));

    let names: Vec<String> = b2.covariate_names().iter().filter(|n| *n != "ECA").cloned().collect();
    let keep: Vec<usize> = names.iter().map(|n| b2.covariate_index(n).unwrap()).collect();
    let recs = b2
        .records()
        .iter()
        .map(|r| sitelasso::dataset::PointRecord {
            covariates: keep.iter().map(|&j| r.covariates[j]).collect(),
            ..r.clone()
        })
        .collect();
    let lacking = dir.path().join("lacking.csv");
    PointDataset::new(names, recs).unwrap().write_csv(&lacking).unwrap();
    let out = bin().args(["transfer", "--method", "m1-b1"]).arg(&run).arg(&lacking).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ECA"));

    let out = bin().arg("transfer").arg(&run).arg(&b1).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "two site-specific ensembles need --method");
}

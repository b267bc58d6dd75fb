//! End-to-end runs: artifacts, manifest, oracle checks, transfer and
//! synthetic dataset output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::cv::{make_splits, tally_selection, Ensemble};
use crate::dataset::{PointDataset, PointRecord};
use crate::error::{Error, Result};
use crate::features::{write_removal_log, Removal};
use crate::format::fmt_f64;
use crate::geo::{predict_raster_sum, term_covariates, RasterGrid, SyntheticData, TruthRecord};
use crate::methods::{
    covariate_support_report, run_methods, transfer_predictions, write_metrics_table, write_residuals,
    write_support_report, Method, MethodRun, MethodSettings, COMBINED,
};
use crate::standardize::write_transform_audit;
use crate::lasso::fit_metrics;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "sitelasso-manifest-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: RunConfig,
    pub seed: u64,
    pub plan_id: String,
    pub quotas: BTreeMap<String, usize>,
    pub methods: Vec<String>,
    /// Method label to ensemble file. The two-stage method points at the
    /// global-effects ensemble it was built on.
    pub ensembles: BTreeMap<String, String>,
    /// Site to residual ensemble file for the two-stage method.
    pub stage2: BTreeMap<String, String>,
    pub checks: Vec<CheckResult>,
    /// Output file name to sha256.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::InvalidInput(format!("unsupported manifest format `{}`", m.format)));
        }
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct OutputDir {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }
}

/// Discarded partners of each retained term, keyed by global term id.
fn filtered_partners(log: &[Removal]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in log.iter().filter(|r| !r.retained.is_empty()) {
        out.entry(r.retained.clone()).or_default().push(r.discarded.clone());
    }
    out
}

fn selection_csv(ensemble: &Ensemble, log: &[Removal], buf: &mut Vec<u8>) -> Result<()> {
    let table = tally_selection(ensemble);
    let partners = filtered_partners(log);
    let by_id: BTreeMap<String, String> = ensemble.terms.iter().map(|t| (t.id(), t.global().id())).collect();
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["term", "count", "filtered_partners"])?;
    for (term, count) in table.ranked() {
        let global = by_id.get(&term).cloned().unwrap_or_else(|| term.clone());
        let p = partners.get(&global).map(|v| v.join(";")).unwrap_or_default();
        w.write_record([term, count.to_string(), p])?;
    }
    w.flush()?;
    Ok(())
}

fn ensemble_outputs(out: &mut OutputDir, tag: &str, ensemble: &Ensemble, log: &[Removal]) -> Result<String> {
    let file = format!("ensemble_{tag}.json");
    out.write(&file, ensemble.to_json()?.as_bytes())?;
    out.write_with(&format!("selection_{tag}.csv"), |b| selection_csv(ensemble, log, b))?;
    out.write_with(&format!("subset_sizes_{tag}.csv"), |b| tally_selection(ensemble).write_subset_sizes(b))?;
    out.write_with(&format!("transforms_{tag}.csv"), |b| {
        let list: Vec<(String, _)> = ensemble.members.iter().map(|m| (m.split.to_string(), &m.transform)).collect();
        write_transform_audit(&list, b)
    })?;
    Ok(file)
}

fn load_site_rasters(dir: &Path, site: &str, covariates: &[String]) -> Result<BTreeMap<String, RasterGrid>> {
    let mut out = BTreeMap::new();
    for c in covariates {
        let path = dir.join(site).join(format!("{c}.asc"));
        if !path.is_file() {
            return Err(Error::MissingCovariate(format!("{c} (no raster at {})", path.display())));
        }
        out.insert(c.clone(), RasterGrid::read_ascii(&path)?);
    }
    Ok(out)
}

fn raster_outputs(out: &mut OutputDir, dir: &Path, run: &MethodRun, sites: &[String]) -> Result<()> {
    let mut terms = run.ensemble.terms.clone();
    for e in run.stage2.values() {
        terms.extend(e.terms.iter().cloned());
    }
    let covariates = term_covariates(&terms);
    for site in sites {
        if !dir.join(site).is_dir() {
            log::warn!("no raster directory for site {site}; skipping prediction rasters");
            continue;
        }
        let rasters = load_site_rasters(dir, site, &covariates)?;
        let mut ensembles = vec![&run.ensemble];
        if let Some(e) = run.stage2.get(site) {
            ensembles.push(e);
        }
        let grid = predict_raster_sum(&ensembles, &rasters, site)?;
        out.write_with(&format!("prediction_{}_{}.asc", run.method.label(), site), |b| grid.to_writer(b))?;
    }
    Ok(())
}

fn run_checks(cfg: &RunConfig, runs: &[MethodRun]) -> Result<Vec<CheckResult>> {
    let Some(checks) = &cfg.checks else {
        return Ok(Vec::new());
    };
    let mut results = Vec::new();
    let m2 = runs.iter().find(|r| r.method == Method::GlobalOnly);
    if let (Some(min), Some(m2)) = (checks.min_r2, m2) {
        let r2 = m2.metrics[COMBINED].r_squared;
        results.push(CheckResult {
            name: "m2_in_sample_r2".into(),
            passed: r2 >= min,
            detail: format!("combined R² {} against minimum {min}", fmt_f64(r2)),
        });
    }
    if let (Some(path), Some(m2)) = (&checks.truth, m2) {
        let truth: TruthRecord = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let top: Vec<String> = tally_selection(&m2.ensemble)
            .ranked()
            .into_iter()
            .take(checks.top_k)
            .map(|(t, _)| t)
            .collect();
        let missing: Vec<&String> = truth
            .active_terms
            .iter()
            .filter(|t| !t.contains('@') && !top.contains(t))
            .collect();
        results.push(CheckResult {
            name: "m2_truth_in_top_k".into(),
            passed: missing.is_empty(),
            detail: if missing.is_empty() {
                format!("all true global terms rank within the top {}", checks.top_k)
            } else {
                format!("outside the top {}: {:?}", checks.top_k, missing)
            },
        });
    }
    if let (Some(m3), Some(m2)) = (runs.iter().find(|r| r.method == Method::TwoStage), m2) {
        let s2 = m3.stage2_predictions.as_ref().expect("two-stage run has stage-2 predictions");
        let worst = m3
            .predictions
            .iter()
            .zip(&m2.predictions)
            .zip(s2)
            .map(|((p3, p2), s)| ((p3 - p2) - s).abs())
            .fold(0.0_f64, f64::max);
        results.push(CheckResult {
            name: "m3_decomposition".into(),
            passed: worst <= checks.decomposition_tol,
            detail: format!("largest deviation {}", fmt_f64(worst)),
        });
    }
    Ok(results)
}

/// Runs every configured method and writes all artifacts plus the
/// manifest. Failed oracle checks are reported after the manifest is
/// written.
pub fn execute_run(cfg: &RunConfig) -> Result<Manifest> {
    let data = PointDataset::read_csv(&cfg.points)?;
    let sites = data.sites();
    let methods = cfg
        .methods
        .iter()
        .map(|m| Method::parse(m, &sites))
        .collect::<Result<Vec<_>>>()?;
    let quotas = cfg.quotas(&sites)?;
    let plan = make_splits(&data, cfg.n_splits, &quotas, cfg.seed)?;
    let settings = MethodSettings {
        max_order: cfg.max_order,
        threshold: cfg.threshold,
        filter_seed: cfg.seed,
        meta: cfg.covariate_meta(data.covariate_names()),
        workers: cfg.workers,
    };
    log::info!(
        "{} rows, {} sites, {} splits, methods {:?}",
        data.len(),
        sites.len(),
        plan.n_splits(),
        cfg.methods
    );
    let runs = run_methods(&data, &plan, &settings, &methods)?;

    let mut out = OutputDir::new(&cfg.output)?;
    out.write_with("split_plan.csv", |b| plan.write_csv(b))?;
    out.write_with("metrics.csv", |b| write_metrics_table(&runs, &sites, b))?;
    let mut ensembles = BTreeMap::new();
    let mut stage2 = BTreeMap::new();
    for run in &runs {
        let label = run.method.label();
        out.write_with(&format!("residuals_{label}.csv"), |b| write_residuals(run, &data, b))?;
        out.write_with(&format!("filter_log_{label}.csv"), |b| write_removal_log(&run.filter_log, b))?;
        let file = if run.method == Method::TwoStage {
            let m2 = "m2";
            let name = format!("ensemble_{m2}.json");
            if !out.files.contains_key(&name) {
                ensemble_outputs(&mut out, m2, &run.ensemble, &run.filter_log)?;
            }
            for (site, e) in &run.stage2 {
                let tag = format!("m3-stage2-{}", site.to_lowercase());
                stage2.insert(site.clone(), ensemble_outputs(&mut out, &tag, e, &run.filter_log)?);
            }
            name
        } else {
            ensemble_outputs(&mut out, &label, &run.ensemble, &run.filter_log)?
        };
        ensembles.insert(label, file);
        if let Some(dir) = &cfg.rasters {
            raster_outputs(&mut out, dir, run, &sites)?;
        }
    }
    let checks = run_checks(cfg, &runs)?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config: cfg.clone(),
        seed: cfg.seed,
        plan_id: plan.id(),
        quotas,
        methods: methods.iter().map(Method::label).collect(),
        ensembles,
        stage2,
        checks: checks.clone(),
        files: out.files.clone(),
    };
    std::fs::write(cfg.output.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    let failed: Vec<&CheckResult> = checks.iter().filter(|c| !c.passed).collect();
    if let Some(first) = failed.first() {
        return Err(Error::CheckFailed(format!("{}: {}", first.name, first.detail)));
    }
    Ok(manifest)
}

/// Names of files whose content no longer matches the manifest.
pub fn verify_run(dir: &Path) -> Result<Vec<String>> {
    let manifest = Manifest::read(dir)?;
    let mut bad = Vec::new();
    for (name, hash) in &manifest.files {
        match std::fs::read(dir.join(name)) {
            Ok(bytes) if sha256_hex(&bytes) == *hash => {}
            _ => bad.push(name.clone()),
        }
    }
    Ok(bad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub method: String,
    pub source_site: String,
    pub r_squared: f64,
    pub rmse: f64,
    pub files: Vec<PathBuf>,
}

/// Evaluates a stored site-specific ensemble on target points and writes
/// the metrics, per-point predictions and a covariate support report.
pub fn execute_transfer(run_dir: &Path, target_csv: &Path, method: Option<&str>, out_dir: &Path) -> Result<TransferReport> {
    let manifest = Manifest::read(run_dir)?;
    let candidates: Vec<&String> = manifest.ensembles.keys().filter(|k| k.starts_with("m1-")).collect();
    let label = match method {
        Some(m) => {
            let m = m.to_lowercase();
            candidates
                .iter()
                .find(|k| ***k == m)
                .map(|k| k.to_string())
                .ok_or_else(|| Error::InvalidInput(format!("run has no site-specific ensemble `{m}`")))?
        }
        None => match candidates.as_slice() {
            [one] => one.to_string(),
            [] => return Err(Error::InvalidInput("run has no site-specific ensemble".into())),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "run has several site-specific ensembles {candidates:?}; choose one"
                )))
            }
        },
    };
    let text = std::fs::read_to_string(run_dir.join(&manifest.ensembles[&label]))?;
    let ensemble = Ensemble::from_json(&text)?;
    let source_site = ensemble.sites.first().cloned().unwrap_or_default();
    let target = PointDataset::read_csv(target_csv)?;
    let pred = transfer_predictions(&ensemble, &target)?;
    let metrics = fit_metrics(&target.responses(), &pred)?;

    let source = PointDataset::read_csv(&manifest.config.points)?;
    let mut records: Vec<PointRecord> = Vec::new();
    let names: Vec<String> = term_covariates(&ensemble.terms);
    for (tag, ds, rows) in [
        ("source", &source, source.site_rows(&source_site)),
        ("target", &target, (0..target.len()).collect::<Vec<_>>()),
    ] {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| ds.covariate_index(n).ok_or_else(|| Error::MissingCovariate(n.clone())))
            .collect::<Result<_>>()?;
        for r in rows {
            let rec = &ds.records()[r];
            records.push(PointRecord {
                site: format!("{tag}-{}", rec.site),
                x: rec.x,
                y: rec.y,
                response: rec.response,
                covariates: idx.iter().map(|&j| rec.covariates[j]).collect(),
            });
        }
    }
    let table = tally_selection(&ensemble);
    let mut report_terms: Vec<_> = table
        .ranked()
        .into_iter()
        .filter(|(_, c)| *c > 0)
        .filter_map(|(id, _)| ensemble.terms.iter().find(|t| t.id() == id).cloned())
        .collect();
    if report_terms.is_empty() {
        report_terms = ensemble.terms.clone();
    }
    let pooled = PointDataset::new(names, records)?;
    let support = covariate_support_report(&pooled, &report_terms)?;

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(format!("transfer_{label}.csv"));
    let mut w = csv::Writer::from_path(&metrics_path)?;
    w.write_record(["method", "source_site", "target_rows", "r2", "rmse"])?;
    w.write_record([
        label.clone(),
        source_site.clone(),
        target.len().to_string(),
        fmt_f64(metrics.r_squared),
        fmt_f64(metrics.rmse),
    ])?;
    w.flush()?;
    let pred_path = out_dir.join(format!("transfer_predictions_{label}.csv"));
    let mut w = csv::Writer::from_path(&pred_path)?;
    w.write_record(["row", "site", "observed", "predicted", "residual"])?;
    for (i, (r, p)) in target.records().iter().zip(&pred).enumerate() {
        w.write_record([i.to_string(), r.site.clone(), fmt_f64(r.response), fmt_f64(*p), fmt_f64(r.response - p)])?;
    }
    w.flush()?;
    let support_path = out_dir.join(format!("support_{label}.csv"));
    write_support_report(&support, std::fs::File::create(&support_path)?)?;
    Ok(TransferReport {
        method: label,
        source_site,
        r_squared: metrics.r_squared,
        rmse: metrics.rmse,
        files: vec![metrics_path, pred_path, support_path],
    })
}

/// Writes `points.csv`, `rasters/<site>/<covariate>.asc` and `truth.json`.
pub fn write_synthetic(data: &SyntheticData, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let points = dir.join("points.csv");
    data.points.write_csv(&points)?;
    files.push(points);
    for (site, grids) in &data.rasters {
        let sub = dir.join("rasters").join(site);
        std::fs::create_dir_all(&sub)?;
        for (name, g) in grids {
            let p = sub.join(format!("{name}.asc"));
            g.write_ascii(&p)?;
            files.push(p);
        }
    }
    let truth = dir.join("truth.json");
    std::fs::write(&truth, serde_json::to_string_pretty(&data.truth)?)?;
    files.push(truth);
    Ok(files)
}

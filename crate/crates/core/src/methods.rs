//! The four modelling methods over one shared split plan, transfer
//! evaluation between sites and covariate support summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cv::{fit_ensemble, member_predictions, model_average, Ensemble, FitOptions, SplitPlan};
use crate::dataset::PointDataset;
use crate::error::{Error, Result};
use crate::features::{
    assemble_site_blocks, build_design, expand_terms, filter_collinear, BlockMode, CovariateMeta, RawDesign,
    Removal, TermSpec, DEFAULT_MAX_ORDER, DEFAULT_THRESHOLD,
};
use crate::format::fmt_f64;
use crate::lasso::{fit_metrics, FitMetrics};

pub const COMBINED: &str = "combined";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SiteSpecific(String),
    GlobalOnly,
    TwoStage,
    GlobalAndSite,
}

impl Method {
    /// Short label: `m1-<site>`, `m2`, `m3` or `m4`.
    pub fn label(&self) -> String {
        match self {
            Method::SiteSpecific(s) => format!("m1-{}", s.to_lowercase()),
            Method::GlobalOnly => "m2".into(),
            Method::TwoStage => "m3".into(),
            Method::GlobalAndSite => "m4".into(),
        }
    }

    /// Parses a label, matching `m1-<site>` against `sites` case-insensitively.
    pub fn parse(label: &str, sites: &[String]) -> Result<Method> {
        let l = label.trim().to_lowercase();
        match l.as_str() {
            "m2" => Ok(Method::GlobalOnly),
            "m3" => Ok(Method::TwoStage),
            "m4" => Ok(Method::GlobalAndSite),
            _ => {
                let site = l
                    .strip_prefix("m1-")
                    .ok_or_else(|| Error::Config(format!("unknown method `{label}`")))?;
                sites
                    .iter()
                    .find(|s| s.to_lowercase() == site)
                    .map(|s| Method::SiteSpecific(s.clone()))
                    .ok_or_else(|| Error::Site(format!("method `{label}` names a site not in the data")))
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSettings {
    pub max_order: u8,
    pub threshold: f64,
    pub filter_seed: u64,
    pub meta: Vec<CovariateMeta>,
    pub workers: usize,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            max_order: DEFAULT_MAX_ORDER,
            threshold: DEFAULT_THRESHOLD,
            filter_seed: 0,
            meta: Vec::new(),
            workers: 1,
        }
    }
}

impl MethodSettings {
    fn fit(&self) -> FitOptions {
        FitOptions { workers: self.workers }
    }
}

/// Terms left after expansion and collinearity filtering on a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredTerms {
    pub terms: Vec<TermSpec>,
    pub log: Vec<Removal>,
}

pub fn filter_terms(data: &PointDataset, rows: &[usize], settings: &MethodSettings) -> Result<FilteredTerms> {
    let expanded = expand_terms(&data.subset(rows), settings.max_order)?;
    let (kept, log) = filter_collinear(&expanded, &settings.meta, settings.threshold, settings.filter_seed)?;
    Ok(FilteredTerms {
        terms: kept.terms().to_vec(),
        log,
    })
}

/// Evaluates `terms` on every row of `data`.
pub fn design_for(data: &PointDataset, terms: &[TermSpec]) -> Result<RawDesign> {
    build_design(terms, data.covariate_names(), &data.covariate_matrix(), &data.row_sites())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    /// For the two-stage method this is the stage-1 global ensemble.
    pub ensemble: Ensemble,
    /// Residual ensembles by site (two-stage method only).
    pub stage2: BTreeMap<String, Ensemble>,
    pub filter_log: Vec<Removal>,
    /// Model-averaged prediction for every dataset row.
    pub predictions: Vec<f64>,
    /// Stage-1 and stage-2 parts of `predictions` (two-stage method only).
    pub stage1_predictions: Option<Vec<f64>>,
    pub stage2_predictions: Option<Vec<f64>>,
    /// Stage-1 prediction plus stage-2 averaged over members that held the
    /// row out (two-stage method only).
    pub oos_predictions: Option<Vec<f64>>,
    /// Metrics per target: each site id and `combined`.
    pub metrics: BTreeMap<String, FitMetrics>,
    pub oos_metrics: BTreeMap<String, FitMetrics>,
}

fn require_two_sites(data: &PointDataset) -> Result<Vec<String>> {
    let sites = data.sites();
    if sites.len() != 2 {
        return Err(Error::Site(format!(
            "this method needs exactly two sites, found {}",
            sites.len()
        )));
    }
    Ok(sites)
}

fn target_metrics(
    data: &PointDataset,
    predictions: &[f64],
    targets: &[String],
    combined: bool,
) -> Result<BTreeMap<String, FitMetrics>> {
    let y = data.responses();
    let mut out = BTreeMap::new();
    for site in targets {
        let rows = data.site_rows(site);
        let obs: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
        let pred: Vec<f64> = rows.iter().map(|&r| predictions[r]).collect();
        out.insert(site.clone(), fit_metrics(&obs, &pred)?);
    }
    if combined {
        out.insert(COMBINED.to_string(), fit_metrics(&y, predictions)?);
    }
    Ok(out)
}

fn plain_run(
    method: Method,
    ensemble: Ensemble,
    filter_log: Vec<Removal>,
    predictions: Vec<f64>,
    metrics: BTreeMap<String, FitMetrics>,
) -> MethodRun {
    MethodRun {
        method,
        ensemble,
        stage2: BTreeMap::new(),
        filter_log,
        predictions,
        stage1_predictions: None,
        stage2_predictions: None,
        oos_predictions: None,
        metrics,
        oos_metrics: BTreeMap::new(),
    }
}

/// Site-specific ensemble. Metrics on the other site are transfer metrics.
pub fn run_method1(data: &PointDataset, site: &str, plan: &SplitPlan, settings: &MethodSettings) -> Result<MethodRun> {
    let sites = data.sites();
    if !sites.iter().any(|s| s == site) {
        return Err(Error::Site(format!("site `{site}` is not in the data")));
    }
    let filtered = filter_terms(data, &data.site_rows(site), settings)?;
    let design = design_for(data, &filtered.terms)?;
    let method = Method::SiteSpecific(site.to_string());
    let ensemble = fit_ensemble(
        &method.label(),
        &design,
        &data.responses(),
        plan,
        &[site.to_string()],
        settings.fit(),
    )?;
    let predictions = model_average(&ensemble, &design)?;
    let metrics = target_metrics(data, &predictions, &sites, false)?;
    Ok(plain_run(method, ensemble, filtered.log, predictions, metrics))
}

/// Global-effects ensemble on both sites combined.
pub fn run_method2(data: &PointDataset, plan: &SplitPlan, settings: &MethodSettings) -> Result<MethodRun> {
    let sites = require_two_sites(data)?;
    let filtered = filter_terms(data, &(0..data.len()).collect::<Vec<_>>(), settings)?;
    method2_from_terms(data, plan, settings, filtered, &sites)
}

fn method2_from_terms(
    data: &PointDataset,
    plan: &SplitPlan,
    settings: &MethodSettings,
    filtered: FilteredTerms,
    sites: &[String],
) -> Result<MethodRun> {
    let design = design_for(data, &filtered.terms)?;
    let ensemble = fit_ensemble("m2", &design, &data.responses(), plan, sites, settings.fit())?;
    let predictions = model_average(&ensemble, &design)?;
    let metrics = target_metrics(data, &predictions, sites, true)?;
    Ok(plain_run(Method::GlobalOnly, ensemble, filtered.log, predictions, metrics))
}

/// Stage-2 predictions averaged over the members whose validation set holds
/// each row, with weights renormalised over those members.
fn held_out_average(ensemble: &Ensemble, design: &RawDesign, rows: &[usize]) -> Result<Vec<Option<f64>>> {
    let preds = member_predictions(ensemble, design)?;
    let mut num = vec![0.0; design.n_rows()];
    let mut den = vec![0.0; design.n_rows()];
    for ((m, p), w) in ensemble.members.iter().zip(&preds).zip(&ensemble.weights) {
        for &r in &m.validation_rows {
            num[r] += w * p[r];
            den[r] += w;
        }
    }
    let mut out = vec![None; design.n_rows()];
    for &r in rows {
        if den[r] > 0.0 {
            out[r] = Some(num[r] / den[r]);
        }
    }
    Ok(out)
}

/// Two-stage method reusing a completed global-effects run as stage 1.
pub fn run_method3(data: &PointDataset, plan: &SplitPlan, settings: &MethodSettings, m2: &MethodRun) -> Result<MethodRun> {
    let sites = require_two_sites(data)?;
    if m2.method != Method::GlobalOnly {
        return Err(Error::InvalidInput("stage 1 must be a global-effects run".into()));
    }
    let stage1 = m2.predictions.clone();
    let y = data.responses();
    let residuals: Vec<f64> = y.iter().zip(&stage1).map(|(o, p)| o - p).collect();
    let design = design_for(data, &m2.ensemble.terms)?;

    let mut stage2 = BTreeMap::new();
    let mut stage2_pred = vec![0.0; data.len()];
    let mut oos = vec![0.0; data.len()];
    let mut fallback = 0usize;
    for site in &sites {
        let label = format!("m3-stage2-{}", site.to_lowercase());
        let ens = fit_ensemble(&label, &design, &residuals, plan, &[site.clone()], settings.fit())?;
        let rows = data.site_rows(site);
        let full = model_average(&ens, &design)?;
        let held = held_out_average(&ens, &design, &rows)?;
        for &r in &rows {
            stage2_pred[r] = full[r];
            oos[r] = stage1[r]
                + held[r].unwrap_or_else(|| {
                    fallback += 1;
                    full[r]
                });
        }
        stage2.insert(site.clone(), ens);
    }
    if fallback > 0 {
        log::warn!("m3: {fallback} rows never held out; their out-of-sample stage 2 uses all members");
    }
    let predictions: Vec<f64> = stage1.iter().zip(&stage2_pred).map(|(a, b)| a + b).collect();
    let metrics = target_metrics(data, &predictions, &sites, true)?;
    let oos_metrics = target_metrics(data, &oos, &sites, true)?;
    Ok(MethodRun {
        method: Method::TwoStage,
        ensemble: m2.ensemble.clone(),
        stage2,
        filter_log: m2.filter_log.clone(),
        predictions,
        stage1_predictions: Some(stage1),
        stage2_predictions: Some(stage2_pred),
        oos_predictions: Some(oos),
        metrics,
        oos_metrics,
    })
}

/// Joint global and site-specific block design.
pub fn run_method4(data: &PointDataset, plan: &SplitPlan, settings: &MethodSettings) -> Result<MethodRun> {
    require_two_sites(data)?;
    let filtered = filter_terms(data, &(0..data.len()).collect::<Vec<_>>(), settings)?;
    method4_from_terms(data, plan, settings, filtered)
}

fn method4_from_terms(
    data: &PointDataset,
    plan: &SplitPlan,
    settings: &MethodSettings,
    filtered: FilteredTerms,
) -> Result<MethodRun> {
    let sites = require_two_sites(data)?;
    let design = assemble_site_blocks(&design_for(data, &filtered.terms)?, BlockMode::GlobalAndSite)?;
    let ensemble = fit_ensemble("m4", &design, &data.responses(), plan, &sites, settings.fit())?;
    let predictions = model_average(&ensemble, &design)?;
    let metrics = target_metrics(data, &predictions, &sites, true)?;
    Ok(plain_run(Method::GlobalAndSite, ensemble, filtered.log, predictions, metrics))
}

/// Runs the requested methods in order. The global filter and the
/// global-effects run are computed once and shared.
pub fn run_methods(
    data: &PointDataset,
    plan: &SplitPlan,
    settings: &MethodSettings,
    methods: &[Method],
) -> Result<Vec<MethodRun>> {
    let mut global: Option<FilteredTerms> = None;
    let mut m2: Option<MethodRun> = None;
    let all_rows: Vec<usize> = (0..data.len()).collect();
    let global_terms = |global: &mut Option<FilteredTerms>| -> Result<FilteredTerms> {
        if global.is_none() {
            *global = Some(filter_terms(data, &all_rows, settings)?);
        }
        Ok(global.clone().unwrap())
    };
    let mut runs = Vec::new();
    for method in methods {
        let run = match method {
            Method::SiteSpecific(site) => run_method1(data, site, plan, settings)?,
            Method::GlobalOnly | Method::TwoStage => {
                if m2.is_none() {
                    let sites = require_two_sites(data)?;
                    let terms = global_terms(&mut global)?;
                    m2 = Some(method2_from_terms(data, plan, settings, terms, &sites)?);
                }
                let base = m2.as_ref().unwrap();
                if *method == Method::GlobalOnly {
                    base.clone()
                } else {
                    run_method3(data, plan, settings, base)?
                }
            }
            Method::GlobalAndSite => {
                require_two_sites(data)?;
                let terms = global_terms(&mut global)?;
                method4_from_terms(data, plan, settings, terms)?
            }
        };
        log::info!("{}: finished {} members", method, run.ensemble.len());
        runs.push(run);
    }
    Ok(runs)
}

/// Model-averaged predictions of `target` from `ensemble`, using only the
/// source transforms and weights.
pub fn transfer_predictions(ensemble: &Ensemble, target: &PointDataset) -> Result<Vec<f64>> {
    for term in &ensemble.terms {
        for c in term.covariates() {
            if target.covariate_index(c).is_none() {
                return Err(Error::MissingCovariate(c.to_string()));
            }
        }
    }
    model_average(ensemble, &design_for(target, &ensemble.terms)?)
}

pub fn evaluate_transfer(ensemble: &Ensemble, target: &PointDataset) -> Result<FitMetrics> {
    let pred = transfer_predictions(ensemble, target)?;
    fit_metrics(&target.responses(), &pred)
}

/// R's default (type 7) sample quantile of sorted values.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub term: String,
    pub site: String,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    /// This site's interquartile range lies wholly outside the other sites'
    /// range.
    pub extrapolated: bool,
}

/// Per-term, per-site five-number summaries of pooled-standardized values.
pub fn covariate_support_report(data: &PointDataset, terms: &[TermSpec]) -> Result<Vec<SupportSummary>> {
    let design = design_for(data, terms)?;
    let sites = data.sites();
    let n = design.n_rows();
    if n < 2 {
        return Err(Error::InvalidInput("support report needs at least two rows".into()));
    }
    let mut out = Vec::new();
    for (j, term) in terms.iter().enumerate() {
        let col = design.values().column(j);
        let mean = col.sum() / n as f64;
        let norm = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { norm } else { 1.0 };
        let mut per_site = Vec::new();
        for site in &sites {
            let mut v: Vec<f64> = data.site_rows(site).iter().map(|&r| (col[r] - mean) / scale).collect();
            v.sort_by(f64::total_cmp);
            per_site.push(v);
        }
        for (k, site) in sites.iter().enumerate() {
            let v = &per_site[k];
            let (q25, q75) = (quantile_type7(v, 0.25), quantile_type7(v, 0.75));
            let others: Vec<f64> = per_site
                .iter()
                .enumerate()
                .filter(|(o, _)| *o != k)
                .flat_map(|(_, w)| w.iter().copied())
                .collect();
            let extrapolated = !others.is_empty() && {
                let lo = others.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = others.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                q25 > hi || q75 < lo
            };
            out.push(SupportSummary {
                term: term.id(),
                site: site.clone(),
                min: v[0],
                q25,
                median: quantile_type7(v, 0.5),
                q75,
                max: v[v.len() - 1],
                extrapolated,
            });
        }
    }
    Ok(out)
}

pub fn write_support_report<W: Write>(rows: &[SupportSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["term", "site", "min", "q25", "median", "q75", "max", "extrapolated"])?;
    for r in rows {
        w.write_record([
            r.term.clone(),
            r.site.clone(),
            fmt_f64(r.min),
            fmt_f64(r.q25),
            fmt_f64(r.median),
            fmt_f64(r.q75),
            fmt_f64(r.max),
            r.extrapolated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Targets by row, methods by column pair (`<label>_r2`, `<label>_rmse`).
/// The two-stage method adds `m3-oos` columns. Missing cells read `NA`.
pub fn write_metrics_table<W: Write>(runs: &[MethodRun], sites: &[String], writer: W) -> Result<()> {
    let mut columns: Vec<(String, &BTreeMap<String, FitMetrics>)> = Vec::new();
    for run in runs {
        columns.push((run.method.label(), &run.metrics));
        if run.method == Method::TwoStage {
            columns.push(("m3-oos".into(), &run.oos_metrics));
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["target".to_string()];
    for (label, _) in &columns {
        header.push(format!("{label}_r2"));
        header.push(format!("{label}_rmse"));
    }
    w.write_record(&header)?;
    let mut targets = sites.to_vec();
    targets.push(COMBINED.into());
    for target in targets {
        let mut row = vec![target.clone()];
        for (_, metrics) in &columns {
            match metrics.get(&target) {
                Some(m) => {
                    row.push(fmt_f64(m.r_squared));
                    row.push(fmt_f64(m.rmse));
                }
                None => {
                    row.push("NA".into());
                    row.push("NA".into());
                }
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per observation with observed, predicted and residual values.
pub fn write_residuals<W: Write>(run: &MethodRun, data: &PointDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let two_stage = run.stage1_predictions.is_some();
    let mut header = vec!["row", "site", "x", "y", "observed", "predicted", "residual"];
    if two_stage {
        header.extend(["stage1", "stage2", "predicted_oos", "residual_oos"]);
    }
    w.write_record(&header)?;
    for (i, r) in data.records().iter().enumerate() {
        let p = run.predictions[i];
        let mut row = vec![
            i.to_string(),
            r.site.clone(),
            fmt_f64(r.x),
            fmt_f64(r.y),
            fmt_f64(r.response),
            fmt_f64(p),
            fmt_f64(r.response - p),
        ];
        if let (Some(s1), Some(s2), Some(oos)) = (&run.stage1_predictions, &run.stage2_predictions, &run.oos_predictions) {
            row.push(fmt_f64(s1[i]));
            row.push(fmt_f64(s2[i]));
            row.push(fmt_f64(oos[i]));
            row.push(fmt_f64(r.response - oos[i]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

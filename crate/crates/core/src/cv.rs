//! Repeated random train/validation splits, per-split path fitting and knot
//! selection, inverse-SSE model averaging and selection tallies.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::PointDataset;
use crate::error::{Error, Result};
use crate::features::{RawDesign, TermSpec};
use crate::lasso::{fit_lasso_path_with, CollinearPolicy, LassoPath, SelectedModel, StandardizedMatrix};
use crate::standardize::{apply_transform, fit_transform, StandardizationTransform};

pub const DEFAULT_SPLITS: usize = 500;
pub const MAX_SPLIT_ATTEMPTS: usize = 1_000_000;

/// One site's share of a split, as dataset row indices in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub sites: BTreeMap<String, SiteSplit>,
}

impl Split {
    fn union(&self, sites: &[String], pick: impl Fn(&SiteSplit) -> &[usize]) -> Result<Vec<usize>> {
        let mut rows = Vec::new();
        for s in sites {
            let part = self
                .sites
                .get(s)
                .ok_or_else(|| Error::Site(format!("split plan does not cover site `{s}`")))?;
            rows.extend_from_slice(pick(part));
        }
        rows.sort_unstable();
        Ok(rows)
    }

    /// Training rows of the listed sites combined.
    pub fn train_rows(&self, sites: &[String]) -> Result<Vec<usize>> {
        self.union(sites, |p| &p.train)
    }

    pub fn validation_rows(&self, sites: &[String]) -> Result<Vec<usize>> {
        self.union(sites, |p| &p.validation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub quotas: BTreeMap<String, usize>,
    pub splits: Vec<Split>,
}

impl SplitPlan {
    pub fn n_splits(&self) -> usize {
        self.splits.len()
    }

    pub fn sites(&self) -> Vec<String> {
        self.quotas.keys().cloned().collect()
    }

    /// Content hash of the plan.
    pub fn id(&self) -> String {
        let json = serde_json::to_vec(self).expect("split plan serializes");
        hex::encode(&Sha256::digest(&json)[..12])
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["split", "site", "row", "role"])?;
        for (i, split) in self.splits.iter().enumerate() {
            for (site, part) in &split.sites {
                for (rows, role) in [(&part.train, "train"), (&part.validation, "validation")] {
                    for r in rows {
                        w.write_record([i.to_string(), site.clone(), r.to_string(), role.to_string()])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Returns true when C(n, k) ≥ target.
fn binomial_at_least(n: usize, k: usize, target: usize) -> bool {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c >= target as u128 {
            return true;
        }
    }
    c >= target as u128
}

/// Draws `n_splits` splits whose per-site training sets are pairwise
/// distinct. Every site in `data` needs a quota.
pub fn make_splits(
    data: &PointDataset,
    n_splits: usize,
    train_per_site: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<SplitPlan> {
    if n_splits == 0 {
        return Err(Error::Config("n_splits must be positive".into()));
    }
    let sites = data.sites();
    if sites.is_empty() {
        return Err(Error::InvalidInput("dataset has no rows".into()));
    }
    let mut rows_of = BTreeMap::new();
    for site in &sites {
        let quota = *train_per_site
            .get(site)
            .ok_or_else(|| Error::Config(format!("no training quota for site `{site}`")))?;
        let rows = data.site_rows(site);
        if quota < 3 || quota >= rows.len() {
            return Err(Error::InfeasibleSplits(format!(
                "site `{site}` has {} rows; the training quota must lie in [3, {}], got {quota}",
                rows.len(),
                rows.len() - 1
            )));
        }
        if !binomial_at_least(rows.len(), quota, n_splits) {
            return Err(Error::InfeasibleSplits(format!(
                "site `{site}`: C({}, {quota}) < {n_splits} distinct training sets",
                rows.len()
            )));
        }
        rows_of.insert(site.clone(), rows);
    }
    if let Some(extra) = train_per_site.keys().find(|s| !rows_of.contains_key(*s)) {
        return Err(Error::Site(format!("quota given for unknown site `{extra}`")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: BTreeMap<&str, HashSet<Vec<usize>>> = BTreeMap::new();
    let mut splits = Vec::with_capacity(n_splits);
    let mut attempts = 0usize;
    for _ in 0..n_splits {
        let mut parts = BTreeMap::new();
        for (site, rows) in &rows_of {
            let quota = train_per_site[site];
            let used = seen.entry(site.as_str()).or_default();
            let train = loop {
                attempts += 1;
                if attempts > MAX_SPLIT_ATTEMPTS {
                    return Err(Error::InfeasibleSplits(format!(
                        "gave up after {MAX_SPLIT_ATTEMPTS} attempts to draw distinct splits"
                    )));
                }
                let mut pick = rand::seq::index::sample(&mut rng, rows.len(), quota).into_vec();
                pick.sort_unstable();
                if used.insert(pick.clone()) {
                    break pick;
                }
            };
            let mut in_train = vec![false; rows.len()];
            for &k in &train {
                in_train[k] = true;
            }
            parts.insert(
                site.clone(),
                SiteSplit {
                    train: train.iter().map(|&k| rows[k]).collect(),
                    validation: (0..rows.len()).filter(|&k| !in_train[k]).map(|k| rows[k]).collect(),
                },
            );
        }
        splits.push(Split { sites: parts });
    }
    Ok(SplitPlan {
        seed,
        quotas: train_per_site.clone(),
        splits,
    })
}

fn knot_predictions(path: &LassoPath, index: usize, x: &StandardizedMatrix) -> Vec<f64> {
    let knot = &path.knots[index];
    let v = x.values();
    (0..x.n_rows())
        .map(|i| {
            knot.active
                .iter()
                .zip(&knot.coefficients)
                .fold(path.intercept, |acc, (&j, &b)| acc + b * v[[i, j]])
        })
        .collect()
}

/// Picks the knot with the smallest validation SSE, preferring the smaller
/// subset on exact ties.
pub fn select_knot(path: &LassoPath, x_valid: &StandardizedMatrix, y_valid: &[f64]) -> Result<SelectedModel> {
    if x_valid.transform_id() != path.transform_id() {
        return Err(Error::TransformMismatch {
            expected: path.transform_id().to_string(),
            found: x_valid.transform_id().to_string(),
        });
    }
    if x_valid.column_ids() != path.column_ids() {
        return Err(Error::InvalidInput("validation columns differ from the training columns".into()));
    }
    if y_valid.len() != x_valid.n_rows() {
        return Err(Error::LengthMismatch {
            expected: x_valid.n_rows(),
            found: y_valid.len(),
        });
    }
    if y_valid.is_empty() {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for k in 0..path.knots.len() {
        let pred = knot_predictions(path, k, x_valid);
        let sse: f64 = y_valid.iter().zip(&pred).map(|(y, p)| (y - p).powi(2)).sum();
        let size = path.knots[k].subset_size();
        let better = match best {
            None => true,
            Some((b_sse, b_size, _)) => sse < b_sse || (sse == b_sse && size < b_size),
        };
        if better {
            best = Some((sse, size, k));
        }
    }
    let (sse, _, k) = best.ok_or_else(|| Error::InvalidInput("path has no knots".into()))?;
    Ok(path.model_at(k, sse))
}

/// Inverse-SSE weights. When some SSEs are exactly zero those models share
/// the weight equally.
pub fn ensemble_weights(validation_sses: &[f64]) -> Result<Vec<f64>> {
    if validation_sses.is_empty() {
        return Err(Error::InvalidInput("no validation errors to weight".into()));
    }
    if let Some(bad) = validation_sses.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::InvalidInput(format!("invalid validation SSE {bad}")));
    }
    let zeros = validation_sses.iter().filter(|s| **s == 0.0).count();
    if zeros > 0 {
        log::warn!("{zeros} models have zero validation SSE; they share the ensemble weight");
        let w = 1.0 / zeros as f64;
        return Ok(validation_sses.iter().map(|s| if *s == 0.0 { w } else { 0.0 }).collect());
    }
    let inv: Vec<f64> = validation_sses.iter().map(|s| 1.0 / s).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub split: usize,
    pub transform: StandardizationTransform,
    pub model: SelectedModel,
    /// Validation residuals `y − ŷ` in validation-row order.
    pub validation_errors: Vec<f64>,
    pub validation_rows: Vec<usize>,
    pub max_steps_reached: bool,
    /// Column that ended this member's path early, if any.
    #[serde(default)]
    pub collinear_stop: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub label: String,
    pub sites: Vec<String>,
    pub terms: Vec<TermSpec>,
    pub plan_id: String,
    pub members: Vec<EnsembleMember>,
    pub weights: Vec<f64>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Builds an ensemble from prepared members, computing the weights.
    pub fn from_members(
        label: impl Into<String>,
        sites: Vec<String>,
        terms: Vec<TermSpec>,
        plan_id: impl Into<String>,
        members: Vec<EnsembleMember>,
    ) -> Result<Self> {
        let sses: Vec<f64> = members.iter().map(|m| m.model.validation_sse).collect();
        let weights = ensemble_weights(&sses)?;
        Ok(Self {
            label: label.into(),
            sites,
            terms,
            plan_id: plan_id.into(),
            members,
            weights,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: Ensemble = serde_json::from_str(text)?;
        if e.weights.len() != e.members.len() {
            return Err(Error::InvalidInput("ensemble weights and members differ in length".into()));
        }
        if let Some(m) = e.members.iter().find(|m| !m.transform.verify()) {
            return Err(Error::InvalidInput(format!(
                "member for split {} has a corrupted transform",
                m.split
            )));
        }
        Ok(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitOptions {
    pub workers: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

fn fit_one(design: &RawDesign, response: &[f64], split: &Split, index: usize, sites: &[String]) -> Result<EnsembleMember> {
    let train = split.train_rows(sites)?;
    let valid = split.validation_rows(sites)?;
    let (x_train, transform) = fit_transform(&design.select_rows(&train))?;
    let y_train: Vec<f64> = train.iter().map(|&r| response[r]).collect();
    let path = fit_lasso_path_with(&x_train, &y_train, CollinearPolicy::Stop)?;
    let x_valid = apply_transform(&design.select_rows(&valid), &transform)?;
    let y_valid: Vec<f64> = valid.iter().map(|&r| response[r]).collect();
    if let Some(c) = &path.collinear_stop {
        let last = path.knots.last().map_or(0, |k| k.subset_size());
        log::debug!("split {index}: path ended at collinear column {c} with {last} active");
    }
    let model = select_knot(&path, &x_valid, &y_valid)?;
    let pred = crate::lasso::predict(&model, &x_valid)?;
    Ok(EnsembleMember {
        split: index,
        transform,
        model,
        validation_errors: y_valid.iter().zip(&pred).map(|(y, p)| y - p).collect(),
        validation_rows: valid,
        max_steps_reached: path.max_steps_reached,
        collinear_stop: path.collinear_stop,
    })
}

/// Fits one member per split on the rows of `sites`. `design` and
/// `response` are indexed by dataset row.
pub fn fit_ensemble(
    label: &str,
    design: &RawDesign,
    response: &[f64],
    plan: &SplitPlan,
    sites: &[String],
    options: FitOptions,
) -> Result<Ensemble> {
    if response.len() != design.n_rows() {
        return Err(Error::LengthMismatch {
            expected: design.n_rows(),
            found: response.len(),
        });
    }
    if let Some(i) = response.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("response at row {i}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<EnsembleMember>> = pool.install(|| {
        plan.splits
            .par_iter()
            .enumerate()
            .map(|(i, split)| {
                fit_one(design, response, split, i, sites).map_err(|e| Error::Split {
                    split: i,
                    source: Box::new(e),
                })
            })
            .collect()
    });
    let members = results.into_iter().collect::<Result<Vec<_>>>()?;
    let capped = members.iter().filter(|m| m.max_steps_reached).count();
    if capped > 0 {
        log::warn!("{label}: {capped} paths stopped at the step cap");
    }
    let truncated = members.iter().filter(|m| m.collinear_stop.is_some()).count();
    if truncated > 0 {
        log::info!("{label}: {truncated} paths ended early at a collinear column");
    }
    Ensemble::from_members(label, sites.to_vec(), design.terms().to_vec(), plan.id(), members)
}

/// Per-member predictions for the rows of `x_new_raw`, each member using its
/// own training transform.
pub fn member_predictions(ensemble: &Ensemble, x_new_raw: &RawDesign) -> Result<Vec<Vec<f64>>> {
    let index: HashMap<String, usize> = x_new_raw
        .column_ids()
        .into_iter()
        .enumerate()
        .map(|(j, id)| (id, j))
        .collect();
    let sites = x_new_raw.row_sites();
    let values = x_new_raw.values();
    ensemble
        .members
        .iter()
        .map(|m| {
            let mut cols = Vec::with_capacity(m.model.coefficients.len());
            let mut missing = Vec::new();
            for (id, &b) in &m.model.coefficients {
                let ct = m.transform.column(id).ok_or_else(|| Error::Split {
                    split: m.split,
                    source: Box::new(Error::MissingColumns(vec![id.clone()])),
                })?;
                match index.get(id) {
                    Some(&j) => cols.push((j, ct, b)),
                    None => missing.push(id.clone()),
                }
            }
            if !missing.is_empty() {
                return Err(Error::Split {
                    split: m.split,
                    source: Box::new(Error::MissingColumns(missing)),
                });
            }
            Ok((0..x_new_raw.n_rows())
                .map(|i| {
                    cols.iter().fold(m.model.intercept, |acc, (j, ct, b)| {
                        acc + b * ct.apply(values[[i, *j]], &sites[i])
                    })
                })
                .collect())
        })
        .collect()
}

/// Weighted average of the member predictions.
pub fn model_average(ensemble: &Ensemble, x_new_raw: &RawDesign) -> Result<Vec<f64>> {
    let preds = member_predictions(ensemble, x_new_raw)?;
    let mut out = vec![0.0; x_new_raw.n_rows()];
    for (p, w) in preds.iter().zip(&ensemble.weights) {
        for (o, v) in out.iter_mut().zip(p) {
            *o += w * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFrequencyTable {
    pub n_models: usize,
    pub counts: BTreeMap<String, usize>,
    pub subset_sizes: BTreeMap<usize, usize>,
}

impl SelectionFrequencyTable {
    /// Terms by descending count, then id.
    pub fn ranked(&self) -> Vec<(String, usize)> {
        let mut v: Vec<(String, usize)> = self.counts.iter().map(|(k, c)| (k.clone(), *c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }

    pub fn write_counts<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["term", "count"])?;
        for (term, count) in self.ranked() {
            w.write_record([term, count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_subset_sizes<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subset_size", "count"])?;
        for (size, count) in &self.subset_sizes {
            w.write_record([size.to_string(), count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn tally_selection(ensemble: &Ensemble) -> SelectionFrequencyTable {
    let mut counts: BTreeMap<String, usize> = ensemble.terms.iter().map(|t| (t.id(), 0)).collect();
    let mut subset_sizes = BTreeMap::new();
    for m in &ensemble.members {
        let mut size = 0;
        for (id, b) in &m.model.coefficients {
            if *b != 0.0 {
                *counts.entry(id.clone()).or_insert(0) += 1;
                size += 1;
            }
        }
        *subset_sizes.entry(size).or_insert(0) += 1;
    }
    SelectionFrequencyTable {
        n_models: ensemble.members.len(),
        counts,
        subset_sizes,
    }
}

//! Term expansion, collinearity filtering and site-block assembly.
//!
//! Raw covariates expand into monomials of orders `1..=max_order` and all
//! pairwise products of linear terms. Highly correlated pairs are thinned by
//! a preference hierarchy before modelling, and the global+site design is
//! formed by stacking one global copy with one zero-masked copy per site.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PointDataset;
use crate::error::{Error, Result};
use crate::format::fmt_f64;

/// Rank assigned to covariates with no hierarchy metadata.
pub const DEFAULT_RANK: u8 = 6;

/// Default maximum polynomial order.
pub const DEFAULT_MAX_ORDER: u8 = 4;

/// Default maximum permitted |r| between retained terms.
pub const DEFAULT_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Site(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Polynomial { base: String, order: u8 },
    Interaction { a: String, b: String },
}

/// A symbolic design column: `base^order` or `a·b`, optionally restricted to
/// the rows of one site.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct TermSpec {
    pub kind: TermKind,
    pub scope: Scope,
}

impl TermSpec {
    pub fn polynomial(base: impl Into<String>, order: u8) -> Self {
        Self {
            kind: TermKind::Polynomial {
                base: base.into(),
                order,
            },
            scope: Scope::Global,
        }
    }

    pub fn interaction(a: impl Into<String>, b: impl Into<String>) -> Self {
        Self {
            kind: TermKind::Interaction {
                a: a.into(),
                b: b.into(),
            },
            scope: Scope::Global,
        }
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn global(&self) -> TermSpec {
        self.clone().with_scope(Scope::Global)
    }

    /// Stable textual id: `ECA`, `ECA^2`, `ECA:NDVI`, with `@B1` appended
    /// for site-scoped terms.
    pub fn id(&self) -> String {
        self.to_string()
    }

    /// Parses the textual id produced by [`TermSpec::id`].
    pub fn parse(id: &str) -> Result<TermSpec> {
        let bad = || Error::InvalidInput(format!("malformed term id `{id}`"));
        let (body, scope) = match id.rsplit_once('@') {
            Some((b, s)) if !s.is_empty() => (b, Scope::Site(s.to_string())),
            Some(_) => return Err(bad()),
            None => (id, Scope::Global),
        };
        let kind = if let Some((a, b)) = body.split_once(':') {
            if a.is_empty() || b.is_empty() || a == b {
                return Err(bad());
            }
            TermKind::Interaction {
                a: a.to_string(),
                b: b.to_string(),
            }
        } else if let Some((base, order)) = body.rsplit_once('^') {
            let order: u8 = order.parse().map_err(|_| bad())?;
            if base.is_empty() || order == 0 {
                return Err(bad());
            }
            TermKind::Polynomial {
                base: base.to_string(),
                order,
            }
        } else if body.is_empty() {
            return Err(bad());
        } else {
            TermKind::Polynomial {
                base: body.to_string(),
                order: 1,
            }
        };
        Ok(TermSpec { kind, scope })
    }

    pub fn covariates(&self) -> Vec<&str> {
        match &self.kind {
            TermKind::Polynomial { base, .. } => vec![base.as_str()],
            TermKind::Interaction { a, b } => vec![a.as_str(), b.as_str()],
        }
    }

    pub fn is_interaction(&self) -> bool {
        matches!(self.kind, TermKind::Interaction { .. })
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, TermKind::Polynomial { order: 1, .. })
    }

    /// Value of the term for one row. Site-scoped terms are exactly zero on
    /// rows of other sites.
    pub fn evaluate(&self, value_of: impl Fn(&str) -> f64, row_site: &str) -> f64 {
        if let Scope::Site(s) = &self.scope {
            if s != row_site {
                return 0.0;
            }
        }
        match &self.kind {
            TermKind::Polynomial { base, order } => value_of(base).powi(*order as i32),
            TermKind::Interaction { a, b } => value_of(a) * value_of(b),
        }
    }
}

impl From<TermSpec> for String {
    fn from(t: TermSpec) -> String {
        t.id()
    }
}

impl TryFrom<String> for TermSpec {
    type Error = Error;

    fn try_from(id: String) -> Result<TermSpec> {
        TermSpec::parse(&id)
    }
}

impl fmt::Display for TermSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            TermKind::Polynomial { base, order: 1 } => write!(f, "{base}")?,
            TermKind::Polynomial { base, order } => write!(f, "{base}^{order}")?,
            TermKind::Interaction { a, b } => write!(f, "{a}:{b}")?,
        }
        if let Scope::Site(s) = &self.scope {
            write!(f, "@{s}")?;
        }
        Ok(())
    }
}

/// Preference metadata for one raw covariate; rank 1 is retained first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMeta {
    pub name: String,
    pub hierarchy_rank: u8,
    #[serde(default)]
    pub resolution_note: String,
}

impl CovariateMeta {
    pub fn new(name: impl Into<String>, hierarchy_rank: u8) -> Self {
        Self {
            name: name.into(),
            hierarchy_rank,
            resolution_note: String::new(),
        }
    }
}

/// Numeric design before standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDesign {
    values: Array2<f64>,
    terms: Vec<TermSpec>,
    row_sites: Vec<String>,
}

impl RawDesign {
    pub fn new(values: Array2<f64>, terms: Vec<TermSpec>, row_sites: Vec<String>) -> Result<Self> {
        if values.ncols() != terms.len() {
            return Err(Error::LengthMismatch {
                expected: values.ncols(),
                found: terms.len(),
            });
        }
        if values.nrows() != row_sites.len() {
            return Err(Error::LengthMismatch {
                expected: values.nrows(),
                found: row_sites.len(),
            });
        }
        let unique: BTreeSet<&TermSpec> = terms.iter().collect();
        if unique.len() != terms.len() {
            return Err(Error::InvalidInput("duplicate terms in design".into()));
        }
        if let Some(((i, j), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("design row {i}, term `{}`", terms[j])));
        }
        Ok(Self {
            values,
            terms,
            row_sites,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn terms(&self) -> &[TermSpec] {
        &self.terms
    }

    pub fn row_sites(&self) -> &[String] {
        &self.row_sites
    }

    pub fn column_ids(&self) -> Vec<String> {
        self.terms.iter().map(TermSpec::id).collect()
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> RawDesign {
        RawDesign {
            values: self.values.select(Axis(0), rows),
            terms: self.terms.clone(),
            row_sites: rows.iter().map(|&i| self.row_sites[i].clone()).collect(),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> RawDesign {
        RawDesign {
            values: self.values.select(Axis(1), cols),
            terms: cols.iter().map(|&j| self.terms[j].clone()).collect(),
            row_sites: self.row_sites.clone(),
        }
    }
}

/// Monomials of orders `1..=max_order` for each covariate (grouped by
/// covariate, then order) followed by pairwise linear interactions in
/// lexicographic pair order.
pub fn expansion_terms(covariates: &[String], max_order: u8) -> Vec<TermSpec> {
    let mut terms = Vec::with_capacity(
        covariates.len() * max_order as usize + covariates.len() * covariates.len().saturating_sub(1) / 2,
    );
    for name in covariates {
        for order in 1..=max_order {
            terms.push(TermSpec::polynomial(name.clone(), order));
        }
    }
    for (i, a) in covariates.iter().enumerate() {
        for b in &covariates[i + 1..] {
            terms.push(TermSpec::interaction(a.clone(), b.clone()));
        }
    }
    terms
}

/// Evaluates `terms` on a rows × covariates matrix.
pub fn build_design(
    terms: &[TermSpec],
    covariate_names: &[String],
    covariates: &Array2<f64>,
    row_sites: &[String],
) -> Result<RawDesign> {
    if covariates.ncols() != covariate_names.len() {
        return Err(Error::LengthMismatch {
            expected: covariate_names.len(),
            found: covariates.ncols(),
        });
    }
    let index: HashMap<&str, usize> = covariate_names
        .iter()
        .enumerate()
        .map(|(j, n)| (n.as_str(), j))
        .collect();
    for term in terms {
        for c in term.covariates() {
            if !index.contains_key(c) {
                return Err(Error::MissingCovariate(c.to_string()));
            }
        }
    }
    let mut needed: Vec<usize> = terms
        .iter()
        .flat_map(|t| t.covariates().into_iter().map(|c| index[c]))
        .collect();
    needed.sort_unstable();
    needed.dedup();
    for &j in &needed {
        if let Some(i) = covariates.column(j).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "row {i}, covariate `{}`",
                covariate_names[j]
            )));
        }
    }
    let mut values = Array2::zeros((covariates.nrows(), terms.len()));
    for (i, mut row) in values.rows_mut().into_iter().enumerate() {
        let cov = covariates.row(i);
        for (j, term) in terms.iter().enumerate() {
            row[j] = term.evaluate(|name| cov[index[name]], &row_sites[i]);
        }
    }
    RawDesign::new(values, terms.to_vec(), row_sites.to_vec())
}

/// Full polynomial/interaction expansion of a dataset's covariates.
pub fn expand_terms(data: &PointDataset, max_order: u8) -> Result<RawDesign> {
    if data.covariate_names().is_empty() {
        return Err(Error::InvalidInput("no covariates to expand".into()));
    }
    if data.len() < 2 {
        return Err(Error::InvalidInput("expansion needs at least two observations".into()));
    }
    if max_order == 0 {
        return Err(Error::InvalidInput("polynomial order must be at least 1".into()));
    }
    let terms = expansion_terms(data.covariate_names(), max_order);
    build_design(
        &terms,
        data.covariate_names(),
        &data.covariate_matrix(),
        &data.row_sites(),
    )
}

/// Which rule of the preference hierarchy decided a removal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleStep {
    /// Column had zero variance over the filtering rows.
    Constant,
    /// Retained term's covariates outrank the discarded term's; the value is
    /// the retained rank (table steps 1–10).
    Hierarchy(u8),
    /// Random choice between linear terms of equally ranked covariates.
    RandomCovariate,
    /// Single-term polynomial retained over an interaction.
    PolynomialOverInteraction,
    /// Lower polynomial order retained over higher.
    LowerOrder,
    /// Remaining ties broken at random.
    Random,
}

impl RuleStep {
    pub fn label(&self) -> String {
        match self {
            RuleStep::Constant => "constant".into(),
            RuleStep::Hierarchy(r) => r.to_string(),
            RuleStep::RandomCovariate => "11".into(),
            RuleStep::PolynomialOverInteraction => "13".into(),
            RuleStep::LowerOrder => "14".into(),
            RuleStep::Random => "15".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub discarded: String,
    /// Empty for constant columns.
    pub retained: String,
    pub abs_r: f64,
    pub rule_step: RuleStep,
}

pub fn write_removal_log<W: Write>(log: &[Removal], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["discarded_term", "retained_term", "abs_r", "rule_step"])?;
    for r in log {
        w.write_record([
            r.discarded.clone(),
            r.retained.clone(),
            fmt_f64(r.abs_r),
            r.rule_step.label(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Hierarchy rank of a term: the least preferred of its covariates.
fn term_rank(term: &TermSpec, ranks: &HashMap<&str, u8>) -> u8 {
    term.covariates()
        .into_iter()
        .map(|c| ranks.get(c).copied().unwrap_or(DEFAULT_RANK))
        .max()
        .unwrap_or(DEFAULT_RANK)
}

fn term_order(term: &TermSpec) -> u8 {
    match term.kind {
        TermKind::Polynomial { order, .. } => order,
        TermKind::Interaction { .. } => 2,
    }
}

/// Centred, unit-norm copies of each column, or `None` for constants.
fn normalized_columns(values: &Array2<f64>) -> Vec<Option<Vec<f64>>> {
    values
        .columns()
        .into_iter()
        .map(|col| {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let scale = col.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let centered: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
            if scale == 0.0 || norm <= 1e-12 * scale {
                None
            } else {
                Some(centered.into_iter().map(|v| v / norm).collect())
            }
        })
        .collect()
}

/// All column pairs `(i, j, |r|)` with `i < j` and `|r| > threshold`.
pub fn violating_pairs(values: &Array2<f64>, threshold: f64) -> Vec<(usize, usize, f64)> {
    let cols = normalized_columns(values);
    let mut pairs: Vec<(usize, usize, f64)> = (0..cols.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let cols = &cols;
            (i + 1..cols.len()).filter_map(move |j| {
                let (a, b) = (cols[i].as_ref()?, cols[j].as_ref()?);
                let r: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                (r.abs() > threshold).then_some((i, j, r.abs().min(1.0)))
            })
        })
        .collect();
    pairs.sort_by(|x, y| {
        y.2.partial_cmp(&x.2)
            .unwrap_or(Ordering::Equal)
            .then((x.0, x.1).cmp(&(y.0, y.1)))
    });
    pairs
}

/// Removes terms until no retained pair has Pearson |r| above `threshold`.
///
/// Constant columns go first. Violating pairs are then visited from the
/// largest |r| down; a discarded column drops out of every later pair. Within
/// a pair the retained term is chosen by covariate rank, then polynomial over
/// interaction, then lower order, then a draw from `seed`.
pub fn filter_collinear(
    design: &RawDesign,
    meta: &[CovariateMeta],
    threshold: f64,
    seed: u64,
) -> Result<(RawDesign, Vec<Removal>)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "correlation threshold must lie in (0, 1], got {threshold}"
        )));
    }
    for m in meta {
        if !(1..=10).contains(&m.hierarchy_rank) {
            return Err(Error::InvalidInput(format!(
                "hierarchy rank for `{}` must be in 1..=10",
                m.name
            )));
        }
    }
    let ranks: HashMap<&str, u8> = meta.iter().map(|m| (m.name.as_str(), m.hierarchy_rank)).collect();
    let terms = design.terms();
    let mut alive = vec![true; terms.len()];
    let mut log = Vec::new();

    for (j, col) in normalized_columns(design.values()).iter().enumerate() {
        if col.is_none() {
            alive[j] = false;
            log.push(Removal {
                discarded: terms[j].id(),
                retained: String::new(),
                abs_r: 0.0,
                rule_step: RuleStep::Constant,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, j, r) in violating_pairs(design.values(), threshold) {
        if !alive[i] || !alive[j] {
            continue;
        }
        let (ti, tj) = (&terms[i], &terms[j]);
        let (ri, rj) = (term_rank(ti, &ranks), term_rank(tj, &ranks));
        let (keep_i, step) = if ri != rj {
            (ri < rj, RuleStep::Hierarchy(ri.min(rj)))
        } else if ti.is_interaction() != tj.is_interaction() {
            (!ti.is_interaction(), RuleStep::PolynomialOverInteraction)
        } else if !ti.is_interaction() && term_order(ti) != term_order(tj) {
            (term_order(ti) < term_order(tj), RuleStep::LowerOrder)
        } else if ti.is_linear() && tj.is_linear() {
            (rng.random_bool(0.5), RuleStep::RandomCovariate)
        } else {
            (rng.random_bool(0.5), RuleStep::Random)
        };
        let (keep, drop) = if keep_i { (i, j) } else { (j, i) };
        alive[drop] = false;
        log.push(Removal {
            discarded: terms[drop].id(),
            retained: terms[keep].id(),
            abs_r: r,
            rule_step: step,
        });
    }

    let kept: Vec<usize> = (0..terms.len()).filter(|&j| alive[j]).collect();
    if kept.is_empty() {
        return Err(Error::EmptyDesign("every term was removed by the collinearity filter".into()));
    }
    Ok((design.select_columns(&kept), log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    GlobalOnly,
    GlobalAndSite,
}

/// Global terms followed by one site-scoped copy per site (sorted site
/// order).
pub fn site_block_terms(global: &[TermSpec], sites: &[String]) -> Vec<TermSpec> {
    let mut terms = global.to_vec();
    for s in sites {
        terms.extend(global.iter().map(|t| t.global().with_scope(Scope::Site(s.clone()))));
    }
    terms
}

/// Builds the global-only or global+site block design from a global design.
pub fn assemble_site_blocks(design: &RawDesign, mode: BlockMode) -> Result<RawDesign> {
    let sites: Vec<String> = design
        .row_sites()
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .cloned()
        .collect();
    match mode {
        BlockMode::GlobalOnly => {
            if sites.is_empty() {
                return Err(Error::Site("design has no rows".into()));
            }
            Ok(design.clone())
        }
        BlockMode::GlobalAndSite => {
            if sites.len() != 2 {
                return Err(Error::Site(format!(
                    "global+site blocks need exactly two sites, found {}",
                    sites.len()
                )));
            }
            if let Some(t) = design.terms().iter().find(|t| t.scope != Scope::Global) {
                return Err(Error::InvalidInput(format!("term `{t}` is already site-scoped")));
            }
            let w = design.n_cols();
            let n = design.n_rows();
            let mut values = Array2::zeros((n, 3 * w));
            for i in 0..n {
                let block = 1 + sites.iter().position(|s| *s == design.row_sites()[i]).unwrap();
                for j in 0..w {
                    let v = design.values()[[i, j]];
                    values[[i, j]] = v;
                    values[[i, block * w + j]] = v;
                }
            }
            RawDesign::new(
                values,
                site_block_terms(design.terms(), &sites),
                design.row_sites().to_vec(),
            )
        }
    }
}

/// Number of columns produced by [`expansion_terms`].
pub fn expansion_width(n_covariates: usize, max_order: u8) -> usize {
    n_covariates * max_order as usize + n_covariates * n_covariates.saturating_sub(1) / 2
}

/// Groups retained term ids by covariate for quick reporting.
pub fn terms_by_covariate(terms: &[TermSpec]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for t in terms {
        for c in t.covariates() {
            out.entry(c.to_string()).or_default().push(t.id());
        }
    }
    out
}

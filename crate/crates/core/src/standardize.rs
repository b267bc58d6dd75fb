//! Training-set recentring and rescaling, replayed onto validation sets and
//! raster pixels with the training constants.
//!
//! Each retained column is shifted by its training mean and divided by the L2
//! norm (not the standard deviation) of the centred training values. Columns
//! scoped to a site are summarised over that site's training rows only and
//! only those rows are transformed; rows of the other site stay exactly 0.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{RawDesign, Scope, TermSpec};
use crate::format::fmt_f64;
use crate::lasso::StandardizedMatrix;

/// Norms at or below this fraction of the column's largest magnitude count
/// as zero.
pub const ZERO_NORM_TOL: f64 = 1e-12;

const AUDIT_HEADER: &str = "# sitelasso transform audit v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub term: TermSpec,
    pub mean: f64,
    pub norm: f64,
}

impl ColumnTransform {
    /// Transforms one raw value from a row of `row_site`.
    #[inline]
    pub fn apply(&self, value: f64, row_site: &str) -> f64 {
        match &self.term.scope {
            Scope::Site(s) if s != row_site => 0.0,
            _ => (value - self.mean) / self.norm,
        }
    }

    #[inline]
    pub fn invert(&self, value: f64, row_site: &str) -> f64 {
        match &self.term.scope {
            Scope::Site(s) if s != row_site => 0.0,
            _ => value * self.norm + self.mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationTransform {
    id: String,
    columns: Vec<ColumnTransform>,
    dropped: Vec<String>,
    training_rows: usize,
}

impl StandardizationTransform {
    fn from_parts(columns: Vec<ColumnTransform>, dropped: Vec<String>, training_rows: usize) -> Self {
        let mut t = Self {
            id: String::new(),
            columns,
            dropped,
            training_rows,
        };
        t.id = t.content_id();
        t
    }

    /// Content hash of the transform constants.
    fn content_id(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.training_rows as u64).to_le_bytes());
        for c in &self.columns {
            h.update(c.term.id().as_bytes());
            h.update([0]);
            h.update(c.mean.to_bits().to_le_bytes());
            h.update(c.norm.to_bits().to_le_bytes());
        }
        h.update([1]);
        for d in &self.dropped {
            h.update(d.as_bytes());
            h.update([0]);
        }
        hex::encode(&h.finalize()[..12])
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// True when the stored id matches the constants.
    pub fn verify(&self) -> bool {
        self.id == self.content_id()
    }

    pub fn columns(&self) -> &[ColumnTransform] {
        &self.columns
    }

    pub fn column_ids(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.term.id()).collect()
    }

    pub fn column(&self, id: &str) -> Option<&ColumnTransform> {
        self.columns.iter().find(|c| c.term.id() == id)
    }

    pub fn dropped_columns(&self) -> &[String] {
        &self.dropped
    }

    pub fn training_rows(&self) -> usize {
        self.training_rows
    }
}

/// Computes the transform over `train` and returns the standardized matrix.
pub fn fit_transform(train: &RawDesign) -> Result<(StandardizedMatrix, StandardizationTransform)> {
    let n = train.n_rows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "standardization needs at least 2 training rows, got {n}"
        )));
    }
    let sites = train.row_sites();
    let mut columns = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (j, term) in train.terms().iter().enumerate() {
        let col = train.values().column(j);
        let rows: Vec<usize> = match &term.scope {
            Scope::Global => (0..n).collect(),
            Scope::Site(s) => (0..n).filter(|&i| &sites[i] == s).collect(),
        };
        if rows.len() < 2 {
            dropped.push(term.id());
            continue;
        }
        let mean = rows.iter().map(|&i| col[i]).sum::<f64>() / rows.len() as f64;
        let norm = rows.iter().map(|&i| (col[i] - mean).powi(2)).sum::<f64>().sqrt();
        let scale = rows.iter().fold(0.0_f64, |m, &i| m.max(col[i].abs()));
        if scale == 0.0 || norm <= ZERO_NORM_TOL * scale {
            dropped.push(term.id());
            continue;
        }
        columns.push(ColumnTransform {
            term: term.clone(),
            mean,
            norm,
        });
        kept.push(j);
    }
    if columns.is_empty() {
        return Err(Error::EmptyDesign(
            "every column is constant over the training rows".into(),
        ));
    }
    let transform = StandardizationTransform::from_parts(columns, dropped, n);
    let mut values = Array2::zeros((n, kept.len()));
    for (k, (&j, ct)) in kept.iter().zip(transform.columns()).enumerate() {
        for i in 0..n {
            values[[i, k]] = ct.apply(train.values()[[i, j]], &sites[i]);
        }
    }
    let matrix = StandardizedMatrix::new(values, transform.column_ids(), transform.id())?;
    Ok((matrix, transform))
}

/// Replays a fitted transform onto new rows using the training constants.
pub fn apply_transform(new_data: &RawDesign, t: &StandardizationTransform) -> Result<StandardizedMatrix> {
    let index: HashMap<String, usize> = new_data
        .column_ids()
        .into_iter()
        .enumerate()
        .map(|(j, id)| (id, j))
        .collect();
    let retained = t.column_ids();
    let missing: Vec<String> = retained.iter().filter(|id| !index.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let known: HashSet<&String> = retained.iter().chain(t.dropped_columns()).collect();
    let unexpected: Vec<String> = index.keys().filter(|id| !known.contains(id)).cloned().collect();
    if !unexpected.is_empty() {
        let mut unexpected = unexpected;
        unexpected.sort();
        return Err(Error::UnexpectedColumns(unexpected));
    }
    let skipped = t.dropped_columns().iter().filter(|d| index.contains_key(*d)).count();
    if skipped > 0 {
        log::debug!("transform {}: skipping {skipped} columns dropped at fit time", t.id());
    }
    let n = new_data.n_rows();
    let sites = new_data.row_sites();
    let mut values = Array2::zeros((n, retained.len()));
    for (k, (id, ct)) in retained.iter().zip(t.columns()).enumerate() {
        let j = index[id];
        for i in 0..n {
            values[[i, k]] = ct.apply(new_data.values()[[i, j]], &sites[i]);
        }
    }
    StandardizedMatrix::new(values, retained, t.id())
}

/// Maps standardized values back to the raw scale for the retained columns.
pub fn inverse_transform(
    x: &StandardizedMatrix,
    row_sites: &[String],
    t: &StandardizationTransform,
) -> Result<RawDesign> {
    if x.transform_id() != t.id() {
        return Err(Error::TransformMismatch {
            expected: t.id().to_string(),
            found: x.transform_id().to_string(),
        });
    }
    if row_sites.len() != x.n_rows() {
        return Err(Error::LengthMismatch {
            expected: x.n_rows(),
            found: row_sites.len(),
        });
    }
    let mut values = Array2::zeros((x.n_rows(), x.n_cols()));
    for (k, ct) in t.columns().iter().enumerate() {
        for i in 0..x.n_rows() {
            values[[i, k]] = ct.invert(x.values()[[i, k]], &row_sites[i]);
        }
    }
    RawDesign::new(
        values,
        t.columns().iter().map(|c| c.term.clone()).collect(),
        row_sites.to_vec(),
    )
}

/// Writes `(label, transform)` pairs as one audit CSV.
pub fn write_transform_audit<W: Write>(
    transforms: &[(String, &StandardizationTransform)],
    mut writer: W,
) -> Result<()> {
    writeln!(writer, "{AUDIT_HEADER}")?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["split", "transform_id", "training_rows", "column_id", "mean", "norm", "dropped"])?;
    for (label, t) in transforms {
        let rows = t.training_rows().to_string();
        for c in t.columns() {
            w.write_record([
                label.as_str(),
                t.id(),
                &rows,
                &c.term.id(),
                &fmt_f64(c.mean),
                &fmt_f64(c.norm),
                "false",
            ])?;
        }
        for d in t.dropped_columns() {
            w.write_record([label.as_str(), t.id(), &rows, d, "", "", "true"])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an audit CSV back into transforms keyed by split label.
pub fn read_transform_audit<R: Read>(reader: R) -> Result<BTreeMap<String, StandardizationTransform>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut parts: BTreeMap<String, (usize, Vec<ColumnTransform>, Vec<String>, String)> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let field = |k: usize| row.get(k).unwrap_or("");
        let parse = |k: usize| -> Result<f64> {
            field(k)
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad number `{}` in transform audit", field(k))))
        };
        let rows: usize = field(2)
            .parse()
            .map_err(|_| Error::InvalidInput("bad training_rows in transform audit".into()))?;
        let entry = parts
            .entry(field(0).to_string())
            .or_insert_with(|| (rows, Vec::new(), Vec::new(), field(1).to_string()));
        if field(6) == "true" {
            entry.2.push(field(3).to_string());
        } else {
            entry.1.push(ColumnTransform {
                term: TermSpec::parse(field(3))?,
                mean: parse(4)?,
                norm: parse(5)?,
            });
        }
    }
    let mut out = BTreeMap::new();
    for (label, (rows, columns, dropped, id)) in parts {
        let t = StandardizationTransform::from_parts(columns, dropped, rows);
        if t.id() != id {
            return Err(Error::InvalidInput(format!(
                "transform `{label}` does not match its recorded id"
            )));
        }
        out.insert(label, t);
    }
    Ok(out)
}

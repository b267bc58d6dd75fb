//! Point-referenced observations and their CSV format
//! (`site,x,y,response,<covariate...>`).

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::format::fmt_f64;

const FIXED_COLUMNS: [&str; 4] = ["site", "x", "y", "response"];

#[derive(Debug, Clone, PartialEq)]
pub struct PointRecord {
    pub site: String,
    pub x: f64,
    pub y: f64,
    pub response: f64,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointDataset {
    covariate_names: Vec<String>,
    records: Vec<PointRecord>,
}

impl PointDataset {
    pub fn new(covariate_names: Vec<String>, records: Vec<PointRecord>) -> Result<Self> {
        let unique: BTreeSet<&String> = covariate_names.iter().collect();
        if unique.len() != covariate_names.len() {
            return Err(Error::InvalidInput("duplicate covariate names".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.site.is_empty() {
                return Err(Error::InvalidInput(format!("row {i}: empty site id")));
            }
            if !r.x.is_finite() || !r.y.is_finite() {
                return Err(Error::NonFinite(format!("row {i} coordinates")));
            }
            if r.covariates.len() != covariate_names.len() {
                return Err(Error::LengthMismatch {
                    expected: covariate_names.len(),
                    found: r.covariates.len(),
                });
            }
        }
        Ok(Self {
            covariate_names,
            records,
        })
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn records(&self) -> &[PointRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct site ids in sorted order.
    pub fn sites(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.site.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn site_rows(&self, site: &str) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].site == site)
            .collect()
    }

    pub fn row_sites(&self) -> Vec<String> {
        self.records.iter().map(|r| r.site.clone()).collect()
    }

    pub fn responses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.response).collect()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Rows × covariates matrix in `covariate_names` order.
    pub fn covariate_matrix(&self) -> Array2<f64> {
        let p = self.covariate_names.len();
        Array2::from_shape_fn((self.records.len(), p), |(i, j)| self.records[i].covariates[j])
    }

    pub fn subset(&self, rows: &[usize]) -> PointDataset {
        PointDataset {
            covariate_names: self.covariate_names.clone(),
            records: rows.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn with_responses(&self, responses: &[f64]) -> Result<PointDataset> {
        if responses.len() != self.records.len() {
            return Err(Error::LengthMismatch {
                expected: self.records.len(),
                found: responses.len(),
            });
        }
        let mut out = self.clone();
        for (r, v) in out.records.iter_mut().zip(responses) {
            r.response = *v;
        }
        Ok(out)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < FIXED_COLUMNS.len()
            || headers.iter().take(4).zip(FIXED_COLUMNS).any(|(h, f)| h != f)
        {
            return Err(Error::InvalidInput(format!(
                "point CSV header must start with {}",
                FIXED_COLUMNS.join(",")
            )));
        }
        let names: Vec<String> = headers.iter().skip(4).map(String::from).collect();
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let num = |k: usize| -> Result<f64> {
                let field = row.get(k).unwrap_or("");
                field.parse::<f64>().map_err(|_| {
                    Error::InvalidInput(format!(
                        "row {}: column `{}` is not a number: `{field}`",
                        i + 1,
                        headers.get(k).unwrap_or("?")
                    ))
                })
            };
            records.push(PointRecord {
                site: row.get(0).unwrap_or("").to_string(),
                x: num(1)?,
                y: num(2)?,
                response: num(3)?,
                covariates: (4..headers.len()).map(num).collect::<Result<_>>()?,
            });
        }
        Self::new(names, records)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_writer(file)
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
        header.extend(self.covariate_names.iter().map(String::as_str));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.site.clone(), fmt_f64(r.x), fmt_f64(r.y), fmt_f64(r.response)];
            row.extend(r.covariates.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

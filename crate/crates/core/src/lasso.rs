//! LASSO solution paths by Least Angle Regression, sparse linear models and
//! fit metrics.
//!
//! The objective is the unnormalised residual sum of squares plus an
//! unsquared L1 penalty:
//!
//! ```text
//! minimise  Σ_i (y_i − β_0 − Σ_j x_ij β_j)² + λ Σ_j |β_j|
//! ```
//!
//! so at a solution every active column satisfies `x_jᵀ r = (λ/2)·sign(β_j)`
//! and every inactive column has `|x_jᵀ r| ≤ λ/2`. The intercept is never
//! penalised; with mean-zero columns it is the training response mean.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on column means and norms accepted by the path solver.
pub const STANDARDIZATION_TOL: f64 = 1e-10;

/// Residual correlation below which the path stops.
pub const CORRELATION_FLOOR: f64 = 1e-12;

/// Squared sine of the angle between an entering column and the span of the
/// active set below which the column is treated as collinear.
const COLLINEAR_TOL: f64 = 1e-11;

/// Relative gap under which two step lengths are treated as a tie.
const TIE_TOL: f64 = 1e-12;

/// Design matrix on the solver's scale, tagged with the transform that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedMatrix {
    values: Array2<f64>,
    column_ids: Vec<String>,
    transform_id: String,
}

impl StandardizedMatrix {
    pub fn new(
        values: Array2<f64>,
        column_ids: Vec<String>,
        transform_id: impl Into<String>,
    ) -> Result<Self> {
        if values.ncols() != column_ids.len() {
            return Err(Error::LengthMismatch {
                expected: values.ncols(),
                found: column_ids.len(),
            });
        }
        Ok(Self {
            values,
            column_ids,
            transform_id: transform_id.into(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn column_ids(&self) -> &[String] {
        &self.column_ids
    }

    pub fn transform_id(&self) -> &str {
        &self.transform_id
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_index(&self, id: &str) -> Option<usize> {
        self.column_ids.iter().position(|c| c == id)
    }

    /// Checks the mean-zero / unit-norm / non-zero column invariants.
    pub fn check_standardized(&self) -> Result<()> {
        let n = self.n_rows() as f64;
        for (j, col) in self.values.columns().into_iter().enumerate() {
            let id = &self.column_ids[j];
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("row {i}, column `{id}`")));
            }
            let sum: f64 = col.sum();
            let sq: f64 = col.iter().map(|v| v * v).sum();
            if sq == 0.0 {
                return Err(Error::NotStandardized {
                    column: id.clone(),
                    reason: "column is entirely zero".into(),
                });
            }
            if (sum / n).abs() > STANDARDIZATION_TOL {
                return Err(Error::NotStandardized {
                    column: id.clone(),
                    reason: format!("mean {:e}", sum / n),
                });
            }
            if (sq.sqrt() - 1.0).abs() > STANDARDIZATION_TOL {
                return Err(Error::NotStandardized {
                    column: id.clone(),
                    reason: format!("norm {}", sq.sqrt()),
                });
            }
        }
        Ok(())
    }
}

/// One breakpoint of the piecewise-linear LASSO path.
#[derive(Debug, Clone, PartialEq)]
pub struct Knot {
    pub lambda: f64,
    /// Column indices in order of entry.
    pub active: Vec<usize>,
    /// Coefficients aligned with `active`.
    pub coefficients: Vec<f64>,
    fitted: Vec<f64>,
}

impl Knot {
    /// A knot with precomputed centred fitted values, for paths built
    /// outside this solver.
    pub fn new(lambda: f64, active: Vec<usize>, coefficients: Vec<f64>, fitted: Vec<f64>) -> Self {
        Self {
            lambda,
            active,
            coefficients,
            fitted,
        }
    }

    pub fn subset_size(&self) -> usize {
        self.coefficients.iter().filter(|b| **b != 0.0).count()
    }

    /// Centred fitted values `Xβ` accumulated by the solver.
    pub fn fitted(&self) -> &[f64] {
        &self.fitted
    }

    pub fn dense_coefficients(&self, n_cols: usize) -> Vec<f64> {
        let mut beta = vec![0.0; n_cols];
        for (&j, &b) in self.active.iter().zip(&self.coefficients) {
            beta[j] = b;
        }
        beta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoPath {
    pub knots: Vec<Knot>,
    pub intercept: f64,
    pub max_steps_reached: bool,
    /// Column whose collinearity ended the path early under
    /// [`CollinearPolicy::Stop`].
    pub collinear_stop: Option<String>,
    column_ids: Vec<String>,
    transform_id: String,
}

impl LassoPath {
    pub fn new(knots: Vec<Knot>, intercept: f64, column_ids: Vec<String>, transform_id: impl Into<String>) -> Self {
        Self {
            knots,
            intercept,
            max_steps_reached: false,
            collinear_stop: None,
            column_ids,
            transform_id: transform_id.into(),
        }
    }

    pub fn column_ids(&self) -> &[String] {
        &self.column_ids
    }

    pub fn transform_id(&self) -> &str {
        &self.transform_id
    }

    /// Builds the sparse model at knot `index`.
    pub fn model_at(&self, index: usize, validation_sse: f64) -> SelectedModel {
        let knot = &self.knots[index];
        let coefficients: BTreeMap<String, f64> = knot
            .active
            .iter()
            .zip(&knot.coefficients)
            .filter(|(_, b)| **b != 0.0)
            .map(|(&j, &b)| (self.column_ids[j].clone(), b))
            .collect();
        SelectedModel {
            intercept: self.intercept,
            subset_size: coefficients.len(),
            coefficients,
            validation_sse,
            transform_ref: self.transform_id.clone(),
            lambda: knot.lambda,
        }
    }
}

/// What the solver does when a column entering the active set is collinear
/// with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CollinearPolicy {
    /// Fail with [`Error::Collinear`].
    #[default]
    Error,
    /// Return the path up to the last knot reached, naming the column in
    /// [`LassoPath::collinear_stop`].
    Stop,
}

/// Solves `min ||y − Xβ||² + λ||β||₁` for every λ via LAR with the LASSO
/// sign-change modification. `y_centered` must have mean zero; the returned
/// path has intercept 0 (see [`fit_lasso_path`] for raw responses).
pub fn lar_lasso_path(x: &StandardizedMatrix, y_centered: &[f64]) -> Result<LassoPath> {
    lar_lasso_path_with(x, y_centered, CollinearPolicy::Error)
}

pub fn lar_lasso_path_with(
    x: &StandardizedMatrix,
    y_centered: &[f64],
    policy: CollinearPolicy,
) -> Result<LassoPath> {
    let n = x.n_rows();
    let p = x.n_cols();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "path solver needs at least 3 rows, got {n}"
        )));
    }
    if p == 0 {
        return Err(Error::EmptyDesign("no columns".into()));
    }
    if y_centered.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: y_centered.len(),
        });
    }
    if let Some(i) = y_centered.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("response row {i}")));
    }
    x.check_standardized()?;
    let y_scale = y_centered.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let y_mean = y_centered.iter().sum::<f64>() / n as f64;
    if y_mean.abs() > STANDARDIZATION_TOL * y_scale {
        return Err(Error::InvalidInput(format!(
            "response is not centred (mean {y_mean:e})"
        )));
    }

    // Column-major copy so each column is contiguous.
    let cols: Vec<f64> = x.values().t().iter().copied().collect();
    let col = |j: usize| &cols[j * n..(j + 1) * n];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();

    let max_active = (n - 1).min(p);
    let step_cap = 8 * n.min(p);

    let mut corr: Vec<f64> = (0..p).map(|j| dot(col(j), y_centered)).collect();
    let mut beta = vec![0.0; p];
    let mut mu = vec![0.0; n];
    let mut active: Vec<usize> = Vec::new();
    let mut in_active = vec![false; p];
    let mut chol = Cholesky::default();

    let mut c_max = corr.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let mut knots = vec![Knot {
        lambda: 2.0 * c_max,
        active: Vec::new(),
        coefficients: Vec::new(),
        fitted: mu.clone(),
    }];
    let mut path = LassoPath {
        knots: Vec::new(),
        intercept: 0.0,
        max_steps_reached: false,
        collinear_stop: None,
        column_ids: x.column_ids().to_vec(),
        transform_id: x.transform_id().to_string(),
    };
    if c_max <= CORRELATION_FLOOR {
        knots[0].lambda = 0.0;
        path.knots = knots;
        return Ok(path);
    }

    let mut entering: Vec<usize> = (0..p)
        .filter(|&j| corr[j].abs() >= c_max - TIE_TOL * c_max)
        .collect();
    let mut just_dropped: Option<usize> = None;
    let mut steps = 0;
    let mut collinear: Option<usize> = None;

    'path: loop {
        if steps >= step_cap {
            path.max_steps_reached = true;
            break;
        }
        for &j in &entering {
            if active.len() == max_active {
                break;
            }
            let cross: Vec<f64> = active.iter().map(|&a| dot(col(a), col(j))).collect();
            let diag = dot(col(j), col(j));
            if !chol.push(&cross, diag) {
                match policy {
                    CollinearPolicy::Error => return Err(Error::Collinear(x.column_ids()[j].clone())),
                    CollinearPolicy::Stop => {
                        collinear = Some(j);
                        break 'path;
                    }
                }
            }
            active.push(j);
            in_active[j] = true;
        }
        entering.clear();

        let signs: Vec<f64> = active.iter().map(|&j| corr[j].signum()).collect();
        let w = chol.solve(&signs);
        let norm_factor = 1.0 / dot(&signs, &w).sqrt();
        let direction: Vec<f64> = w.iter().map(|v| v * norm_factor).collect();

        let mut u = vec![0.0; n];
        for (&j, &d) in active.iter().zip(&direction) {
            for (ui, xi) in u.iter_mut().zip(col(j)) {
                *ui += d * xi;
            }
        }
        let a: Vec<f64> = (0..p).map(|j| dot(col(j), &u)).collect();

        let full_step = c_max / norm_factor;
        let mut gamma = full_step;
        let mut candidates: Vec<(usize, f64)> = Vec::new();
        if active.len() < max_active {
            for j in 0..p {
                if in_active[j] {
                    continue;
                }
                let mut g = f64::INFINITY;
                let mut sides = [
                    (c_max - corr[j]) / (norm_factor - a[j]),
                    (c_max + corr[j]) / (norm_factor + a[j]),
                ];
                // A column that just left sits on its old boundary; it may
                // only come back with the opposite sign.
                if Some(j) == just_dropped {
                    sides[if corr[j] > 0.0 { 0 } else { 1 }] = f64::INFINITY;
                }
                for cand in sides {
                    if cand.is_finite() && cand > 0.0 && cand < g {
                        g = cand;
                    }
                }
                if g.is_finite() {
                    candidates.push((j, g));
                    gamma = gamma.min(g);
                }
            }
        }

        let mut drop: Option<usize> = None;
        let mut drop_gamma = f64::INFINITY;
        for (k, (&j, &d)) in active.iter().zip(&direction).enumerate() {
            let g = -beta[j] / d;
            if g > 0.0 && g < drop_gamma {
                drop_gamma = g;
                drop = Some(k);
            }
        }

        if drop.is_some() && drop_gamma < gamma {
            gamma = drop_gamma;
        } else {
            drop = None;
            if gamma < full_step {
                let tol = TIE_TOL * gamma.max(f64::MIN_POSITIVE);
                entering = candidates
                    .iter()
                    .filter(|(_, g)| *g <= gamma + tol)
                    .map(|(j, _)| *j)
                    .collect();
            }
        }

        for (mi, ui) in mu.iter_mut().zip(&u) {
            *mi += gamma * ui;
        }
        for (&j, &d) in active.iter().zip(&direction) {
            beta[j] += gamma * d;
        }
        for (cj, aj) in corr.iter_mut().zip(&a) {
            *cj -= gamma * aj;
        }
        c_max = (c_max - gamma * norm_factor).max(0.0);
        just_dropped = None;

        if let Some(k) = drop {
            let j = active.remove(k);
            in_active[j] = false;
            beta[j] = 0.0;
            just_dropped = Some(j);
            chol = Cholesky::default();
            let snapshot = active.clone();
            for (i, &aj) in snapshot.iter().enumerate() {
                let cross: Vec<f64> = snapshot[..i].iter().map(|&b| dot(col(b), col(aj))).collect();
                if !chol.push(&cross, dot(col(aj), col(aj))) {
                    if policy == CollinearPolicy::Error {
                        return Err(Error::Collinear(x.column_ids()[aj].clone()));
                    }
                    collinear = Some(aj);
                    break;
                }
            }
        }
        steps += 1;

        let finished = c_max <= CORRELATION_FLOOR;
        if finished {
            c_max = 0.0;
        }
        knots.push(Knot {
            lambda: 2.0 * c_max,
            active: active.clone(),
            coefficients: active.iter().map(|&j| beta[j]).collect(),
            fitted: mu.clone(),
        });
        if finished || collinear.is_some() || (active.is_empty() && entering.is_empty()) {
            break;
        }
    }

    path.collinear_stop = collinear.map(|j| x.column_ids()[j].clone());
    path.knots = knots;
    Ok(path)
}

/// Centres `y`, runs [`lar_lasso_path`] and records the training mean as the
/// intercept.
pub fn fit_lasso_path(x: &StandardizedMatrix, y: &[f64]) -> Result<LassoPath> {
    fit_lasso_path_with(x, y, CollinearPolicy::Error)
}

pub fn fit_lasso_path_with(x: &StandardizedMatrix, y: &[f64], policy: CollinearPolicy) -> Result<LassoPath> {
    if y.is_empty() {
        return Err(Error::InvalidInput("empty response".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let centered: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let mut path = lar_lasso_path_with(x, &centered, policy)?;
    path.intercept = mean;
    Ok(path)
}

/// Incrementally grown lower-triangular factor of the active Gram matrix.
#[derive(Debug, Default)]
struct Cholesky {
    rows: Vec<Vec<f64>>,
}

impl Cholesky {
    /// Appends a column with Gram entries `cross` against the current set and
    /// squared norm `diag`. Returns false when the column is collinear.
    fn push(&mut self, cross: &[f64], diag: f64) -> bool {
        let z = self.forward(cross);
        let rest = diag - z.iter().map(|v| v * v).sum::<f64>();
        if !(rest > COLLINEAR_TOL * diag) {
            return false;
        }
        let mut row = z;
        row.push(rest.sqrt());
        self.rows.push(row);
        true
    }

    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(b.len());
        for (i, row) in self.rows.iter().enumerate() {
            let s: f64 = row[..i].iter().zip(&z).map(|(l, v)| l * v).sum();
            z.push((b[i] - s) / row[i]);
        }
        z
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let z = self.forward(b);
        let k = z.len();
        let mut x = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|r| self.rows[r][i] * x[r]).sum();
            x[i] = (z[i] - s) / self.rows[i][i];
        }
        x
    }
}

/// A single model chosen from a path: intercept plus sparse coefficients on
/// the standardized scale of `transform_ref`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedModel {
    pub intercept: f64,
    pub coefficients: BTreeMap<String, f64>,
    pub subset_size: usize,
    pub validation_sse: f64,
    pub transform_ref: String,
    pub lambda: f64,
}

impl SelectedModel {
    pub fn intercept_only(intercept: f64, transform_ref: impl Into<String>) -> Self {
        Self {
            intercept,
            coefficients: BTreeMap::new(),
            subset_size: 0,
            validation_sse: 0.0,
            transform_ref: transform_ref.into(),
            lambda: 0.0,
        }
    }
}

/// `ŷ_i = β_0 + Σ_j β_j x_ij` over the model's nonzero coefficients.
pub fn predict(model: &SelectedModel, x_new: &StandardizedMatrix) -> Result<Vec<f64>> {
    if model.transform_ref != x_new.transform_id() {
        return Err(Error::TransformMismatch {
            expected: model.transform_ref.clone(),
            found: x_new.transform_id().to_string(),
        });
    }
    let mut columns = Vec::with_capacity(model.coefficients.len());
    let mut missing = Vec::new();
    for (id, &b) in &model.coefficients {
        if b == 0.0 {
            continue;
        }
        match x_new.column_index(id) {
            Some(j) => columns.push((j, b)),
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let values = x_new.values();
    Ok((0..x_new.n_rows())
        .map(|i| {
            columns
                .iter()
                .fold(model.intercept, |acc, &(j, b)| acc + b * values[[i, j]])
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub r_squared: f64,
    pub rmse: f64,
    pub residuals: Vec<f64>,
}

/// R² about the observed mean and root mean squared residual.
pub fn fit_metrics(observed: &[f64], predicted: &[f64]) -> Result<FitMetrics> {
    if observed.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            expected: observed.len(),
            found: predicted.len(),
        });
    }
    if observed.len() < 2 {
        return Err(Error::InvalidInput(
            "fit metrics need at least two observations".into(),
        ));
    }
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let sst: f64 = observed.iter().map(|o| (o - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::UndefinedRSquared);
    }
    let residuals: Vec<f64> = observed.iter().zip(predicted).map(|(o, p)| o - p).collect();
    let sse: f64 = residuals.iter().map(|r| r * r).sum();
    Ok(FitMetrics {
        r_squared: 1.0 - sse / sst,
        rmse: (sse / n).sqrt(),
        residuals,
    })
}

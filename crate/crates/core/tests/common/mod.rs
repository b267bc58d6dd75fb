//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sitelasso::lasso::StandardizedMatrix;

/// Cyclic coordinate descent for `min ||y − Xβ||² + λ||β||₁` on unit-norm
/// columns, iterated until no coefficient moves by more than `tol`.
pub fn coordinate_descent(x: &Array2<f64>, y: &[f64], lambda: f64, warm: &[f64], tol: f64) -> Vec<f64> {
    let p = x.ncols();
    let gram = x.t().dot(x);
    let xty: Vec<f64> = (0..p)
        .map(|j| x.column(j).iter().zip(y).map(|(a, b)| a * b).sum())
        .collect();
    let mut beta = warm.to_vec();
    let half = lambda / 2.0;
    for _ in 0..2_000_000 {
        let mut moved = 0.0_f64;
        for j in 0..p {
            let mut c = xty[j];
            for k in 0..p {
                c -= gram[[j, k]] * beta[k];
            }
            let z = c + gram[[j, j]] * beta[j];
            let new = if z > half {
                (z - half) / gram[[j, j]]
            } else if z < -half {
                (z + half) / gram[[j, j]]
            } else {
                0.0
            };
            moved = moved.max((new - beta[j]).abs());
            beta[j] = new;
        }
        if moved < tol {
            break;
        }
    }
    beta
}

pub fn standardize_columns(mut x: Array2<f64>) -> Array2<f64> {
    for mut col in x.columns_mut() {
        let mean = col.mean().unwrap();
        col.mapv_inplace(|v| v - mean);
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        col.mapv_inplace(|v| v / norm);
    }
    x
}

/// Random standardized design with a centred response.
pub fn random_problem(seed: u64, n: usize, p: usize) -> (StandardizedMatrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = standardize_columns(Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0)));
    let mut y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    y.iter_mut().for_each(|v| *v -= mean);
    let ids = (0..p).map(|j| format!("x{j}")).collect();
    (StandardizedMatrix::new(x, ids, "oracle").unwrap(), y)
}

/// Largest KKT violation over all knots of a path.
pub fn max_kkt_violation(x: &StandardizedMatrix, y: &[f64], path: &sitelasso::lasso::LassoPath) -> f64 {
    let p = x.n_cols();
    let mut worst = 0.0_f64;
    for knot in &path.knots {
        let beta = knot.dense_coefficients(p);
        let fitted = x.values().dot(&ndarray::Array1::from(beta.clone()));
        let r: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
        let half = knot.lambda / 2.0;
        for j in 0..p {
            let c: f64 = x.values().column(j).iter().zip(&r).map(|(a, b)| a * b).sum();
            let v = if knot.active.contains(&j) {
                let mut v = (c.abs() - half).abs();
                if beta[j] != 0.0 && half > 1e-8 && c.signum() != beta[j].signum() {
                    v = v.max(c.abs() + half);
                }
                v
            } else {
                (c.abs() - half).max(0.0)
            };
            worst = worst.max(v);
        }
    }
    worst
}

/// Compares every knot of the LAR path with coordinate descent at the same λ.
/// Returns the worst per-coefficient gap. The λ = 0 knot is only compared
/// when the least-squares solution is unique (fewer columns than rows − 1).
pub fn max_oracle_gap(x: &StandardizedMatrix, y: &[f64], path: &sitelasso::lasso::LassoPath) -> f64 {
    let p = x.n_cols();
    let unique_at_zero = p < x.n_rows() - 1;
    let mut warm = vec![0.0; p];
    let mut worst = 0.0_f64;
    for knot in &path.knots {
        if knot.lambda == 0.0 && !unique_at_zero {
            continue;
        }
        let cd = coordinate_descent(x.values(), y, knot.lambda, &warm, 1e-13);
        let lar = knot.dense_coefficients(p);
        for (a, b) in cd.iter().zip(&lar) {
            worst = worst.max((a - b).abs());
        }
        warm = cd;
    }
    worst
}

/// Dataset with covariates `c0..c{p-1}` drawn uniformly from [-1, 1] and a
/// response computed from each row's covariates and site.
pub fn toy_dataset(
    seed: u64,
    counts: &[(&str, usize)],
    p: usize,
    response: impl Fn(&[f64], &str, &mut ChaCha8Rng) -> f64,
) -> sitelasso::dataset::PointDataset {
    use sitelasso::dataset::{PointDataset, PointRecord};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for (site, n) in counts {
        for i in 0..*n {
            let covariates: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let response = response(&covariates, site, &mut rng);
            records.push(PointRecord {
                site: site.to_string(),
                x: i as f64 * 25.0,
                y: 0.0,
                response,
                covariates,
            });
        }
    }
    PointDataset::new((0..p).map(|j| format!("c{j}")).collect(), records).unwrap()
}

/// Largest |Pearson r| over all pairs of non-constant columns, by a direct
/// two-pass computation per pair.
pub fn max_abs_pairwise_r(x: &Array2<f64>) -> f64 {
    let n = x.nrows() as f64;
    let mut worst = 0.0_f64;
    for i in 0..x.ncols() {
        for j in i + 1..x.ncols() {
            let (a, b) = (x.column(i), x.column(j));
            let (ma, mb) = (a.sum() / n, b.sum() / n);
            let mut sab = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            for k in 0..x.nrows() {
                sab += (a[k] - ma) * (b[k] - mb);
                saa += (a[k] - ma).powi(2);
                sbb += (b[k] - mb).powi(2);
            }
            if saa > 0.0 && sbb > 0.0 {
                worst = worst.max((sab / (saa * sbb).sqrt()).abs());
            }
        }
    }
    worst
}

/// Ordinary least squares with an intercept, fitted on `x_train` and
/// evaluated on `x_new`.
pub fn ols_predict(x_train: &Array2<f64>, y: &[f64], x_new: &Array2<f64>) -> Vec<f64> {
    use nalgebra::{DMatrix, DVector};
    let (n, p) = x_train.dim();
    let a = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x_train[[i, j - 1]] });
    let beta = a
        .clone()
        .svd(true, true)
        .solve(&DVector::from_column_slice(y), 1e-14)
        .unwrap();
    (0..x_new.nrows())
        .map(|i| beta[0] + (0..p).map(|j| beta[j + 1] * x_new[[i, j]]).sum::<f64>())
        .collect()
}

//! Thin plate spline interpolation with kernel `r² log r` and affine drift.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest accepted condition number of the spline system.
pub const MAX_CONDITION: f64 = 1e12;

/// Kernel `r² log r` written in terms of `r²`.
#[inline]
pub fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsSurface {
    origin: (f64, f64),
    scale: f64,
    knots: Vec<(f64, f64)>,
    weights: Vec<f64>,
    affine: [f64; 3],
    smoothing: f64,
}

impl TpsSurface {
    pub fn n_knots(&self) -> usize {
        self.knots.len()
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.origin.0) / self.scale;
        let v = (y - self.origin.1) / self.scale;
        let mut s = self.affine[0] + self.affine[1] * u + self.affine[2] * v;
        for (&(kx, ky), w) in self.knots.iter().zip(&self.weights) {
            let r2 = (u - kx).powi(2) + (v - ky).powi(2);
            s += w * tps_kernel(r2);
        }
        s
    }
}

/// Averages values at identical coordinates.
pub fn collapse_duplicates(points: &[(f64, f64, f64)]) -> Vec<(f64, f64, f64)> {
    let mut groups: BTreeMap<(u64, u64), (f64, f64, f64, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for &(x, y, v) in points {
        let key = ((x + 0.0).to_bits(), (y + 0.0).to_bits());
        let e = groups.entry(key).or_insert_with(|| {
            order.push(key);
            (x, y, 0.0, 0)
        });
        e.2 += v;
        e.3 += 1;
    }
    order
        .into_iter()
        .map(|k| {
            let (x, y, s, n) = groups[&k];
            (x, y, s / n as f64)
        })
        .collect()
}

/// Fits an interpolating (`smoothing = 0`) or smoothing spline.
pub fn tps_fit(points: &[(f64, f64, f64)], smoothing: f64) -> Result<TpsSurface> {
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::InvalidInput(format!("smoothing must be a nonnegative number, got {smoothing}")));
    }
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite() || !p.2.is_finite()) {
        return Err(Error::NonFinite("thin plate spline input".into()));
    }
    let pts = collapse_duplicates(points);
    let n = pts.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "thin plate spline needs at least 3 distinct points, got {n}"
        )));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let scale = pts
        .iter()
        .map(|p| (p.0 - mx).abs().max((p.1 - my).abs()))
        .fold(0.0_f64, f64::max);
    let knots: Vec<(f64, f64)> = pts.iter().map(|p| ((p.0 - mx) / scale, (p.1 - my) / scale)).collect();

    let (sxx, syy, sxy) = knots.iter().fold((0.0, 0.0, 0.0), |(a, b, c), &(u, v)| (a + u * u, b + v * v, c + u * v));
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let lam_min = tr / 2.0 - ((tr / 2.0).powi(2) - det).max(0.0).sqrt();
    if lam_min <= 1e-12 * tr {
        return Err(Error::InvalidInput("thin plate spline points are collinear".into()));
    }

    let m = n + 3;
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut b = DVector::<f64>::zeros(m);
    for i in 0..n {
        let (ui, vi) = knots[i];
        for j in 0..i {
            let (uj, vj) = knots[j];
            let k = tps_kernel((ui - uj).powi(2) + (vi - vj).powi(2));
            a[(i, j)] = k;
            a[(j, i)] = k;
        }
        a[(i, i)] = smoothing;
        for (c, p) in [1.0, ui, vi].into_iter().enumerate() {
            a[(i, n + c)] = p;
            a[(n + c, i)] = p;
        }
        b[i] = pts[i].2;
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > MAX_CONDITION {
        return Err(Error::IllConditioned(format!(
            "thin plate spline system has condition number {cond:.3e}; jitter near-coincident points or add smoothing"
        )));
    }
    let sol = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::IllConditioned(format!("thin plate spline solve failed: {e}")))?;
    Ok(TpsSurface {
        origin: (mx, my),
        scale,
        knots,
        weights: sol.rows(0, n).iter().copied().collect(),
        affine: [sol[n], sol[n + 1], sol[n + 2]],
        smoothing,
    })
}

pub fn tps_eval(surface: &TpsSurface, point: (f64, f64)) -> f64 {
    surface.eval(point.0, point.1)
}

/// Mean of the surface over a `grid_n × grid_n` lattice of cell centres
/// inside the square.
pub fn points_to_square_mean(surface: &TpsSurface, center: (f64, f64), side: f64, grid_n: usize) -> Result<f64> {
    if grid_n == 0 || !(side > 0.0) {
        return Err(Error::InvalidInput("lattice needs grid_n ≥ 1 and a positive side".into()));
    }
    let step = side / grid_n as f64;
    let x0 = center.0 - side / 2.0;
    let y0 = center.1 - side / 2.0;
    let mut total = 0.0;
    for i in 0..grid_n {
        for j in 0..grid_n {
            total += surface.eval(x0 + (i as f64 + 0.5) * step, y0 + (j as f64 + 0.5) * step);
        }
    }
    Ok(total / (grid_n * grid_n) as f64)
}

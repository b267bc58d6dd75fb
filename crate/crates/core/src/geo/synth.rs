//! Seeded two-site synthetic datasets with known sparse truth.
//!
//! Covariate fields are random Fourier sums. Raster-source covariates are
//! sampled at pixel centres and averaged over each observation's square;
//! transect-source covariates are sampled along survey lines and carried to
//! pixels and squares by a thin plate spline.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{PointDataset, PointRecord};
use crate::error::{Error, Result};
use crate::features::{Scope, TermSpec};
use crate::geo::raster::{raster_to_square_mean, RasterGrid, DEFAULT_NODATA};
use crate::geo::tps::{points_to_square_mean, tps_fit};

const FOURIER_FEATURES: usize = 48;

fn default_cellsize() -> f64 {
    25.0
}

fn default_side() -> f64 {
    25.0
}

fn default_grid_n() -> usize {
    10
}

fn default_ncols() -> usize {
    50
}

fn default_nrows() -> usize {
    44
}

fn default_sd() -> f64 {
    1.0
}

fn default_length() -> f64 {
    300.0
}

fn default_transect_spacing() -> f64 {
    100.0
}

fn default_transect_step() -> f64 {
    50.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSource {
    #[default]
    Raster,
    Transect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(default = "default_length")]
    pub length_scale: f64,
    #[serde(default)]
    pub source: CovariateSource,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "default_sd")]
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub id: String,
    pub n_points: usize,
    #[serde(default = "default_ncols")]
    pub ncols: usize,
    #[serde(default = "default_nrows")]
    pub nrows: usize,
    #[serde(default)]
    pub xll: f64,
    #[serde(default)]
    pub yll: f64,
    /// Additive offset per covariate, in units of that covariate's `sd`.
    #[serde(default)]
    pub shift: BTreeMap<String, f64>,
    /// Multiplier on the field amplitude per covariate.
    #[serde(default)]
    pub scale: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    #[serde(default)]
    pub intercept: f64,
    /// Term id to coefficient, applied at every site.
    #[serde(default)]
    pub global: BTreeMap<String, f64>,
    /// Site id to (term id to coefficient), applied at that site only.
    #[serde(default)]
    pub site: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    #[serde(default = "default_cellsize")]
    pub cellsize: f64,
    #[serde(default = "default_side")]
    pub square_side: f64,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    #[serde(default = "default_transect_spacing")]
    pub transect_spacing: f64,
    #[serde(default = "default_transect_step")]
    pub transect_step: f64,
    pub sites: Vec<SiteSpec>,
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub truth: TruthSpec,
    /// Noise SD as a multiple of the pooled signal SD.
    #[serde(default)]
    pub noise_ratio: f64,
    /// Absolute noise SD; exclusive with `noise_ratio`.
    #[serde(default)]
    pub noise_sd: f64,
}

impl SyntheticSpec {
    /// Two sites of 60 and 56 points on 50 × 44 grids of 25 m cells.
    pub fn two_site_default(seed: u64) -> Self {
        let names = ["ECA", "NDVI", "Elev", "Slope", "Wet", "Rad"];
        let covariates = names
            .iter()
            .enumerate()
            .map(|(i, n)| CovariateSpec {
                name: n.to_string(),
                length_scale: 250.0 + 50.0 * i as f64,
                source: if i == 0 { CovariateSource::Transect } else { CovariateSource::Raster },
                mean: 0.0,
                sd: 1.0,
            })
            .collect();
        let site = |id: &str, n: usize, xll: f64| SiteSpec {
            id: id.into(),
            n_points: n,
            ncols: default_ncols(),
            nrows: default_nrows(),
            xll,
            yll: 0.0,
            shift: BTreeMap::new(),
            scale: BTreeMap::new(),
        };
        SyntheticSpec {
            seed,
            cellsize: default_cellsize(),
            square_side: default_side(),
            grid_n: default_grid_n(),
            transect_spacing: default_transect_spacing(),
            transect_step: default_transect_step(),
            sites: vec![site("B1", 60, 0.0), site("B2", 56, 2000.0)],
            covariates,
            truth: TruthSpec {
                intercept: 2.0,
                global: BTreeMap::from([
                    ("ECA".to_string(), 0.8),
                    ("NDVI".to_string(), -0.5),
                    ("Elev^2".to_string(), 0.3),
                ]),
                site: BTreeMap::new(),
            },
            noise_ratio: 0.2,
            noise_sd: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sites.is_empty() {
            return bad("synthetic spec needs at least one site".into());
        }
        if self.covariates.is_empty() {
            return bad("synthetic spec needs at least one covariate".into());
        }
        if !(self.cellsize > 0.0 && self.square_side > 0.0 && self.grid_n > 0) {
            return bad("cellsize, square_side and grid_n must be positive".into());
        }
        if !(self.transect_spacing > 0.0 && self.transect_step > 0.0) {
            return bad("transect spacing and step must be positive".into());
        }
        if !(self.noise_ratio >= 0.0 && self.noise_sd >= 0.0) {
            return bad("noise settings must be nonnegative".into());
        }
        if self.noise_ratio > 0.0 && self.noise_sd > 0.0 {
            return bad("set only one of noise_ratio and noise_sd".into());
        }
        let mut names: Vec<&str> = self.covariates.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("covariate names must be unique".into());
        }
        for c in &self.covariates {
            if !(c.length_scale > 0.0 && c.sd >= 0.0) {
                return bad(format!("covariate `{}` needs a positive length scale", c.name));
            }
        }
        let mut ids: Vec<&str> = self.sites.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("site ids must be unique".into());
        }
        for s in &self.sites {
            if s.id.is_empty() || s.n_points == 0 || s.ncols == 0 || s.nrows == 0 {
                return bad(format!("site `{}` needs a name, points and a nonempty grid", s.id));
            }
            let w = s.ncols as f64 * self.cellsize;
            let h = s.nrows as f64 * self.cellsize;
            if w <= self.square_side || h <= self.square_side {
                return bad(format!("site `{}` grid is smaller than one observation square", s.id));
            }
            for k in s.shift.keys().chain(s.scale.keys()) {
                if !names.contains(&k.as_str()) {
                    return bad(format!("site `{}` shifts unknown covariate `{k}`", s.id));
                }
            }
        }
        for site in self.truth.site.keys() {
            if !ids.contains(&site.as_str()) {
                return bad(format!("truth names unknown site `{site}`"));
            }
        }
        for id in self.truth_terms()?.iter().flat_map(|(_, t, _)| t.covariates()) {
            if !names.contains(&id) {
                return bad(format!("truth uses unknown covariate `{id}`"));
            }
        }
        Ok(())
    }

    /// (site or empty for global, term, coefficient)
    fn truth_terms(&self) -> Result<Vec<(String, TermSpec, f64)>> {
        let mut out = Vec::new();
        let parse = |id: &str| -> Result<TermSpec> {
            let t = TermSpec::parse(id).map_err(|e| Error::Config(format!("truth term `{id}`: {e}")))?;
            if t.scope != Scope::Global {
                return Err(Error::Config(format!("truth term `{id}` must not carry a site suffix")));
            }
            Ok(t)
        };
        for (id, b) in &self.truth.global {
            out.push((String::new(), parse(id)?, *b));
        }
        for (site, terms) in &self.truth.site {
            for (id, b) in terms {
                out.push((site.clone(), parse(id)?.with_scope(Scope::Site(site.clone())), *b));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub spec: SyntheticSpec,
    /// Non-intercept terms with nonzero coefficients, e.g. `ECA`, `Elev^2@B1`.
    pub active_terms: Vec<String>,
    pub noise_sd: f64,
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub points: PointDataset,
    /// Site id to covariate name to raster.
    pub rasters: BTreeMap<String, BTreeMap<String, RasterGrid>>,
    pub truth: TruthRecord,
}

struct FourierField {
    omega: Vec<(f64, f64)>,
    phase: Vec<f64>,
}

impl FourierField {
    fn draw(rng: &mut ChaCha8Rng, length_scale: f64) -> Self {
        let normal = Normal::new(0.0, 1.0 / length_scale).expect("positive length scale");
        let omega = (0..FOURIER_FEATURES)
            .map(|_| (normal.sample(rng), normal.sample(rng)))
            .collect();
        let phase = (0..FOURIER_FEATURES).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self { omega, phase }
    }

    /// Approximately unit-variance smooth field.
    fn eval(&self, x: f64, y: f64) -> f64 {
        let amp = (2.0 / FOURIER_FEATURES as f64).sqrt();
        self.omega
            .iter()
            .zip(&self.phase)
            .map(|(&(a, b), &p)| (a * x + b * y + p).cos())
            .sum::<f64>()
            * amp
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let names: Vec<String> = spec.covariates.iter().map(|c| c.name.clone()).collect();
    let half = spec.square_side / 2.0;
    let mut rasters = BTreeMap::new();
    let mut records = Vec::new();

    for site in &spec.sites {
        let template = RasterGrid::new(
            site.ncols,
            site.nrows,
            site.xll,
            site.yll,
            spec.cellsize,
            DEFAULT_NODATA,
            vec![0.0; site.ncols * site.nrows],
        )?;
        let (x0, y0, x1, y1) = template.extent();
        let locations: Vec<(f64, f64)> = (0..site.n_points)
            .map(|_| (rng.random_range(x0 + half..x1 - half), rng.random_range(y0 + half..y1 - half)))
            .collect();
        let mut covs = vec![Vec::with_capacity(names.len()); site.n_points];
        let mut grids = BTreeMap::new();
        for c in &spec.covariates {
            let field = FourierField::draw(&mut rng, c.length_scale);
            let scale = site.scale.get(&c.name).copied().unwrap_or(1.0);
            let shift = site.shift.get(&c.name).copied().unwrap_or(0.0);
            let value = |x: f64, y: f64| c.mean + c.sd * (scale * field.eval(x, y) + shift);
            let cells = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
                (0..site.nrows)
                    .flat_map(|r| (0..site.ncols).map(move |k| (r, k)))
                    .map(|(r, k)| {
                        let (x, y) = template.cell_center(r, k);
                        f(x, y)
                    })
                    .collect()
            };
            let grid = match c.source {
                CovariateSource::Raster => {
                    let grid = template.with_values(cells(&value))?;
                    for (i, &loc) in locations.iter().enumerate() {
                        covs[i].push(raster_to_square_mean(&grid, loc, spec.square_side)?);
                    }
                    grid
                }
                CovariateSource::Transect => {
                    let mut samples = Vec::new();
                    let mut y = y0 + spec.transect_spacing / 2.0;
                    while y < y1 {
                        let mut x = x0;
                        while x <= x1 {
                            samples.push((x, y, value(x, y)));
                            x += spec.transect_step;
                        }
                        y += spec.transect_spacing;
                    }
                    let surface = tps_fit(&samples, 0.0)?;
                    for (i, &loc) in locations.iter().enumerate() {
                        covs[i].push(points_to_square_mean(&surface, loc, spec.square_side, spec.grid_n)?);
                    }
                    template.with_values(cells(&|x, y| surface.eval(x, y)))?
                }
            };
            grids.insert(c.name.clone(), grid);
        }
        for (loc, cov) in locations.into_iter().zip(covs) {
            records.push(PointRecord {
                site: site.id.clone(),
                x: loc.0,
                y: loc.1,
                response: 0.0,
                covariates: cov,
            });
        }
        rasters.insert(site.id.clone(), grids);
    }

    let terms = spec.truth_terms()?;
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(j, n)| (n.as_str(), j)).collect();
    let signal: Vec<f64> = records
        .iter()
        .map(|r| {
            terms.iter().fold(spec.truth.intercept, |acc, (_, t, b)| {
                acc + b * t.evaluate(|n| r.covariates[index[n]], &r.site)
            })
        })
        .collect();
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let signal_sd = (signal.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let noise_sd = if spec.noise_ratio > 0.0 {
        spec.noise_ratio * signal_sd
    } else {
        spec.noise_sd
    };
    let noise: Vec<f64> = if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).map_err(|e| Error::Config(e.to_string()))?;
        (0..records.len()).map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; records.len()]
    };
    for ((r, s), e) in records.iter_mut().zip(&signal).zip(&noise) {
        r.response = s + e;
    }
    let mut active_terms: Vec<String> = terms.iter().filter(|(_, _, b)| *b != 0.0).map(|(_, t, _)| t.id()).collect();
    active_terms.sort();
    Ok(SyntheticData {
        points: PointDataset::new(names, records)?,
        rasters,
        truth: TruthRecord {
            spec: spec.clone(),
            active_terms,
            noise_sd,
            signal,
            noise,
        },
    })
}

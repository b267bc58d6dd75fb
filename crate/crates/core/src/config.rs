//! TOML run configuration with every numeric choice spelled out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cv::DEFAULT_SPLITS;
use crate::error::{Error, Result};
use crate::features::{CovariateMeta, DEFAULT_MAX_ORDER, DEFAULT_THRESHOLD};

/// Overrides `output` when set.
pub const OUTPUT_ENV: &str = "SITELASSO_OUTPUT_DIR";

pub const DEFAULT_TRAIN_QUOTA: usize = 35;

fn default_methods() -> Vec<String> {
    ["m1-b1", "m1-b2", "m2", "m3", "m4"].iter().map(|s| s.to_string()).collect()
}

fn default_splits() -> usize {
    DEFAULT_SPLITS
}

fn default_quota() -> usize {
    DEFAULT_TRAIN_QUOTA
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_order() -> u8 {
    DEFAULT_MAX_ORDER
}

fn default_workers() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("output")
}

/// Oracle checks evaluated after a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    /// Truth record written by `synth`.
    pub truth: Option<PathBuf>,
    /// The true terms must rank within this many of the global-effects
    /// selection table.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Minimum in-sample combined R² of the global-effects ensemble.
    pub min_r2: Option<f64>,
    /// Largest accepted deviation in the two-stage decomposition identity.
    #[serde(default = "default_decomposition_tol")]
    pub decomposition_tol: f64,
}

fn default_top_k() -> usize {
    10
}

fn default_decomposition_tol() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub points: PathBuf,
    /// Directory holding `<site>/<covariate>.asc`.
    #[serde(default)]
    pub rasters: Option<PathBuf>,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_splits")]
    pub n_splits: usize,
    #[serde(default = "default_quota")]
    pub default_train_quota: usize,
    #[serde(default)]
    pub train_quota: BTreeMap<String, usize>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_order")]
    pub max_order: u8,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Covariate name to preference rank (1 keeps first, 10 last).
    #[serde(default)]
    pub hierarchy: BTreeMap<String, u8>,
    #[serde(default)]
    pub checks: Option<ChecksConfig>,
}

impl RunConfig {
    /// Parses a config, resolving relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        c.points = resolve(&c.points);
        c.rasters = c.rasters.as_deref().map(resolve);
        c.output = resolve(&c.output);
        if let Some(checks) = &mut c.checks {
            checks.truth = checks.truth.as_deref().map(resolve);
        }
        c.validate_values()?;
        Ok(c)
    }

    /// Reads, resolves and validates a config file. The output directory
    /// environment override is applied here.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut c = Self::from_toml(&text, base)?;
        if let Ok(dir) = std::env::var(OUTPUT_ENV) {
            if !dir.is_empty() {
                c.output = PathBuf::from(dir);
            }
        }
        c.validate_paths()?;
        Ok(c)
    }

    fn validate_values(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.n_splits == 0 {
            return bad("n_splits must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("threshold must lie in (0, 1], got {}", self.threshold));
        }
        if !(1..=4).contains(&self.max_order) {
            return bad(format!("max_order must lie in 1..=4, got {}", self.max_order));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.default_train_quota == 0 || self.train_quota.values().any(|q| *q == 0) {
            return bad("training quotas must be positive".into());
        }
        if let Some((name, _)) = self.hierarchy.iter().find(|(_, r)| !(1..=10).contains(*r)) {
            return bad(format!("hierarchy rank for `{name}` must lie in 1..=10"));
        }
        if let Some(ch) = &self.checks {
            if ch.top_k == 0 || ch.min_r2.is_some_and(|r| !r.is_finite()) || !(ch.decomposition_tol >= 0.0) {
                return bad("checks need a positive top_k, a finite min_r2 and a nonnegative tolerance".into());
            }
        }
        Ok(())
    }

    fn validate_paths(&self) -> Result<()> {
        if !self.points.is_file() {
            return Err(Error::Config(format!("points file {} does not exist", self.points.display())));
        }
        if let Some(r) = &self.rasters {
            if !r.is_dir() {
                return Err(Error::Config(format!("raster directory {} does not exist", r.display())));
            }
        }
        if let Some(t) = self.checks.as_ref().and_then(|c| c.truth.as_ref()) {
            if !t.is_file() {
                return Err(Error::Config(format!("truth file {} does not exist", t.display())));
            }
        }
        Ok(())
    }

    /// Quota for every listed site, falling back to the default.
    pub fn quotas(&self, sites: &[String]) -> Result<BTreeMap<String, usize>> {
        if let Some(extra) = self.train_quota.keys().find(|s| !sites.contains(s)) {
            return Err(Error::Config(format!("train_quota names unknown site `{extra}`")));
        }
        Ok(sites
            .iter()
            .map(|s| (s.clone(), self.train_quota.get(s).copied().unwrap_or(self.default_train_quota)))
            .collect())
    }

    pub fn covariate_meta(&self, names: &[String]) -> Vec<CovariateMeta> {
        names
            .iter()
            .filter_map(|n| self.hierarchy.get(n).map(|r| CovariateMeta::new(n.clone(), *r)))
            .collect()
    }
}

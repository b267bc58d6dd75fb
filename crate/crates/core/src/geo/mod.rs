//! Rasters, thin plate splines, synthetic data and full-cover prediction.

pub mod raster;
pub mod synth;
pub mod tps;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

pub use raster::{raster_to_square_mean, RasterGrid};
pub use synth::{generate_synthetic, SyntheticData, SyntheticSpec, TruthRecord};
pub use tps::{points_to_square_mean, tps_eval, tps_fit, TpsSurface};

use crate::cv::{model_average, Ensemble};
use crate::error::{Error, Result};
use crate::features::{build_design, RawDesign, TermSpec};

/// Covariates referenced by `terms`, sorted.
pub fn term_covariates(terms: &[TermSpec]) -> Vec<String> {
    let set: BTreeSet<&str> = terms.iter().flat_map(|t| t.covariates()).collect();
    set.into_iter().map(String::from).collect()
}

/// Raw term rows for the pixels where every used covariate has data.
/// Returns the reference grid, the valid pixel indices and the design.
pub fn raster_design(
    terms: &[TermSpec],
    rasters: &BTreeMap<String, RasterGrid>,
    site: &str,
) -> Result<(RasterGrid, Vec<usize>, RawDesign)> {
    let used = term_covariates(terms);
    for c in &used {
        if !rasters.contains_key(c) {
            return Err(Error::MissingCovariate(c.clone()));
        }
    }
    let reference = match used.first() {
        Some(c) => &rasters[c],
        None => rasters
            .values()
            .next()
            .ok_or_else(|| Error::Raster("no covariate rasters supplied".into()))?,
    };
    for c in &used {
        if !rasters[c].same_grid(reference) {
            return Err(Error::Raster(format!("raster `{c}` is not on the same grid as the others")));
        }
    }
    let grids: Vec<&RasterGrid> = used.iter().map(|c| &rasters[c]).collect();
    let valid: Vec<usize> = (0..reference.len())
        .filter(|&p| grids.iter().all(|g| !g.is_nodata(g.values()[p])))
        .collect();
    let covs = Array2::from_shape_fn((valid.len(), used.len()), |(i, j)| grids[j].values()[valid[i]]);
    let sites = vec![site.to_string(); valid.len()];
    let design = build_design(terms, &used, &covs, &sites)?;
    Ok((reference.clone(), valid, design))
}

/// Sum of the model-averaged predictions of `ensembles` at every pixel.
/// Pixels with nodata in any used covariate are nodata in the output.
pub fn predict_raster_sum(
    ensembles: &[&Ensemble],
    rasters: &BTreeMap<String, RasterGrid>,
    site: &str,
) -> Result<RasterGrid> {
    let mut terms: Vec<TermSpec> = Vec::new();
    for e in ensembles {
        for t in &e.terms {
            if !terms.contains(t) {
                terms.push(t.clone());
            }
        }
    }
    let (reference, valid, design) = raster_design(&terms, rasters, site)?;
    let mut total = vec![0.0; valid.len()];
    for e in ensembles {
        for (t, v) in total.iter_mut().zip(model_average(e, &design)?) {
            *t += v;
        }
    }
    let mut out = vec![reference.nodata(); reference.len()];
    for (&p, v) in valid.iter().zip(total) {
        out[p] = v;
    }
    reference.with_values(out)
}

/// Model-averaged prediction at every pixel of a site's rasters.
pub fn predict_raster(ensemble: &Ensemble, rasters: &BTreeMap<String, RasterGrid>, site: &str) -> Result<RasterGrid> {
    predict_raster_sum(&[ensemble], rasters, site)
}

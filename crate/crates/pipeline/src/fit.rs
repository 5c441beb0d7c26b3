//! Recalibration fitting on top of sweep results.
//!
//! A sweep run that expressed raw (non-recalibrated) certainties yields,
//! per sample, the full matrix of distances between every observed
//! distribution and every ideal mixture; those matrices feed the map fit.

use std::collections::BTreeMap;

use obeval_core::prob::{ideal_mixture, tvd};
use obeval_core::recal::{fit_held_out, fit_labeled, RecalibrationMap, TvdGrid};

use crate::runner::{PipelineError, SampleResult};

/// Build one sample's distance matrix `D[expressed][target]` from its
/// aligned distributions. Returns `None` for flagged samples.
pub fn tvd_grid_for(result: &SampleResult) -> Result<Option<TvdGrid>, PipelineError> {
    let Some(dists) = &result.distributions else {
        return Ok(None);
    };
    // Fitting reads the response to an expressed certainty straight off the
    // sweep; a run that already recalibrated would fold the old map into
    // the new one.
    for (expressed, target) in result.expressed.iter().zip(result.sweep.points()) {
        if !expressed.approx_eq(*target) {
            return Err(PipelineError::Config(
                "recalibration fitting needs a raw sweep (run without a map applied)".into(),
            ));
        }
    }
    let n = result.sweep.len();
    let mut values = Vec::with_capacity(n);
    for observed in &dists.observed {
        let mut row = Vec::with_capacity(n);
        for &target in result.sweep.points() {
            let ideal = ideal_mixture(
                dists.prior.distribution(),
                dists.context_point.distribution(),
                target,
            )?;
            row.push(tvd(observed.distribution(), &ideal)?);
        }
        values.push(row);
    }
    Ok(Some(TvdGrid::new(result.sweep.clone(), values)?))
}

fn grids_by_category(
    results: &[SampleResult],
) -> Result<BTreeMap<String, Vec<TvdGrid>>, PipelineError> {
    let mut grouped: BTreeMap<String, Vec<TvdGrid>> = BTreeMap::new();
    for result in results {
        if let Some(grid) = tvd_grid_for(result)? {
            grouped.entry(result.category.clone()).or_default().push(grid);
        }
    }
    Ok(grouped)
}

/// Fit one map from every usable sample pooled together.
pub fn fit_pooled(results: &[SampleResult]) -> Result<RecalibrationMap, PipelineError> {
    let grouped = grids_by_category(results)?;
    let categories: Vec<String> = grouped.keys().cloned().collect();
    let grids: Vec<TvdGrid> = grouped.into_values().flatten().collect();
    Ok(fit_labeled(&grids, categories)?)
}

/// Fit one map per category, each from the other categories' samples.
pub fn fit_held_out_maps(
    results: &[SampleResult],
) -> Result<BTreeMap<String, RecalibrationMap>, PipelineError> {
    let grouped = grids_by_category(results)?;
    Ok(fit_held_out(&grouped)?)
}

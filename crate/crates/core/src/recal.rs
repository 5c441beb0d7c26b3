//! Fitting and applying the certainty recalibration map.
//!
//! For every target certainty `c` on the sweep grid, the map records the
//! expressed certainty `c0` whose observed response distribution sits
//! closest (in total variation distance) to the ideal behavior at `c`:
//!
//! ```text
//! Cal(c) = argmin over c0 of  mean over samples of  tvd(P(.; c0), ideal(.; c))
//! ```
//!
//! The argmin runs over the mean distance, not per-sample argmins averaged
//! afterwards: means commute with the distance average but not with argmin,
//! so the aggregate objective is the population reading. Ties break toward
//! the candidate nearest the target (then the smaller one), so an
//! uninformative model degrades to a no-op map.
//!
//! Maps persist as a small plain-text table, one `target% -> expressed%`
//! line per grid point, so they stay diffable and auditable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::{Certainty, CertaintySweep, ProbError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecalError {
    #[error("need at least one grid to fit")]
    NoGrids,
    #[error("grids disagree on the certainty sweep")]
    SweepMismatch,
    #[error("grid must be square over the sweep: got {rows} rows for a {expected}-point sweep")]
    NotSquare { rows: usize, expected: usize },
    #[error("grid entry {value} at [{row}][{col}] outside [0, 1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("held-out fitting needs at least two categories, got {0}")]
    TooFewCategories(usize),
    #[error("category `{0}` has an empty complement: no grids outside it")]
    EmptyComplement(String),
    #[error("certainty {0} is not on the map's grid")]
    OffGrid(f64),
    #[error("malformed map file: {0}")]
    Parse(String),
    #[error(transparent)]
    Prob(#[from] ProbError),
}

// ---------------------------------------------------------------------------
// TvdGrid
// ---------------------------------------------------------------------------

/// One sample's distance matrix `D[c0][c]`: the total variation distance
/// between the response observed when expressing `c0` and the ideal
/// behavior at target `c`, both indexed by the same sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvdGrid {
    sweep: CertaintySweep,
    /// Row `i` = expressed grid point `c0_i`; column `j` = target `c_j`.
    values: Vec<Vec<f64>>,
}

impl TvdGrid {
    pub fn new(sweep: CertaintySweep, values: Vec<Vec<f64>>) -> Result<Self, RecalError> {
        let n = sweep.len();
        if values.len() != n {
            return Err(RecalError::NotSquare {
                rows: values.len(),
                expected: n,
            });
        }
        for (i, row) in values.iter().enumerate() {
            if row.len() != n {
                return Err(RecalError::NotSquare {
                    rows: row.len(),
                    expected: n,
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(RecalError::EntryOutOfRange {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        Ok(Self { sweep, values })
    }

    pub fn sweep(&self) -> &CertaintySweep {
        &self.sweep
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

// ---------------------------------------------------------------------------
// RecalibrationMap
// ---------------------------------------------------------------------------

/// Provenance of a fitted map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    /// Categories whose samples entered the fit; empty means unannotated.
    pub fit_categories: Vec<String>,
    pub sample_count: usize,
    /// Unconstrained endpoints that fitted away from the identity, e.g.
    /// `cal(0%)=20%`. Recorded, never corrected.
    pub endpoint_violations: Vec<String>,
}

/// The fitted grid-to-grid lookup from target to expressed certainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecalibrationMap {
    sweep: CertaintySweep,
    /// `mapping[j]` is the expressed certainty for target `sweep[j]`.
    mapping: Vec<Certainty>,
    pub metadata: FitMetadata,
}

impl RecalibrationMap {
    /// The identity map on a sweep.
    pub fn identity(sweep: CertaintySweep) -> Self {
        let mapping = sweep.points().to_vec();
        Self {
            sweep,
            mapping,
            metadata: FitMetadata {
                fit_categories: Vec::new(),
                sample_count: 0,
                endpoint_violations: Vec::new(),
            },
        }
    }

    pub fn sweep(&self) -> &CertaintySweep {
        &self.sweep
    }

    pub fn mapping(&self) -> &[Certainty] {
        &self.mapping
    }

    /// Look up the expressed certainty for a target on the grid. Off-grid
    /// targets are an error; no interpolation is attempted.
    pub fn apply(&self, c: Certainty) -> Result<Certainty, RecalError> {
        let index = self
            .sweep
            .index_of(c)
            .ok_or(RecalError::OffGrid(c.value()))?;
        Ok(self.mapping[index])
    }

    /// Render as the plain-text table format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# recalibration map v1\n");
        let categories = if self.metadata.fit_categories.is_empty() {
            "all".to_string()
        } else {
            self.metadata.fit_categories.join(", ")
        };
        out.push_str(&format!("# fit-categories: {categories}\n"));
        out.push_str(&format!("# samples: {}\n", self.metadata.sample_count));
        let violations = if self.metadata.endpoint_violations.is_empty() {
            "none".to_string()
        } else {
            self.metadata.endpoint_violations.join(", ")
        };
        out.push_str(&format!("# endpoint-violations: {violations}\n"));
        for (target, expressed) in self.sweep.points().iter().zip(&self.mapping) {
            out.push_str(&format!("{target} -> {expressed}\n"));
        }
        out
    }

    /// Parse the plain-text table format.
    pub fn from_text(text: &str) -> Result<Self, RecalError> {
        let mut fit_categories = Vec::new();
        let mut sample_count = 0usize;
        let mut endpoint_violations = Vec::new();
        let mut targets = Vec::new();
        let mut expressed = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("fit-categories:") {
                    let v = v.trim();
                    if v != "all" {
                        fit_categories = v.split(',').map(|s| s.trim().to_string()).collect();
                    }
                } else if let Some(v) = rest.strip_prefix("samples:") {
                    sample_count = v
                        .trim()
                        .parse()
                        .map_err(|_| RecalError::Parse(format!("bad sample count `{v}`")))?;
                } else if let Some(v) = rest.strip_prefix("endpoint-violations:") {
                    let v = v.trim();
                    if v != "none" {
                        endpoint_violations =
                            v.split(',').map(|s| s.trim().to_string()).collect();
                    }
                }
                continue;
            }
            let (lhs, rhs) = line
                .split_once("->")
                .ok_or_else(|| RecalError::Parse(format!("expected `a% -> b%`, got `{line}`")))?;
            targets.push(parse_percent(lhs)?);
            expressed.push(parse_percent(rhs)?);
        }
        let sweep = CertaintySweep::new(targets)?;
        if expressed.len() != sweep.len() {
            return Err(RecalError::Parse("target/expressed count mismatch".into()));
        }
        Ok(Self {
            sweep,
            mapping: expressed,
            metadata: FitMetadata {
                fit_categories,
                sample_count,
                endpoint_violations,
            },
        })
    }
}

fn parse_percent(text: &str) -> Result<Certainty, RecalError> {
    let trimmed = text.trim();
    let digits = trimmed
        .strip_suffix('%')
        .ok_or_else(|| RecalError::Parse(format!("expected percent, got `{trimmed}`")))?;
    let value: f64 = digits
        .trim()
        .parse()
        .map_err(|_| RecalError::Parse(format!("bad percent `{trimmed}`")))?;
    Certainty::new(value / 100.0).map_err(RecalError::Prob)
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

fn check_sweeps(grids: &[TvdGrid]) -> Result<&CertaintySweep, RecalError> {
    let first = grids.first().ok_or(RecalError::NoGrids)?;
    for grid in grids {
        if grid.sweep != first.sweep {
            return Err(RecalError::SweepMismatch);
        }
    }
    Ok(&first.sweep)
}

/// Fit the map from per-sample distance grids pooled together.
pub fn fit(grids: &[TvdGrid]) -> Result<RecalibrationMap, RecalError> {
    fit_labeled(grids, Vec::new())
}

/// Fit with an explicit category annotation for the metadata.
pub fn fit_labeled(
    grids: &[TvdGrid],
    fit_categories: Vec<String>,
) -> Result<RecalibrationMap, RecalError> {
    let sweep = check_sweeps(grids)?.clone();
    let n = sweep.len();
    let count = grids.len() as f64;
    // mean[i][j] over samples of D[c0_i][c_j]
    let mut mean = vec![vec![0.0_f64; n]; n];
    for grid in grids {
        for (i, row) in grid.values().iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                mean[i][j] += v / count;
            }
        }
    }
    let percents: Vec<i64> = sweep
        .points()
        .iter()
        .map(|p| p.percent().map(i64::from).unwrap_or((p.value() * 100.0).round() as i64))
        .collect();
    let mut mapping = Vec::with_capacity(n);
    for j in 0..n {
        let mut best = 0usize;
        for i in 1..n {
            let better = if mean[i][j] < mean[best][j] {
                true
            } else if mean[i][j] == mean[best][j] {
                // Tie: prefer the candidate closest to the target, then the
                // smaller one (which iteration order already guarantees).
                (percents[i] - percents[j]).abs() < (percents[best] - percents[j]).abs()
            } else {
                false
            };
            if better {
                best = i;
            }
        }
        mapping.push(sweep.points()[best]);
    }
    let mut endpoint_violations = Vec::new();
    if mapping[0].value() != 0.0 {
        endpoint_violations.push(format!("cal(0%)={}", mapping[0]));
    }
    if mapping[n - 1].value() != 1.0 {
        endpoint_violations.push(format!("cal(100%)={}", mapping[n - 1]));
    }
    Ok(RecalibrationMap {
        sweep,
        mapping,
        metadata: FitMetadata {
            fit_categories,
            sample_count: grids.len(),
            endpoint_violations,
        },
    })
}

/// Fit one map per category, each using only the grids from all *other*
/// categories.
pub fn fit_held_out(
    per_category: &BTreeMap<String, Vec<TvdGrid>>,
) -> Result<BTreeMap<String, RecalibrationMap>, RecalError> {
    if per_category.len() < 2 {
        return Err(RecalError::TooFewCategories(per_category.len()));
    }
    let mut maps = BTreeMap::new();
    for target in per_category.keys() {
        let mut complement = Vec::new();
        let mut complement_names = Vec::new();
        for (category, grids) in per_category {
            if category != target {
                complement.extend(grids.iter().cloned());
                complement_names.push(category.clone());
            }
        }
        if complement.is_empty() {
            return Err(RecalError::EmptyComplement(target.clone()));
        }
        maps.insert(target.clone(), fit_labeled(&complement, complement_names)?);
    }
    Ok(maps)
}

//! Aggregation of per-sample results into tables and figures.
//!
//! Data tables (comma-separated, documented headers) are the authoritative
//! output; the vector images are conveniences rendered by a minimal built-in
//! SVG writer, with no external plotting runtime. All emission is
//! byte-stable across reruns: deterministic iteration orders and Rust's
//! shortest round-trip float formatting.
//!
//! On averaging: the similarity curves are plain (signed) means across
//! samples, which can cancel opposing per-sample errors; the deviation curve
//! is a mean of absolute distances and cannot. Both are emitted under
//! distinct column names, and only the deviation curve feeds the obedience
//! error.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::{obedience_error, Certainty, CertaintySweep, ObedienceRecord, ProbError};
use crate::recal::RecalibrationMap;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no samples to aggregate")]
    Empty,
    #[error("samples disagree on the certainty sweep")]
    SweepMismatch,
    #[error("ideal curve for sample `{id}` has {got} points for a {expected}-point sweep")]
    IdealLengthMismatch {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error("ablation rows disagree on backends: row `{0}` differs from the first row")]
    BackendMismatch(String),
    #[error("ablation cells disagree on the evaluated sample set (row `{0}`, backend `{1}`)")]
    SampleSetMismatch(String, String),
    #[error("heatmap entry has {field} = {value}, outside [0, 1]")]
    EntryOutOfRange { field: &'static str, value: f64 },
    #[error("failed to write `{path}`: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Prob(#[from] ProbError),
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| ReportError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        }
    }
    std::fs::write(path, contents).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Aggregate curves
// ---------------------------------------------------------------------------

/// One usable sample's diagnostic curves plus its ideal-behavior reference
/// endpoints (computed from the sample's own prior mass on the context
/// answer, so every sample contributes its own ideal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCurves {
    pub id: String,
    pub record: ObedienceRecord,
    pub ideal_sim_to_context: Vec<f64>,
    pub ideal_sim_to_prior: Vec<f64>,
}

/// Pointwise means of the per-sample curves over a shared sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurves {
    pub sweep: CertaintySweep,
    pub n: usize,
    pub sample_ids: Vec<String>,
    /// Samples dropped before aggregation (degenerate traces and other
    /// per-sample diagnostics), listed for the record.
    pub excluded_ids: Vec<String>,
    pub sim_to_context: Vec<f64>,
    pub sim_to_prior: Vec<f64>,
    pub deviation: Vec<f64>,
    pub ideal_sim_to_context: Vec<f64>,
    pub ideal_sim_to_prior: Vec<f64>,
    pub epsilon_obey: f64,
}

/// Average per-sample curves pointwise. Because integration and averaging
/// commute, the area under the mean deviation curve equals the mean of the
/// per-sample obedience errors.
pub fn aggregate(
    samples: &[SampleCurves],
    excluded_ids: Vec<String>,
) -> Result<AggregateCurves, ReportError> {
    let first = samples.first().ok_or(ReportError::Empty)?;
    let sweep = first.record.sweep.clone();
    let n_points = sweep.len();
    for sample in samples {
        if sample.record.sweep != sweep {
            return Err(ReportError::SweepMismatch);
        }
        for curve in [&sample.ideal_sim_to_context, &sample.ideal_sim_to_prior] {
            if curve.len() != n_points {
                return Err(ReportError::IdealLengthMismatch {
                    id: sample.id.clone(),
                    got: curve.len(),
                    expected: n_points,
                });
            }
        }
    }
    let n = samples.len();
    let mean = |extract: &dyn Fn(&SampleCurves) -> &[f64]| -> Vec<f64> {
        (0..n_points)
            .map(|i| samples.iter().map(|s| extract(s)[i]).sum::<f64>() / n as f64)
            .collect()
    };
    let sim_to_context = mean(&|s| &s.record.sim_to_context);
    let sim_to_prior = mean(&|s| &s.record.sim_to_prior);
    let deviation = mean(&|s| &s.record.deviation);
    let ideal_sim_to_context = mean(&|s| &s.ideal_sim_to_context);
    let ideal_sim_to_prior = mean(&|s| &s.ideal_sim_to_prior);
    let curve: Vec<(Certainty, f64)> = sweep
        .points()
        .iter()
        .copied()
        .zip(deviation.iter().copied())
        .collect();
    let epsilon_obey = obedience_error(&curve)?;
    Ok(AggregateCurves {
        sweep,
        n,
        sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
        excluded_ids,
        sim_to_context,
        sim_to_prior,
        deviation,
        ideal_sim_to_context,
        ideal_sim_to_prior,
        epsilon_obey,
    })
}

pub const CURVES_CSV_HEADER: &str = "certainty,sim_ctx,sim_prior,deviation,ideal_ctx,ideal_prior,n";

/// Render the aggregate-curves table.
pub fn curves_csv(curves: &AggregateCurves) -> String {
    let mut out = String::from(CURVES_CSV_HEADER);
    out.push('\n');
    for (i, c) in curves.sweep.points().iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.value(),
            curves.sim_to_context[i],
            curves.sim_to_prior[i],
            curves.deviation[i],
            curves.ideal_sim_to_context[i],
            curves.ideal_sim_to_prior[i],
            curves.n
        ));
    }
    out
}

pub fn write_curves_csv(curves: &AggregateCurves, path: &Path) -> Result<(), ReportError> {
    write_file(path, &curves_csv(curves))
}

// ---------------------------------------------------------------------------
// Heatmap
// ---------------------------------------------------------------------------

/// One (self-confidence, certainty, deviation) observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub self_confidence: f64,
    pub certainty: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    /// Mean deviation of the bin; `None` flags an empty bin rather than
    /// zero-filling it.
    pub mean_deviation: Option<f64>,
}

/// A 5x5 binning of deviation over (self-confidence, context certainty),
/// with bin edges at 0, 0.2, 0.4, 0.6, 0.8, 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// `bins[confidence_bin][certainty_bin]`.
    pub bins: Vec<Vec<BinStat>>,
}

pub const HEATMAP_BINS: usize = 5;

fn bin_index(value: f64) -> usize {
    ((value * HEATMAP_BINS as f64).floor() as usize).min(HEATMAP_BINS - 1)
}

pub fn heatmap(entries: &[HeatmapEntry]) -> Result<Heatmap, ReportError> {
    if entries.is_empty() {
        return Err(ReportError::Empty);
    }
    for entry in entries {
        for (field, value) in [
            ("self_confidence", entry.self_confidence),
            ("certainty", entry.certainty),
            ("deviation", entry.deviation),
        ] {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(ReportError::EntryOutOfRange { field, value });
            }
        }
    }
    let mut sums = vec![vec![0.0_f64; HEATMAP_BINS]; HEATMAP_BINS];
    let mut counts = vec![vec![0usize; HEATMAP_BINS]; HEATMAP_BINS];
    for entry in entries {
        let i = bin_index(entry.self_confidence);
        let j = bin_index(entry.certainty);
        sums[i][j] += entry.deviation;
        counts[i][j] += 1;
    }
    let bins = (0..HEATMAP_BINS)
        .map(|i| {
            (0..HEATMAP_BINS)
                .map(|j| BinStat {
                    count: counts[i][j],
                    mean_deviation: if counts[i][j] > 0 {
                        Some(sums[i][j] / counts[i][j] as f64)
                    } else {
                        None
                    },
                })
                .collect()
        })
        .collect();
    Ok(Heatmap { bins })
}

pub const HEATMAP_CSV_HEADER: &str = "conf_lo,conf_hi,cert_lo,cert_hi,mean_deviation,count";

/// Render the heatmap table. Empty bins carry an empty mean field.
pub fn heatmap_csv(map: &Heatmap) -> String {
    let mut out = String::from(HEATMAP_CSV_HEADER);
    out.push('\n');
    for (i, row) in map.bins.iter().enumerate() {
        for (j, bin) in row.iter().enumerate() {
            let mean = bin
                .mean_deviation
                .map(|m| m.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i as f64 * 0.2,
                (i + 1) as f64 * 0.2,
                j as f64 * 0.2,
                (j + 1) as f64 * 0.2,
                mean,
                bin.count
            ));
        }
    }
    out
}

pub fn write_heatmap_csv(map: &Heatmap, path: &Path) -> Result<(), ReportError> {
    write_file(path, &heatmap_csv(map))
}

// ---------------------------------------------------------------------------
// Ablation table
// ---------------------------------------------------------------------------

/// Obedience errors per (configuration, backend) cell with a trailing
/// per-row average, reported at two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub backends: Vec<String>,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub cells: Vec<f64>,
    pub average: f64,
}

/// Build the table from ordered rows of per-backend aggregates. All cells
/// must share the sweep and the evaluated sample set.
pub fn ablation_table(
    rows: &[(String, BTreeMap<String, AggregateCurves>)],
) -> Result<AblationTable, ReportError> {
    let first = rows.first().ok_or(ReportError::Empty)?;
    let backends: Vec<String> = first.1.keys().cloned().collect();
    if backends.is_empty() {
        return Err(ReportError::Empty);
    }
    let reference_ids = sorted_ids(first.1.values().next().ok_or(ReportError::Empty)?);
    let reference_sweep = &first.1.values().next().unwrap().sweep;
    let mut table_rows = Vec::with_capacity(rows.len());
    for (config, cells) in rows {
        let row_backends: Vec<String> = cells.keys().cloned().collect();
        if row_backends != backends {
            return Err(ReportError::BackendMismatch(config.clone()));
        }
        let mut values = Vec::with_capacity(backends.len());
        for backend in &backends {
            let curves = &cells[backend];
            if sorted_ids(curves) != reference_ids || &curves.sweep != reference_sweep {
                return Err(ReportError::SampleSetMismatch(
                    config.clone(),
                    backend.clone(),
                ));
            }
            values.push(curves.epsilon_obey);
        }
        let average = values.iter().sum::<f64>() / values.len() as f64;
        table_rows.push(AblationRow {
            config: config.clone(),
            cells: values,
            average,
        });
    }
    Ok(AblationTable {
        backends,
        rows: table_rows,
    })
}

fn sorted_ids(curves: &AggregateCurves) -> Vec<String> {
    let mut ids = curves.sample_ids.clone();
    ids.sort_unstable();
    ids
}

/// Render the ablation table with two-decimal cells.
pub fn ablation_csv(table: &AblationTable) -> String {
    let mut out = String::from("config");
    for backend in &table.backends {
        out.push(',');
        out.push_str(backend);
    }
    out.push_str(",average\n");
    for row in &table.rows {
        out.push_str(&row.config);
        for cell in &row.cells {
            out.push_str(&format!(",{cell:.2}"));
        }
        out.push_str(&format!(",{:.2}\n", row.average));
    }
    out
}

pub fn write_ablation_csv(table: &AblationTable, path: &Path) -> Result<(), ReportError> {
    write_file(path, &ablation_csv(table))
}

// ---------------------------------------------------------------------------
// Recalibration map emission
// ---------------------------------------------------------------------------

pub const RECAL_CSV_HEADER: &str = "target,expressed";

/// Two-column target-to-expressed table: the target axis is the true
/// certainty, the expressed axis is the value inserted into the prompt.
pub fn recal_map_csv(map: &RecalibrationMap) -> String {
    let mut out = String::from(RECAL_CSV_HEADER);
    out.push('\n');
    for (target, expressed) in map.sweep().points().iter().zip(map.mapping()) {
        out.push_str(&format!("{},{}\n", target.value(), expressed.value()));
    }
    out
}

pub fn write_recal_map_csv(map: &RecalibrationMap, path: &Path) -> Result<(), ReportError> {
    write_file(path, &recal_map_csv(map))
}

// ---------------------------------------------------------------------------
// SVG figures
// ---------------------------------------------------------------------------

mod svg {
    use std::fmt::Write;

    pub const WIDTH: f64 = 640.0;
    pub const HEIGHT: f64 = 420.0;
    pub const MARGIN_LEFT: f64 = 60.0;
    pub const MARGIN_RIGHT: f64 = 20.0;
    pub const MARGIN_TOP: f64 = 30.0;
    pub const MARGIN_BOTTOM: f64 = 50.0;

    pub fn x_pixel(v: f64) -> f64 {
        MARGIN_LEFT + v * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    pub fn y_pixel(v: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM - v * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }

    pub struct Document {
        body: String,
    }

    impl Document {
        pub fn new(title: &str) -> Self {
            let mut body = String::new();
            write!(
                body,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
                 font-family=\"sans-serif\" font-size=\"12\">\n\
                 <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
                 <text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
                WIDTH / 2.0,
                escape(title)
            )
            .unwrap();
            Self { body }
        }

        pub fn axes(&mut self, x_label: &str, y_label: &str) {
            let x0 = MARGIN_LEFT;
            let x1 = WIDTH - MARGIN_RIGHT;
            let y0 = HEIGHT - MARGIN_BOTTOM;
            let y1 = MARGIN_TOP;
            write!(
                self.body,
                "<line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x1:.1}\" y2=\"{y0:.1}\" stroke=\"black\"/>\n\
                 <line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x0:.1}\" y2=\"{y1:.1}\" stroke=\"black\"/>\n"
            )
            .unwrap();
            for i in 0..=5 {
                let v = i as f64 * 0.2;
                let xp = x_pixel(v);
                let yp = y_pixel(v);
                write!(
                    self.body,
                    "<line x1=\"{xp:.1}\" y1=\"{y0:.1}\" x2=\"{xp:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
                     <text x=\"{xp:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.1}</text>\n\
                     <line x1=\"{x0:.1}\" y1=\"{yp:.1}\" x2=\"{:.1}\" y2=\"{yp:.1}\" stroke=\"black\"/>\n\
                     <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
                    y0 + 5.0,
                    y0 + 20.0,
                    x0 - 5.0,
                    x0 - 8.0,
                    yp + 4.0
                )
                .unwrap();
            }
            writeln!(
                self.body,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
                 <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
                (x0 + x1) / 2.0,
                HEIGHT - 12.0,
                escape(x_label),
                (y0 + y1) / 2.0,
                (y0 + y1) / 2.0,
                escape(y_label)
            )
            .unwrap();
        }

        pub fn polyline(&mut self, points: &[(f64, f64)], color: &str, dashed: bool) {
            let coords: Vec<String> = points
                .iter()
                .map(|(x, y)| format!("{:.1},{:.1}", x_pixel(*x), y_pixel(*y)))
                .collect();
            let dash = if dashed {
                " stroke-dasharray=\"6 4\""
            } else {
                ""
            };
            writeln!(
                self.body,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>",
                coords.join(" ")
            )
            .unwrap();
        }

        pub fn legend(&mut self, entries: &[(&str, &str, bool)]) {
            let x = WIDTH - MARGIN_RIGHT - 180.0;
            for (i, (label, color, dashed)) in entries.iter().enumerate() {
                let y = MARGIN_TOP + 14.0 + i as f64 * 16.0;
                let dash = if *dashed {
                    " stroke-dasharray=\"6 4\""
                } else {
                    ""
                };
                write!(
                    self.body,
                    "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>\n\
                     <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
                    x + 26.0,
                    x + 32.0,
                    y + 4.0,
                    escape(label)
                )
                .unwrap();
            }
        }

        pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
            writeln!(
                self.body,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"{h:.1}\" \
                 fill=\"{fill}\" stroke=\"black\" stroke-width=\"0.5\"/>"
            )
            .unwrap();
        }

        pub fn text_at(&mut self, x: f64, y: f64, text: &str) {
            writeln!(
                self.body,
                "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"middle\">{}</text>",
                escape(text)
            )
            .unwrap();
        }

        pub fn finish(mut self) -> String {
            self.body.push_str("</svg>\n");
            self.body
        }
    }

    pub fn escape(text: &str) -> String {
        text.replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;")
    }

    /// White-to-red ramp for deviation values in [0, 1].
    pub fn ramp(value: f64) -> String {
        let v = value.clamp(0.0, 1.0);
        let other = (255.0 * (1.0 - v)).round() as u8;
        format!("rgb(255,{other},{other})")
    }
}

/// Render the three diagnostic curves plus the dashed ideal references.
pub fn curves_svg(curves: &AggregateCurves, title: &str) -> String {
    let mut doc = svg::Document::new(title);
    doc.axes("context certainty", "similarity / deviation");
    let xs: Vec<f64> = curves.sweep.points().iter().map(|c| c.value()).collect();
    let series: [(&Vec<f64>, &str, bool); 5] = [
        (&curves.ideal_sim_to_context, "#999999", true),
        (&curves.ideal_sim_to_prior, "#bbbbbb", true),
        (&curves.sim_to_context, "#1f77b4", false),
        (&curves.sim_to_prior, "#2ca02c", false),
        (&curves.deviation, "#d62728", false),
    ];
    for (values, color, dashed) in series {
        let points: Vec<(f64, f64)> = xs.iter().copied().zip(values.iter().copied()).collect();
        doc.polyline(&points, color, dashed);
    }
    doc.legend(&[
        ("similarity to context", "#1f77b4", false),
        ("similarity to prior", "#2ca02c", false),
        ("deviation from ideal", "#d62728", false),
        ("ideal (context)", "#999999", true),
        ("ideal (prior)", "#bbbbbb", true),
    ]);
    doc.finish()
}

pub fn write_curves_svg(
    curves: &AggregateCurves,
    title: &str,
    path: &Path,
) -> Result<(), ReportError> {
    write_file(path, &curves_svg(curves, title))
}

/// Render the 5x5 heatmap; empty bins are hatched gray with a dash label.
pub fn heatmap_svg(map: &Heatmap, title: &str) -> String {
    let mut doc = svg::Document::new(title);
    doc.axes("context certainty", "self-confidence");
    for (i, row) in map.bins.iter().enumerate() {
        for (j, bin) in row.iter().enumerate() {
            let x = svg::x_pixel(j as f64 * 0.2);
            let y = svg::y_pixel((i + 1) as f64 * 0.2);
            let w = svg::x_pixel(0.2) - svg::x_pixel(0.0);
            let h = svg::y_pixel(0.0) - svg::y_pixel(0.2);
            let fill = match bin.mean_deviation {
                Some(mean) => svg::ramp(mean),
                None => "#dddddd".to_string(),
            };
            doc.rect(x, y, w, h, &fill);
            let label = match bin.mean_deviation {
                Some(mean) => format!("{mean:.2} ({})", bin.count),
                None => "-".to_string(),
            };
            doc.text_at(x + w / 2.0, y + h / 2.0 + 4.0, &label);
        }
    }
    doc.finish()
}

pub fn write_heatmap_svg(map: &Heatmap, title: &str, path: &Path) -> Result<(), ReportError> {
    write_file(path, &heatmap_svg(map, title))
}

/// Render the recalibration map as a step plot over the identity diagonal.
pub fn recal_map_svg(map: &RecalibrationMap, title: &str) -> String {
    let mut doc = svg::Document::new(title);
    doc.axes("target certainty", "expressed certainty");
    doc.polyline(&[(0.0, 0.0), (1.0, 1.0)], "#999999", true);
    let points: Vec<(f64, f64)> = map
        .sweep()
        .points()
        .iter()
        .zip(map.mapping())
        .map(|(t, e)| (t.value(), e.value()))
        .collect();
    doc.polyline(&points, "#1f77b4", false);
    doc.legend(&[("fitted map", "#1f77b4", false), ("identity", "#999999", true)]);
    doc.finish()
}

pub fn write_recal_map_svg(
    map: &RecalibrationMap,
    title: &str,
    path: &Path,
) -> Result<(), ReportError> {
    write_file(path, &recal_map_svg(map, title))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recal::{fit, TvdGrid};

    fn sample_curves(id: &str, deviation: Vec<f64>) -> SampleCurves {
        let sweep = CertaintySweep::default();
        let n = sweep.len();
        let record = ObedienceRecord::new(
            sweep,
            vec![0.5; n],
            vec![0.5; n],
            deviation,
        )
        .unwrap();
        SampleCurves {
            id: id.to_string(),
            record,
            ideal_sim_to_context: vec![0.9; n],
            ideal_sim_to_prior: vec![0.8; n],
        }
    }

    #[test]
    fn single_sample_aggregate_is_identity() {
        let s = sample_curves("a", vec![0.0, 0.1, 0.2, 0.2, 0.1, 0.0]);
        let agg = aggregate(std::slice::from_ref(&s), vec![]).unwrap();
        assert_eq!(agg.deviation, s.record.deviation);
        assert_eq!(agg.n, 1);
        assert!((agg.epsilon_obey - s.record.epsilon_obey).abs() < 1e-15);
    }

    #[test]
    fn two_sample_mean_is_midpoint() {
        let a = sample_curves("a", vec![0.0; 6]);
        let b = sample_curves("b", vec![0.4; 6]);
        let agg = aggregate(&[a, b], vec![]).unwrap();
        assert!(agg.deviation.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn aggregation_lists_excluded_samples() {
        let a = sample_curves("a", vec![0.1; 6]);
        let agg = aggregate(&[a], vec!["broken".to_string()]).unwrap();
        assert_eq!(agg.excluded_ids, vec!["broken"]);
    }

    #[test]
    fn aggregate_requires_samples() {
        assert!(matches!(aggregate(&[], vec![]), Err(ReportError::Empty)));
    }

    #[test]
    fn curve_csv_header_and_round_trip() {
        let agg = aggregate(
            &[sample_curves("a", vec![0.0, 0.128, 0.192, 0.192, 0.128, 0.0])],
            vec![],
        )
        .unwrap();
        let text = curves_csv(&agg);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CURVES_CSV_HEADER));
        // Shortest round-trip float formatting: parsing back is exact.
        for (i, line) in lines.enumerate() {
            let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
            assert_eq!(fields[0], agg.sweep.points()[i].value());
            assert_eq!(fields[3], agg.deviation[i]);
            assert_eq!(fields[6] as usize, agg.n);
        }
    }

    #[test]
    fn emission_is_byte_stable() {
        let agg = aggregate(
            &[sample_curves("a", vec![0.0, 0.128, 0.192, 0.192, 0.128, 0.0])],
            vec![],
        )
        .unwrap();
        assert_eq!(curves_csv(&agg), curves_csv(&agg));
        assert_eq!(curves_svg(&agg, "t"), curves_svg(&agg, "t"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        write_curves_csv(&agg, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        write_curves_csv(&agg, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn heatmap_single_bin() {
        let entries = vec![
            HeatmapEntry {
                self_confidence: 0.1,
                certainty: 0.1,
                deviation: 0.5,
            };
            4
        ];
        let map = heatmap(&entries).unwrap();
        assert_eq!(map.bins[0][0].count, 4);
        assert_eq!(map.bins[0][0].mean_deviation, Some(0.5));
        let populated: usize = map
            .bins
            .iter()
            .flatten()
            .filter(|b| b.mean_deviation.is_some())
            .count();
        assert_eq!(populated, 1);
    }

    #[test]
    fn heatmap_uniform_population_is_flat() {
        let mut entries = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                entries.push(HeatmapEntry {
                    self_confidence: i as f64 * 0.2 + 0.1,
                    certainty: j as f64 * 0.2 + 0.1,
                    deviation: 0.3,
                });
            }
        }
        let map = heatmap(&entries).unwrap();
        for row in &map.bins {
            for bin in row {
                assert_eq!(bin.count, 1);
                assert_eq!(bin.mean_deviation, Some(0.3));
            }
        }
    }

    #[test]
    fn heatmap_diagonal_ridge() {
        // deviation highest where confidence and certainty agree: the
        // per-row argmax must land on the diagonal.
        let mut entries = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                entries.push(HeatmapEntry {
                    self_confidence: i as f64 * 0.2 + 0.1,
                    certainty: j as f64 * 0.2 + 0.1,
                    deviation: 1.0 - (i as f64 - j as f64).abs() * 0.2,
                });
            }
        }
        let map = heatmap(&entries).unwrap();
        for (i, row) in map.bins.iter().enumerate() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| {
                    a.1.mean_deviation
                        .unwrap()
                        .total_cmp(&b.1.mean_deviation.unwrap())
                })
                .unwrap()
                .0;
            assert_eq!(argmax, i);
        }
    }

    #[test]
    fn heatmap_top_edge_lands_in_last_bin() {
        let entries = vec![HeatmapEntry {
            self_confidence: 1.0,
            certainty: 1.0,
            deviation: 0.0,
        }];
        let map = heatmap(&entries).unwrap();
        assert_eq!(map.bins[4][4].count, 1);
    }

    #[test]
    fn heatmap_csv_flags_empty_bins() {
        let entries = vec![HeatmapEntry {
            self_confidence: 0.1,
            certainty: 0.1,
            deviation: 0.5,
        }];
        let text = heatmap_csv(&heatmap(&entries).unwrap());
        assert!(text.starts_with(HEATMAP_CSV_HEADER));
        assert!(text.contains("0,0.2,0,0.2,0.5,1"));
        assert!(text.contains("0.2,0.4,0.2,0.4,,0"));
    }

    fn constant_aggregate(id_set: &[&str], epsilon: f64) -> AggregateCurves {
        let samples: Vec<SampleCurves> = id_set
            .iter()
            .map(|id| sample_curves(id, vec![epsilon; 6]))
            .collect();
        aggregate(&samples, vec![]).unwrap()
    }

    #[test]
    fn ablation_table_reproduces_reported_averages() {
        // Published-style fixture: eight backends, baseline row averaging
        // 0.52 and full-strategy row averaging 0.39 at two decimals.
        let baseline = [0.48, 0.49, 0.51, 0.70, 0.46, 0.51, 0.48, 0.50];
        let full = [0.28, 0.34, 0.49, 0.57, 0.31, 0.35, 0.29, 0.47];
        let backends: Vec<String> = (0..8).map(|i| format!("m{i}")).collect();
        let row = |cells: &[f64]| -> BTreeMap<String, AggregateCurves> {
            backends
                .iter()
                .zip(cells)
                .map(|(b, &e)| (b.clone(), constant_aggregate(&["s0"], e)))
                .collect()
        };
        let table = ablation_table(&[
            ("baseline".to_string(), row(&baseline)),
            ("remind+recal+simplify".to_string(), row(&full)),
        ])
        .unwrap();
        assert_eq!(format!("{:.2}", table.rows[0].average), "0.52");
        assert_eq!(format!("{:.2}", table.rows[1].average), "0.39");
        let text = ablation_csv(&table);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "config,m0,m1,m2,m3,m4,m5,m6,m7,average");
        assert!(lines[1].ends_with("0.52"));
        assert!(lines[2].starts_with("remind+recal+simplify,0.28,"));
        assert!(lines[2].ends_with("0.39"));
    }

    #[test]
    fn ablation_rejects_mismatched_sample_sets() {
        let rows = vec![
            (
                "a".to_string(),
                BTreeMap::from([("m".to_string(), constant_aggregate(&["s0"], 0.1))]),
            ),
            (
                "b".to_string(),
                BTreeMap::from([("m".to_string(), constant_aggregate(&["s1"], 0.1))]),
            ),
        ];
        assert!(matches!(
            ablation_table(&rows),
            Err(ReportError::SampleSetMismatch(..))
        ));
    }

    #[test]
    fn ablation_rejects_mismatched_backends() {
        let rows = vec![
            (
                "a".to_string(),
                BTreeMap::from([("m".to_string(), constant_aggregate(&["s0"], 0.1))]),
            ),
            (
                "b".to_string(),
                BTreeMap::from([("other".to_string(), constant_aggregate(&["s0"], 0.1))]),
            ),
        ];
        assert!(matches!(
            ablation_table(&rows),
            Err(ReportError::BackendMismatch(_))
        ));
    }

    #[test]
    fn recal_map_emission() {
        let sweep = CertaintySweep::default();
        let grid = TvdGrid::new(
            sweep.clone(),
            sweep
                .points()
                .iter()
                .map(|c0| {
                    sweep
                        .points()
                        .iter()
                        .map(|c| (0.8 * (c0.value() * c0.value() - c.value()).abs()).clamp(0.0, 1.0))
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        let map = fit(&[grid]).unwrap();
        let text = recal_map_csv(&map);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], RECAL_CSV_HEADER);
        assert_eq!(lines[1], "0,0");
        assert_eq!(lines[2], "0.2,0.4");
        assert_eq!(lines[6], "1,1");
        let svg = recal_map_svg(&map, "map");
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn mean_epsilon_equals_epsilon_of_mean(
                curves in proptest::collection::vec(
                    proptest::collection::vec(0.0_f64..=1.0, 6), 1..12),
            ) {
                let samples: Vec<SampleCurves> = curves
                    .iter()
                    .enumerate()
                    .map(|(i, c)| sample_curves(&format!("s{i}"), c.clone()))
                    .collect();
                let mean_eps = samples.iter().map(|s| s.record.epsilon_obey).sum::<f64>()
                    / samples.len() as f64;
                let agg = aggregate(&samples, vec![]).unwrap();
                prop_assert!((agg.epsilon_obey - mean_eps).abs() < 1e-12);
            }
        }
    }
}

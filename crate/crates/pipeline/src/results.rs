//! Run persistence: a manifest, line-delimited per-sample summaries, and a
//! sidecar directory of per-sample curve tables.
//!
//! Layout of a run directory:
//!
//! ```text
//! <out>/
//!   manifest.json     run provenance: config, dataset hash, backend
//!                     identity, template hashes, timestamps, call counts
//!   results.jsonl     one summary per sample, sorted by id
//!   filter.json       retrieval-filter report (when filtering ran)
//!   curves/<id>.csv   per-sample diagnostic curves over the sweep
//! ```
//!
//! Everything except the manifest's timestamp is byte-stable across reruns
//! with a deterministic backend.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use obeval_core::dataset::{FilterReport, Sample};
use obeval_core::prob::{Certainty, CertaintySweep, ObedienceRecord};
use obeval_core::prompt::{PromptMode, TemplateSet};
use obeval_core::report::{HeatmapEntry, SampleCurves};

use crate::cache::CallCounts;
use crate::runner::{GenerationPolicy, PipelineError, RunOutcome, SampleFailure};

pub const MANIFEST_VERSION: u32 = 1;
pub const SAMPLE_CURVE_HEADER: &str =
    "target,expressed,sim_ctx,sim_prior,deviation,ideal_ctx,ideal_prior";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub created_unix_ms: u64,
    pub backend_identity: String,
    pub top_k: u32,
    pub mode: PromptMode,
    pub sweep: Vec<f64>,
    pub unfiltered: bool,
    pub generation: GenerationPolicy,
    pub dataset_label: String,
    pub dataset_sha256: String,
    pub samples_in: usize,
    pub samples_evaluated: usize,
    pub samples_usable: usize,
    pub failures: usize,
    pub template_sha256: BTreeMap<String, String>,
    /// The applied recalibration map in its plain-text table form.
    pub recal_map: Option<String>,
    pub calls: Option<CallCounts>,
    /// No system prompt is sent in this version; recorded so runs stay
    /// comparable if that ever changes.
    pub system_prompt: Option<String>,
}

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: String,
    pub category: String,
    pub usable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_obey: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_answer: Option<String>,
    pub context_text: String,
    pub diagnostics: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn dataset_sha256(samples: &[Sample]) -> String {
    sha256_hex(obeval_core::dataset::serialize(samples).as_bytes())
}

pub fn template_hashes(templates: &TemplateSet) -> BTreeMap<String, String> {
    templates
        .entries()
        .into_iter()
        .map(|(name, text)| (name.to_string(), sha256_hex(text.as_bytes())))
        .collect()
}

pub fn now_unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Persist a run outcome under `dir`.
pub fn write_run(dir: &Path, outcome: &RunOutcome, manifest: &Manifest) -> Result<(), PipelineError> {
    let manifest_json =
        serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    write(&dir.join("manifest.json"), &manifest_json)?;

    let mut lines = String::new();
    for result in &outcome.results {
        let summary = SampleSummary {
            id: result.id.clone(),
            category: result.category.clone(),
            usable: result.is_usable(),
            epsilon_obey: result.record.as_ref().map(|r| r.epsilon_obey),
            self_confidence: result.self_confidence,
            prior_answer: result.prior_answer.clone(),
            context_text: result.context_text.clone(),
            diagnostics: result.diagnostics.clone(),
        };
        lines.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        lines.push('\n');
    }
    write(&dir.join("results.jsonl"), &lines)?;

    if let Some(filter) = &outcome.filter {
        let json = serde_json::to_string_pretty(filter).expect("filter serializes") + "\n";
        write(&dir.join("filter.json"), &json)?;
    }
    if !outcome.failures.is_empty() {
        let json =
            serde_json::to_string_pretty(&outcome.failures).expect("failures serialize") + "\n";
        write(&dir.join("failures.json"), &json)?;
    }

    for result in &outcome.results {
        let Some(record) = &result.record else { continue };
        let mut table = String::from(SAMPLE_CURVE_HEADER);
        table.push('\n');
        for (i, target) in result.sweep.points().iter().enumerate() {
            table.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                target.value(),
                result.expressed[i].value(),
                record.sim_to_context[i],
                record.sim_to_prior[i],
                record.deviation[i],
                result.ideal_sim_to_context[i],
                result.ideal_sim_to_prior[i],
            ));
        }
        write(&dir.join("curves").join(format!("{}.csv", result.id)), &table)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub summary: SampleSummary,
    /// Present for usable samples.
    pub curves: Option<LoadedCurves>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCurves {
    pub sweep: CertaintySweep,
    pub expressed: Vec<Certainty>,
    pub record: ObedienceRecord,
    pub ideal_sim_to_context: Vec<f64>,
    pub ideal_sim_to_prior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub manifest: Manifest,
    pub samples: Vec<LoadedSample>,
    pub failures: Vec<SampleFailure>,
}

impl LoadedRun {
    /// Report-module inputs plus the excluded-id list.
    pub fn sample_curves(&self) -> (Vec<SampleCurves>, Vec<String>) {
        let mut curves = Vec::new();
        let mut excluded: Vec<String> = self
            .failures
            .iter()
            .map(|f| f.id.clone())
            .collect();
        for sample in &self.samples {
            match &sample.curves {
                Some(loaded) => curves.push(SampleCurves {
                    id: sample.summary.id.clone(),
                    record: loaded.record.clone(),
                    ideal_sim_to_context: loaded.ideal_sim_to_context.clone(),
                    ideal_sim_to_prior: loaded.ideal_sim_to_prior.clone(),
                }),
                None => excluded.push(sample.summary.id.clone()),
            }
        }
        (curves, excluded)
    }

    /// One heatmap observation per usable sample and grid point. The
    /// backend either reports self-confidence for every sample or for none
    /// (no logprobs on generations); a mixture would bias the binning, so
    /// it is rejected, while the all-absent case yields no entries and the
    /// caller skips the heatmap.
    pub fn heatmap_entries(&self) -> Result<Vec<HeatmapEntry>, PipelineError> {
        let mut entries = Vec::new();
        let mut missing: Option<&str> = None;
        for sample in &self.samples {
            let Some(loaded) = &sample.curves else { continue };
            let Some(confidence) = sample.summary.self_confidence else {
                missing = Some(&sample.summary.id);
                continue;
            };
            for (i, target) in loaded.sweep.points().iter().enumerate() {
                entries.push(HeatmapEntry {
                    self_confidence: confidence,
                    certainty: target.value(),
                    deviation: loaded.record.deviation[i],
                });
            }
        }
        if let (Some(id), false) = (missing, entries.is_empty()) {
            return Err(PipelineError::Config(format!(
                "sample `{id}` has no self-confidence score while others do; the heatmap needs \
                 one on every result"
            )));
        }
        if missing.is_some() {
            entries.clear();
        }
        Ok(entries)
    }
}

fn read_to_string(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn parse_curves(path: &Path, text: &str) -> Result<LoadedCurves, PipelineError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != SAMPLE_CURVE_HEADER {
        return Err(io_err(path, format!("unexpected curve header `{header}`")));
    }
    let mut targets = Vec::new();
    let mut expressed = Vec::new();
    let mut sim_ctx = Vec::new();
    let mut sim_prior = Vec::new();
    let mut deviation = Vec::new();
    let mut ideal_ctx = Vec::new();
    let mut ideal_prior = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| io_err(path, format!("bad number in `{line}`: {e}")))?;
        if fields.len() != 7 {
            return Err(io_err(path, format!("expected 7 fields in `{line}`")));
        }
        targets.push(fields[0]);
        expressed.push(Certainty::new(fields[1]).map_err(|e| io_err(path, e))?);
        sim_ctx.push(fields[2]);
        sim_prior.push(fields[3]);
        deviation.push(fields[4]);
        ideal_ctx.push(fields[5]);
        ideal_prior.push(fields[6]);
    }
    let sweep = CertaintySweep::from_values(&targets).map_err(|e| io_err(path, e))?;
    let record = ObedienceRecord::new(sweep.clone(), sim_ctx, sim_prior, deviation)
        .map_err(|e| io_err(path, e))?;
    Ok(LoadedCurves {
        sweep,
        expressed,
        record,
        ideal_sim_to_context: ideal_ctx,
        ideal_sim_to_prior: ideal_prior,
    })
}

/// Load a persisted run back for reporting.
pub fn load_run(dir: &Path) -> Result<LoadedRun, PipelineError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&read_to_string(&manifest_path)?)
        .map_err(|e| io_err(&manifest_path, e))?;
    let results_path = dir.join("results.jsonl");
    let mut samples = Vec::new();
    for line in read_to_string(&results_path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let summary: SampleSummary =
            serde_json::from_str(line).map_err(|e| io_err(&results_path, e))?;
        let curves = if summary.usable {
            let path = dir.join("curves").join(format!("{}.csv", summary.id));
            Some(parse_curves(&path, &read_to_string(&path)?)?)
        } else {
            None
        };
        samples.push(LoadedSample { summary, curves });
    }
    let failures_path = dir.join("failures.json");
    let failures = if failures_path.exists() {
        serde_json::from_str(&read_to_string(&failures_path)?)
            .map_err(|e| io_err(&failures_path, e))?
    } else {
        Vec::new()
    };
    Ok(LoadedRun {
        manifest,
        samples,
        failures,
    })
}

/// Load just the filter report, when present.
pub fn load_filter(dir: &Path) -> Result<Option<FilterReport>, PipelineError> {
    let path = dir.join("filter.json");
    if !path.exists() {
        return Ok(None);
    }
    serde_json::from_str(&read_to_string(&path)?)
        .map(Some)
        .map_err(|e| io_err(&path, e))
}

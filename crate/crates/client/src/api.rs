//! Wire types of the evaluation service's JSON API.
//!
//! Heavy operations (filtering, sweeps, recalibration fitting) run as jobs:
//! submission returns a job id, and clients poll `/api/v1/jobs/{id}` until
//! the job settles. Quick operations (health, the synthetic check suite,
//! report emission) answer synchronously. Paths in requests are resolved on
//! the service host; the service is a local orchestrator, not a file
//! server.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use obeval_backend::BackendSelection;
use obeval_core::dataset::FilterReport;
use obeval_core::prompt::{ContextForm, PromptMode, ReminderSource, ReminderStyle};
use obeval_pipeline::cache::CallCounts;
use obeval_pipeline::synthcheck::CheckOutcome;

pub const API_BASE: &str = "/api/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCheckResponse {
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

/// The prompt-mode toggles as carried in requests. Whether recalibration is
/// active follows from the presence of a map, so it is not repeated here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub reminder: ReminderSource,
    pub reminder_style: ReminderStyle,
    pub context_form: ContextForm,
}

impl ModeSpec {
    pub fn baseline() -> Self {
        Self {
            reminder: ReminderSource::None,
            reminder_style: ReminderStyle::AnswerOnly,
            context_form: ContextForm::Original,
        }
    }

    pub fn full() -> Self {
        Self {
            reminder: ReminderSource::SelfPrior,
            reminder_style: ReminderStyle::AnswerOnly,
            context_form: ContextForm::Simplified,
        }
    }

    pub fn to_prompt_mode(self, recalibrated: bool) -> PromptMode {
        PromptMode {
            reminder: self.reminder,
            reminder_style: self.reminder_style,
            context_form: self.context_form,
            recalibrated,
        }
    }
}

fn default_synthetic_samples() -> usize {
    10
}

fn default_workers() -> usize {
    4
}

fn default_sweep() -> Vec<f64> {
    vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
}

/// Shared dataset/backend/runtime selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTarget {
    /// Dataset path on the service host; omitted for a generated synthetic
    /// dataset (synthetic backends only).
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default = "default_synthetic_samples")]
    pub synthetic_samples: usize,
    #[serde(default)]
    pub include_sports: bool,
    pub backend: BackendSelection,
    #[serde(default)]
    pub cache_dir: Option<String>,
    #[serde(default)]
    pub template_dir: Option<String>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRequest {
    #[serde(flatten)]
    pub target: EvalTarget,
    /// Additional per-backend extraction maps (label -> sample id -> text)
    /// combined with this backend's own extractions.
    #[serde(default)]
    pub extra_extractions: BTreeMap<String, BTreeMap<String, String>>,
    /// File to write the filter report to, if any.
    #[serde(default)]
    pub out: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    #[serde(flatten)]
    pub target: EvalTarget,
    pub mode: ModeSpec,
    /// Path to a recalibration map table; enables recalibration.
    #[serde(default)]
    pub recal_map: Option<String>,
    #[serde(default = "default_sweep")]
    pub sweep: Vec<f64>,
    #[serde(default)]
    pub unfiltered: bool,
    pub out_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecalRequest {
    #[serde(flatten)]
    pub target: EvalTarget,
    /// Mode of the fitting sweep (recalibration itself is always off while
    /// fitting).
    pub mode: ModeSpec,
    #[serde(default = "default_sweep")]
    pub sweep: Vec<f64>,
    #[serde(default)]
    pub unfiltered: bool,
    /// Fit one map per category from the other categories' samples,
    /// writing `<out>/<category>.map`; otherwise `out` is the single
    /// pooled-map file.
    #[serde(default)]
    pub held_out: bool,
    pub out: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRef {
    pub label: String,
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub runs: Vec<RunRef>,
    /// Recalibration-map table to render alongside the run figures.
    #[serde(default)]
    pub recal_map: Option<String>,
    pub out_dir: String,
}

// --------------------------------------------------------------------------
// Job lifecycle
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSubmitted {
    pub job_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

/// Why a job failed: configuration/usage problems map to exit code 2 on
/// the CLI, evaluation problems to exit code 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub kind: String,
    pub state: JobState,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub error_kind: Option<ErrorKind>,
    /// Kind-specific summary payload, present once the job is done.
    #[serde(default)]
    pub result: Option<serde_json::Value>,
}

// --------------------------------------------------------------------------
// Job result payloads
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub out_dir: String,
    pub backend_identity: String,
    pub samples_in: usize,
    pub samples_evaluated: usize,
    pub samples_usable: usize,
    pub failures: usize,
    /// Aggregate obedience error over the usable samples.
    #[serde(default)]
    pub epsilon_obey: Option<f64>,
    pub calls: CallCounts,
    #[serde(default)]
    pub filter_rates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    /// Map label ("pooled" or the category name) to the written file.
    pub maps: BTreeMap<String, String>,
    /// The same maps as plain-text tables.
    pub tables: BTreeMap<String, String>,
    pub samples_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub report: FilterReport,
    #[serde(default)]
    pub out: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub files: Vec<String>,
}

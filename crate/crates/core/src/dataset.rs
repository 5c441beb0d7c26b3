//! Loading, filtering, and splitting of retrieval-augmented QA samples.
//!
//! Datasets are stored line-delimited, one JSON record per line, with the
//! stable field names `id`, `question`, `context`, `context_answer`,
//! `gold_answer` (optional), and `category`. The context is assumed to have
//! been retrieved already; `context_answer` is the answer it conveys.
//!
//! Answer matching everywhere uses [`normalize_answer`]: case-fold, trim,
//! collapse internal whitespace, strip terminal punctuation. Exact match
//! after normalization keeps the filter deterministic.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Category excluded by default: its time-based answers have inconsistent
/// presentation formatting.
pub const SPORTS_CATEGORY: &str = "Sports Records";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("failed to read `{path}`: {reason}")]
    Io { path: String, reason: String },
    #[error("dataset contains malformed records:\n{}", format_line_errors(.0))]
    Malformed(Vec<LineError>),
    #[error("extraction map for backend `{backend}` is missing sample `{id}`")]
    MissingExtraction { backend: String, id: String },
    #[error("retrieval filter needs at least one backend's extractions")]
    NoExtractions,
    #[error("sample `{0}` has no gold answer; correctness split needs one on every sample")]
    MissingGold(String),
    #[error("dataset is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    pub line: usize,
    pub reason: String,
}

fn format_line_errors(errors: &[LineError]) -> String {
    errors
        .iter()
        .map(|e| format!("  line {}: {}", e.line, e.reason))
        .collect::<Vec<_>>()
        .join("\n")
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// One retrieval-augmented QA item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub context: String,
    /// The answer the context conveys.
    pub context_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    pub category: String,
}

impl Sample {
    /// Whether the context-conveyed answer matches the gold answer after
    /// normalization. `None` when no gold answer is present.
    pub fn context_is_correct(&self) -> Option<bool> {
        self.gold_answer
            .as_deref()
            .map(|gold| normalize_answer(gold) == normalize_answer(&self.context_answer))
    }

    fn validate(&self) -> Result<(), String> {
        for (name, value) in [
            ("id", &self.id),
            ("question", &self.question),
            ("context", &self.context),
            ("context_answer", &self.context_answer),
            ("category", &self.category),
        ] {
            if value.trim().is_empty() {
                return Err(format!("field `{name}` is empty"));
            }
        }
        Ok(())
    }
}

/// Options controlling [`load_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Keep the sports-records category instead of dropping it.
    pub include_sports: bool,
}

fn is_sports(category: &str) -> bool {
    category.trim().to_lowercase().replace(['_', '-'], " ") == SPORTS_CATEGORY.to_lowercase()
}

/// Load a line-delimited dataset with the default options.
pub fn load(path: &Path) -> Result<Vec<Sample>, DatasetError> {
    load_with(path, LoadOptions::default())
}

/// Load a line-delimited dataset. All malformed lines are collected and
/// reported together with their line numbers; any one of them fails the
/// load.
pub fn load_with(path: &Path, options: LoadOptions) -> Result<Vec<Sample>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let samples = parse(&text)?;
    Ok(if options.include_sports {
        samples
    } else {
        samples
            .into_iter()
            .filter(|s| !is_sports(&s.category))
            .collect()
    })
}

/// Parse dataset text (one JSON record per line; blank lines ignored).
pub fn parse(text: &str) -> Result<Vec<Sample>, DatasetError> {
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Sample>(line) {
            Ok(sample) => {
                if let Err(reason) = sample.validate() {
                    errors.push(LineError {
                        line: line_no,
                        reason,
                    });
                    continue;
                }
                if !seen_ids.insert(sample.id.clone()) {
                    errors.push(LineError {
                        line: line_no,
                        reason: format!("duplicate id `{}`", sample.id),
                    });
                    continue;
                }
                samples.push(sample);
            }
            Err(e) => errors.push(LineError {
                line: line_no,
                reason: e.to_string(),
            }),
        }
    }
    if !errors.is_empty() {
        return Err(DatasetError::Malformed(errors));
    }
    Ok(samples)
}

/// Serialize samples back to the line-delimited format.
pub fn serialize(samples: &[Sample]) -> String {
    let mut out = String::new();
    for sample in samples {
        out.push_str(&serde_json::to_string(sample).expect("samples serialize"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Canonicalize an answer string for matching: case-fold, trim, collapse
/// internal whitespace to single spaces, strip terminal punctuation.
pub fn normalize_answer(answer: &str) -> String {
    let lowered = answer.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(['.', ',', ';', ':', '!', '?'])
        .trim_end()
        .to_string()
}

// ---------------------------------------------------------------------------
// Retrieval filter
// ---------------------------------------------------------------------------

/// Per-backend retrieval success rates and the surviving sample ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Percent of samples (0–100) whose extracted answer matched the
    /// context answer, per backend label.
    pub rates: BTreeMap<String, f64>,
    /// Ids of samples every backend retrieved correctly, in dataset order.
    pub survivors: Vec<String>,
}

/// Apply the retrieval-success filter: a sample survives only if every
/// backend's extracted answer matches the context answer after
/// normalization. One failing backend excludes the sample for all.
pub fn retrieval_filter(
    samples: &[Sample],
    extractions: &BTreeMap<String, BTreeMap<String, String>>,
) -> Result<FilterReport, DatasetError> {
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    if extractions.is_empty() {
        return Err(DatasetError::NoExtractions);
    }
    for (backend, extracted) in extractions {
        for sample in samples {
            if !extracted.contains_key(&sample.id) {
                return Err(DatasetError::MissingExtraction {
                    backend: backend.clone(),
                    id: sample.id.clone(),
                });
            }
        }
    }
    let mut rates = BTreeMap::new();
    let mut survivors = Vec::new();
    let mut failed: HashSet<&str> = HashSet::new();
    for (backend, extracted) in extractions {
        let mut matches = 0usize;
        for sample in samples {
            let wanted = normalize_answer(&sample.context_answer);
            let got = normalize_answer(&extracted[&sample.id]);
            if wanted == got {
                matches += 1;
            } else {
                failed.insert(sample.id.as_str());
            }
        }
        rates.insert(
            backend.clone(),
            100.0 * matches as f64 / samples.len() as f64,
        );
    }
    for sample in samples {
        if !failed.contains(sample.id.as_str()) {
            survivors.push(sample.id.clone());
        }
    }
    Ok(FilterReport { rates, survivors })
}

// ---------------------------------------------------------------------------
// Correctness split
// ---------------------------------------------------------------------------

/// Partition samples by whether their context conveys the gold answer.
/// Every sample must carry a gold answer; both subsets preserve input order.
pub fn correctness_split(samples: &[Sample]) -> Result<(Vec<Sample>, Vec<Sample>), DatasetError> {
    let mut correct = Vec::new();
    let mut wrong = Vec::new();
    for sample in samples {
        match sample.context_is_correct() {
            Some(true) => correct.push(sample.clone()),
            Some(false) => wrong.push(sample.clone()),
            None => return Err(DatasetError::MissingGold(sample.id.clone())),
        }
    }
    Ok((correct, wrong))
}

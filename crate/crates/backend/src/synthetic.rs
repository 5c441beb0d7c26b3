//! A deterministic synthetic model used as a testing oracle.
//!
//! The model draws single-token answers from a small vocabulary. Its prior
//! is a fixed table. When a prompt expresses context certainty `c` for a
//! context conveying answer `a`, it responds with the mixture
//! `(1 - g(c)) * prior + g(c) * point(a)` where `g` is a configurable
//! distortion of the certainty axis. With `g` the identity the model is
//! perfectly obedient; with any other selector its obedience error and its
//! recalibration map have closed forms, which is what makes it an oracle.
//!
//! The backend understands the shipped prompt templates just enough to
//! recover the expressed certainty and the context answer: the certainty is
//! the integer percent on the certainty line, and the context answer is the
//! last in-vocabulary word of the context section.

use std::collections::BTreeMap;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use obeval_core::prob::Distribution;
use obeval_core::trace::{ScoredTrace, TokenStep};

use crate::{apply_stop, BackendError, GenerationOutput, GenerationParams, ModelBackend};

/// Closed-form distortion selectors for the certainty axis. All satisfy
/// `g(0) = 0` and `g(1) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distortion {
    Identity,
    Square,
    Sqrt,
    /// Piecewise-linear interpolation through `(c, g(c))` knots. Knots must
    /// be strictly increasing in `c` and include `(0, 0)` and `(1, 1)`.
    Piecewise { knots: Vec<(f64, f64)> },
}

impl Distortion {
    pub fn apply(&self, c: f64) -> f64 {
        match self {
            Distortion::Identity => c,
            Distortion::Square => c * c,
            Distortion::Sqrt => c.sqrt(),
            Distortion::Piecewise { knots } => {
                match knots.iter().position(|&(x, _)| x >= c) {
                    Some(0) => knots[0].1,
                    Some(i) => {
                        let (x0, y0) = knots[i - 1];
                        let (x1, y1) = knots[i];
                        y0 + (y1 - y0) * (c - x0) / (x1 - x0)
                    }
                    None => knots.last().map(|&(_, y)| y).unwrap_or(c),
                }
            }
        }
    }

    fn validate(&self) -> Result<(), BackendError> {
        if let Distortion::Piecewise { knots } = self {
            if knots.len() < 2 {
                return Err(BackendError::InvalidConfig(
                    "piecewise distortion needs at least 2 knots".into(),
                ));
            }
            for pair in knots.windows(2) {
                if pair[1].0 <= pair[0].0 {
                    return Err(BackendError::InvalidConfig(
                        "piecewise knots must be strictly increasing in c".into(),
                    ));
                }
            }
            for &(x, y) in knots {
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    return Err(BackendError::InvalidConfig(
                        "piecewise knots must lie in the unit square".into(),
                    ));
                }
            }
            if knots[0] != (0.0, 0.0) || *knots.last().unwrap() != (1.0, 1.0) {
                return Err(BackendError::InvalidConfig(
                    "piecewise distortion must fix g(0) = 0 and g(1) = 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// The synthetic model's full description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelSpec {
    /// Single-token answer alphabet.
    pub vocabulary: Vec<String>,
    /// Prior probability per vocabulary entry; renormalized on validation.
    pub prior: Vec<f64>,
    pub distortion: Distortion,
}

impl SyntheticModelSpec {
    /// The canonical oracle: two-token vocabulary with prior (0.8, 0.2) and
    /// a square distortion. With the context answer on the 0.2-mass token
    /// its baseline deviation curve is 0.8 * c * (1 - c) with obedience
    /// error 0.128 on the default sweep.
    pub fn canonical_square() -> Self {
        Self {
            vocabulary: vec!["alpha".to_string(), "bravo".to_string()],
            prior: vec![0.8, 0.2],
            distortion: Distortion::Square,
        }
    }

    /// Same vocabulary and prior as the canonical oracle, no distortion: a
    /// perfectly obedient model.
    pub fn canonical_identity() -> Self {
        Self {
            distortion: Distortion::Identity,
            ..Self::canonical_square()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.vocabulary.is_empty() {
            return Err(BackendError::InvalidConfig("vocabulary is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for token in &self.vocabulary {
            if token.trim().is_empty() || token.split_whitespace().count() != 1 {
                return Err(BackendError::InvalidConfig(format!(
                    "vocabulary entry `{token}` is not a single token"
                )));
            }
            if !seen.insert(token.as_str()) {
                return Err(BackendError::InvalidConfig(format!(
                    "duplicate vocabulary entry `{token}`"
                )));
            }
        }
        if self.prior.len() != self.vocabulary.len() {
            return Err(BackendError::InvalidConfig(format!(
                "prior has {} entries for {} vocabulary tokens",
                self.prior.len(),
                self.vocabulary.len()
            )));
        }
        if self.prior.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(BackendError::InvalidConfig(
                "prior entries must be non-negative".into(),
            ));
        }
        let sum: f64 = self.prior.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(BackendError::InvalidConfig(format!(
                "prior sums to {sum}"
            )));
        }
        self.distortion.validate()
    }

    fn normalized_prior(&self) -> Vec<f64> {
        let sum: f64 = self.prior.iter().sum();
        self.prior.iter().map(|p| p / sum).collect()
    }

    fn index_of(&self, token: &str) -> Option<usize> {
        self.vocabulary.iter().position(|t| t == token)
    }

    /// The mixture the model responds with for context answer `a` at
    /// distorted certainty weight `g`.
    fn mixture(&self, answer_index: usize, g: f64) -> Vec<f64> {
        self.normalized_prior()
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let point = if i == answer_index { 1.0 } else { 0.0 };
                (1.0 - g) * p + g * point
            })
            .collect()
    }
}

/// The exact response distribution of the synthetic model for answer `a`
/// at certainty `c`, over the vocabulary outcome space.
pub fn synthetic_observed(
    spec: &SyntheticModelSpec,
    answer: &str,
    c: f64,
) -> Result<Distribution, BackendError> {
    let index = spec
        .index_of(answer)
        .ok_or_else(|| BackendError::Domain(format!("answer `{answer}` not in vocabulary")))?;
    let g = spec.distortion.apply(c);
    let mass = spec.mixture(index, g);
    Distribution::new(spec.vocabulary.clone(), mass)
        .map_err(|e| BackendError::Domain(e.to_string()))
}

// ---------------------------------------------------------------------------
// Prompt interpretation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum PromptKind {
    Prior,
    Extract { context: String },
    Summarize { context: String },
    Main { context: String, certainty: f64 },
}

const CERTAINTY_MARKER: &str = "\nCertainty of the context: ";
const CONTEXT_MARKER: &str = "\nContext: ";
const EXTRACT_MARKER: &str = "\nAnswer retrieved from the context:";
const SUMMARIZE_MARKER: &str = "\nThe summarized context:";
const PRIOR_MARKER: &str = "\nAnswer:";

fn context_section(prompt: &str, end_marker: &str) -> Result<String, BackendError> {
    let start = prompt
        .find(CONTEXT_MARKER)
        .ok_or_else(|| BackendError::Protocol("prompt has no context line".into()))?
        + CONTEXT_MARKER.len();
    let end = prompt[start..]
        .find(end_marker)
        .map(|offset| start + offset)
        .unwrap_or(prompt.len());
    Ok(prompt[start..end].trim().to_string())
}

fn classify(prompt: &str) -> Result<PromptKind, BackendError> {
    if let Some(position) = prompt.find(CERTAINTY_MARKER) {
        let after = &prompt[position + CERTAINTY_MARKER.len()..];
        let digits: String = after.chars().take_while(char::is_ascii_digit).collect();
        if digits.is_empty() || !after[digits.len()..].starts_with('%') {
            return Err(BackendError::Protocol(
                "certainty line does not read as an integer percent".into(),
            ));
        }
        let percent: u32 = digits
            .parse()
            .map_err(|_| BackendError::Protocol(format!("bad certainty percent `{digits}`")))?;
        if percent > 100 {
            return Err(BackendError::Protocol(format!(
                "certainty percent {percent} above 100"
            )));
        }
        let context = context_section(prompt, CERTAINTY_MARKER)?;
        return Ok(PromptKind::Main {
            context,
            certainty: f64::from(percent) / 100.0,
        });
    }
    if prompt.contains(EXTRACT_MARKER) {
        return Ok(PromptKind::Extract {
            context: context_section(prompt, EXTRACT_MARKER)?,
        });
    }
    if prompt.contains(SUMMARIZE_MARKER) {
        return Ok(PromptKind::Summarize {
            context: context_section(prompt, SUMMARIZE_MARKER)?,
        });
    }
    if prompt.contains(PRIOR_MARKER) {
        return Ok(PromptKind::Prior);
    }
    Err(BackendError::Protocol(
        "prompt does not match any known template shape".into(),
    ))
}

/// The context answer is the last word of the context section that, with
/// surrounding punctuation stripped, is in the vocabulary.
fn context_answer(spec: &SyntheticModelSpec, context: &str) -> Result<usize, BackendError> {
    for word in context.split_whitespace().rev() {
        let stripped = word.trim_matches(|c: char| !c.is_alphanumeric());
        if let Some(index) = spec.index_of(stripped) {
            return Ok(index);
        }
    }
    Err(BackendError::Domain(format!(
        "context conveys no in-vocabulary answer: `{context}`"
    )))
}

// ---------------------------------------------------------------------------
// Backend implementation
// ---------------------------------------------------------------------------

/// In-process oracle backend over a [`SyntheticModelSpec`].
pub struct SyntheticBackend {
    spec: SyntheticModelSpec,
    top_k: u32,
    identity: String,
}

impl SyntheticBackend {
    pub fn new(spec: SyntheticModelSpec, top_k: u32) -> Result<Self, BackendError> {
        spec.validate()?;
        let digest = Sha256::digest(serde_json::to_vec(&spec).expect("spec serializes"));
        let identity = format!("synthetic:{:.12}", hex(&digest));
        Ok(Self {
            spec,
            top_k,
            identity,
        })
    }

    pub fn spec(&self) -> &SyntheticModelSpec {
        &self.spec
    }

    /// The response distribution the model would use for `prompt`.
    fn response_distribution(&self, prompt: &str) -> Result<(Vec<f64>, String), BackendError> {
        match classify(prompt)? {
            PromptKind::Prior => Ok((self.spec.normalized_prior(), "prior".to_string())),
            PromptKind::Main { context, certainty } => {
                let answer = context_answer(&self.spec, &context)?;
                let g = self.spec.distortion.apply(certainty);
                let label = format!("c={}%", (certainty * 100.0).round() as u32);
                Ok((self.spec.mixture(answer, g), label))
            }
            PromptKind::Extract { .. } | PromptKind::Summarize { .. } => Err(
                BackendError::Domain("scoring is defined for prior and main prompts only".into()),
            ),
        }
    }

    /// Greedy pick: highest probability, ties to the lexicographically
    /// smallest token.
    fn argmax(&self, mass: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..mass.len() {
            let better = mass[i] > mass[best]
                || (mass[i] == mass[best] && self.spec.vocabulary[i] < self.spec.vocabulary[best]);
            if better {
                best = i;
            }
        }
        best
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[async_trait]
impl ModelBackend for SyntheticBackend {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn top_k(&self) -> u32 {
        self.top_k
    }

    async fn score_answer(
        &self,
        prompt: &str,
        answer: &str,
    ) -> Result<ScoredTrace, BackendError> {
        let token = answer.trim();
        if token.is_empty() || token.split_whitespace().count() != 1 {
            return Err(BackendError::Domain(format!(
                "the synthetic model scores single-token answers, got `{answer}`"
            )));
        }
        let forced_index = self.spec.index_of(token).ok_or_else(|| {
            BackendError::Domain(format!("answer `{token}` not in vocabulary"))
        })?;
        let (mass, label) = self.response_distribution(prompt)?;
        let forced_prob = mass[forced_index];

        // Named alternatives: the top-k other tokens by probability, ties
        // resolved lexicographically for determinism.
        let mut others: Vec<usize> = (0..mass.len()).filter(|&i| i != forced_index).collect();
        others.sort_by(|&a, &b| {
            mass[b]
                .total_cmp(&mass[a])
                .then_with(|| self.spec.vocabulary[a].cmp(&self.spec.vocabulary[b]))
        });
        others.truncate(self.top_k as usize);
        let alternatives: BTreeMap<String, f64> = others
            .iter()
            .map(|&i| (self.spec.vocabulary[i].clone(), mass[i]))
            .collect();
        let named: f64 = alternatives.values().sum();
        let residual = (1.0 - forced_prob - named).max(0.0);
        let step = TokenStep::new(token, forced_prob, alternatives, residual)?;
        Ok(ScoredTrace::new(vec![token.to_string()], vec![step], label)?)
    }

    async fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<GenerationOutput, BackendError> {
        let (words, probs): (Vec<String>, Vec<f64>) = match classify(prompt)? {
            PromptKind::Prior => {
                let prior = self.spec.normalized_prior();
                let pick = self.argmax(&prior);
                (vec![self.spec.vocabulary[pick].clone()], vec![prior[pick]])
            }
            PromptKind::Main { context, certainty } => {
                let answer = context_answer(&self.spec, &context)?;
                let g = self.spec.distortion.apply(certainty);
                let mass = self.spec.mixture(answer, g);
                let pick = self.argmax(&mass);
                (vec![self.spec.vocabulary[pick].clone()], vec![mass[pick]])
            }
            PromptKind::Extract { context } => {
                let answer = context_answer(&self.spec, &context)?;
                (vec![self.spec.vocabulary[answer].clone()], vec![1.0])
            }
            PromptKind::Summarize { context } => {
                let answer = context_answer(&self.spec, &context)?;
                let text = format!(
                    "The passage states that the answer is {}.",
                    self.spec.vocabulary[answer]
                );
                let words: Vec<String> = text.split(' ').map(str::to_string).collect();
                let n = words.len();
                (words, vec![1.0; n])
            }
        };
        let cap = params.max_new_tokens as usize;
        let kept = words.len().min(cap);
        let text = words[..kept].join(" ");
        let text = apply_stop(&text, &params.stop);
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(BackendError::EmptyGeneration);
        }
        let kept_words = trimmed.split_whitespace().count();
        Ok(GenerationOutput {
            text: trimmed.to_string(),
            token_probs: probs[..kept_words.min(probs.len())].to_vec(),
        })
    }
}

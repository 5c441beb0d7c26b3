//! Per-sample evaluation: prior elicitation, context transformation, the
//! certainty sweep, and metric assembly.
//!
//! For each sample the pipeline performs exactly `|grid| + 1` scoring calls
//! (the prior trace plus one per grid point) and at most two generations
//! (the prior answer, and the extraction or summary when the mode needs
//! one). The prior distribution is obtained by teacher-forcing the context
//! answer under the context-free prompt, never by regenerating it: the
//! metric needs the prior and every observed distribution anchored on the
//! same answer. The model's own generated prior answer serves only as
//! reminder text and as the self-confidence proxy (the chain-rule
//! probability of its own greedy context-free answer, read off the
//! generation's token probabilities -- identical to teacher-forcing it back
//! under greedy decoding, without a further call).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use obeval_backend::{BackendError, GenerationParams, ModelBackend};
use obeval_core::dataset::{retrieval_filter, DatasetError, FilterReport, Sample};
use obeval_core::prob::{
    diagnostic_point, ideal_mixture, tvd, Certainty, CertaintySweep, DiagnosticPoint,
    ObedienceRecord, ProbError,
};
use obeval_core::prompt::{
    render_extract, render_main, render_prior, render_summarize, ContextForm, PromptError,
    PromptMode, ReminderSource, ReminderStyle, TemplateSet,
};
use obeval_core::recal::{RecalError, RecalibrationMap};
use obeval_core::report::{ReportError, SampleCurves};
use obeval_core::trace::{
    align_steps, build_prefix_distribution, PrefixDistribution, TraceError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error(transparent)]
    Recal(#[from] RecalError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

impl PipelineError {
    /// True for errors callers should report as usage/configuration
    /// problems rather than evaluation failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_)
                | PipelineError::Dataset(_)
                | PipelineError::Backend(BackendError::InvalidConfig(_))
                | PipelineError::Prompt(PromptError::TemplateRead { .. })
                | PipelineError::Recal(RecalError::TooFewCategories(_))
                | PipelineError::Recal(RecalError::EmptyComplement(_))
                | PipelineError::Recal(RecalError::Parse(_))
        )
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Token budgets and stop sequences for the generation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPolicy {
    pub prior_max_tokens: u32,
    /// Cap for the explained prior (the long-form reminder style).
    pub explained_max_tokens: u32,
    pub extract_max_tokens: u32,
    pub summary_max_tokens: u32,
    pub stop: Vec<String>,
}

impl Default for GenerationPolicy {
    fn default() -> Self {
        Self {
            prior_max_tokens: 16,
            explained_max_tokens: 100,
            extract_max_tokens: 16,
            summary_max_tokens: 120,
            stop: vec!["\n".to_string()],
        }
    }
}

/// Everything one evaluation run is parameterized by, apart from the
/// backend itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: PromptMode,
    pub sweep: CertaintySweep,
    /// Present exactly when `mode.recalibrated` is set.
    pub recal_map: Option<RecalibrationMap>,
    /// Skip the retrieval-success filter and evaluate every sample.
    pub unfiltered: bool,
    pub generation: GenerationPolicy,
    /// Concurrent samples in flight; align with the backend's request cap.
    pub workers: usize,
}

impl RunConfig {
    pub fn new(mode: PromptMode) -> Self {
        Self {
            mode,
            sweep: CertaintySweep::default(),
            recal_map: None,
            unfiltered: false,
            generation: GenerationPolicy::default(),
            workers: 4,
        }
    }

    pub fn with_recalibration(mut self, map: RecalibrationMap) -> Self {
        self.mode.recalibrated = true;
        self.recal_map = Some(map);
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        match (&self.recal_map, self.mode.recalibrated) {
            (Some(_), true) | (None, false) => {}
            (Some(_), false) => {
                return Err(PipelineError::Config(
                    "a recalibration map is set but the mode does not enable recalibration".into(),
                ))
            }
            (None, true) => {
                return Err(PipelineError::Config(
                    "the mode enables recalibration but no map is set".into(),
                ))
            }
        }
        if let Some(map) = &self.recal_map {
            if map.sweep() != &self.sweep {
                return Err(PipelineError::Config(
                    "the recalibration map's grid differs from the run sweep".into(),
                ));
            }
        }
        // Prompts render certainties as integer percents; catch a grid that
        // cannot render before any backend traffic happens.
        for point in self.sweep.points() {
            if point.percent().is_none() {
                return Err(PipelineError::Config(format!(
                    "sweep point {} does not render as an integer percent",
                    point.value()
                )));
            }
        }
        if self.workers < 1 {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Context transformation
// ---------------------------------------------------------------------------

/// The context as it will be presented to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ContextPayload {
    Original(String),
    /// Model-extracted answer rendered through "The answer is {}".
    Simplified { answer: String },
    Summarized(String),
    /// Dataset-provided answer rendered through "The answer is {}".
    ProvidedSimple { answer: String },
}

impl ContextPayload {
    /// The value that fills the main template's context slot.
    pub fn prompt_value(&self) -> &str {
        match self {
            ContextPayload::Original(text) | ContextPayload::Summarized(text) => text,
            ContextPayload::Simplified { answer } | ContextPayload::ProvidedSimple { answer } => {
                answer
            }
        }
    }

    /// The context text exactly as it reads in the prompt.
    pub fn display_text(&self) -> String {
        match self {
            ContextPayload::Original(text) | ContextPayload::Summarized(text) => text.clone(),
            ContextPayload::Simplified { answer } | ContextPayload::ProvidedSimple { answer } => {
                format!("The answer is {answer}")
            }
        }
    }
}

/// The extraction request shared by the retrieval filter and the simplified
/// context form; sharing the exact prompt and parameters is what lets the
/// cache serve the second use for free.
pub async fn extract_answer(
    backend: &dyn ModelBackend,
    templates: &TemplateSet,
    sample: &Sample,
    policy: &GenerationPolicy,
) -> Result<Option<String>, PipelineError> {
    let prompt = render_extract(templates, &sample.question, &sample.context)?;
    let params = GenerationParams {
        max_new_tokens: policy.extract_max_tokens,
        stop: policy.stop.clone(),
    };
    match backend.generate(&prompt.text, &params).await {
        Ok(output) => Ok(Some(output.text)),
        Err(BackendError::EmptyGeneration) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Produce the context payload for a mode. `None` means a generation step
/// came back empty; the sample is flagged rather than failed.
pub async fn transform_context(
    backend: &dyn ModelBackend,
    templates: &TemplateSet,
    sample: &Sample,
    form: ContextForm,
    policy: &GenerationPolicy,
) -> Result<Option<ContextPayload>, PipelineError> {
    match form {
        ContextForm::Original => Ok(Some(ContextPayload::Original(sample.context.clone()))),
        ContextForm::ProvidedSimple => {
            if sample.context_answer.trim().is_empty() {
                return Err(PipelineError::Config(format!(
                    "sample `{}` has no context answer for the provided-simple form",
                    sample.id
                )));
            }
            Ok(Some(ContextPayload::ProvidedSimple {
                answer: sample.context_answer.clone(),
            }))
        }
        ContextForm::Simplified => Ok(extract_answer(backend, templates, sample, policy)
            .await?
            .map(|answer| ContextPayload::Simplified { answer })),
        ContextForm::Summarized => {
            let prompt = render_summarize(templates, &sample.question, &sample.context)?;
            let params = GenerationParams {
                max_new_tokens: policy.summary_max_tokens,
                stop: policy.stop.clone(),
            };
            match backend.generate(&prompt.text, &params).await {
                Ok(output) => Ok(Some(ContextPayload::Summarized(output.text))),
                Err(BackendError::EmptyGeneration) => Ok(None),
                Err(e) => Err(e.into()),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Prior elicitation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PriorElicitation {
    pub answer: String,
    /// Chain-rule probability of the greedy answer, when the backend
    /// reports token probabilities.
    pub self_confidence: Option<f64>,
}

/// Elicit the model's context-free answer; cached like every request.
/// `None` means the model generated nothing.
pub async fn elicit_prior(
    backend: &dyn ModelBackend,
    templates: &TemplateSet,
    sample: &Sample,
    style: ReminderStyle,
    policy: &GenerationPolicy,
) -> Result<Option<PriorElicitation>, PipelineError> {
    let prompt = render_prior(templates, &sample.question)?;
    let max_new_tokens = match style {
        ReminderStyle::AnswerOnly => policy.prior_max_tokens,
        ReminderStyle::Explained => policy.explained_max_tokens,
    };
    let params = GenerationParams {
        max_new_tokens,
        stop: policy.stop.clone(),
    };
    match backend.generate(&prompt.text, &params).await {
        Ok(output) => {
            let self_confidence = output.chain_probability();
            Ok(Some(PriorElicitation {
                answer: output.text,
                self_confidence,
            }))
        }
        Err(BackendError::EmptyGeneration) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------
// Per-sample run
// ---------------------------------------------------------------------------

/// The aligned distributions a sample's metrics were computed from, kept
/// for downstream recalibration fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDistributions {
    pub prior: PrefixDistribution,
    /// One observed distribution per grid point, in sweep order.
    pub observed: Vec<PrefixDistribution>,
    pub context_point: PrefixDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub id: String,
    pub category: String,
    pub sweep: CertaintySweep,
    pub prior_answer: Option<String>,
    /// The context as presented in the prompt.
    pub context_text: String,
    /// The certainty actually rendered at each grid point (differs from the
    /// target only under recalibration).
    pub expressed: Vec<Certainty>,
    pub self_confidence: Option<f64>,
    pub distributions: Option<SampleDistributions>,
    pub record: Option<ObedienceRecord>,
    pub ideal_sim_to_context: Vec<f64>,
    pub ideal_sim_to_prior: Vec<f64>,
    pub diagnostics: Vec<String>,
}

impl SampleResult {
    pub fn is_usable(&self) -> bool {
        self.record.is_some()
    }

    /// Project into the report module's input shape.
    pub fn curves(&self) -> Option<SampleCurves> {
        self.record.as_ref().map(|record| SampleCurves {
            id: self.id.clone(),
            record: record.clone(),
            ideal_sim_to_context: self.ideal_sim_to_context.clone(),
            ideal_sim_to_prior: self.ideal_sim_to_prior.clone(),
        })
    }
}

fn flagged(sample: &Sample, sweep: &CertaintySweep, diagnostics: Vec<String>) -> SampleResult {
    SampleResult {
        id: sample.id.clone(),
        category: sample.category.clone(),
        sweep: sweep.clone(),
        prior_answer: None,
        context_text: String::new(),
        expressed: Vec::new(),
        self_confidence: None,
        distributions: None,
        record: None,
        ideal_sim_to_context: Vec::new(),
        ideal_sim_to_prior: Vec::new(),
        diagnostics,
    }
}

/// Evaluate one sample under the configured mode.
pub async fn run_sample(
    backend: &dyn ModelBackend,
    templates: &TemplateSet,
    sample: &Sample,
    config: &RunConfig,
) -> Result<SampleResult, PipelineError> {
    config.validate()?;
    let mut diagnostics = Vec::new();

    // Prior answer: reminder text and self-confidence.
    let prior = elicit_prior(backend, templates, sample, config.mode.reminder_style, &config.generation).await?;
    if prior.is_none() {
        diagnostics.push("prior elicitation produced an empty answer".to_string());
    }

    // Context payload for the configured form.
    let payload = transform_context(
        backend,
        templates,
        sample,
        config.mode.context_form,
        &config.generation,
    )
    .await?;
    let Some(payload) = payload else {
        diagnostics.push("context transformation produced an empty text".to_string());
        return Ok(flagged(sample, &config.sweep, diagnostics));
    };

    // Reminder text per mode.
    let reminder: Option<String> = match config.mode.reminder {
        ReminderSource::None => None,
        ReminderSource::SelfPrior => match &prior {
            Some(elicited) => Some(elicited.answer.clone()),
            None => {
                diagnostics
                    .push("self-prior reminder unavailable without a prior answer".to_string());
                return Ok(flagged(sample, &config.sweep, diagnostics));
            }
        },
        ReminderSource::ProvidedAlternative => match &sample.gold_answer {
            Some(alternative) => Some(alternative.clone()),
            None => {
                return Err(PipelineError::Config(format!(
                    "sample `{}` has no gold answer to use as the provided alternative",
                    sample.id
                )))
            }
        },
    };

    // Prior trace: teacher-force the context answer with no context.
    let prior_prompt = render_prior(templates, &sample.question)?;
    let prior_trace = backend
        .score_answer(&prior_prompt.text, &sample.context_answer)
        .await?
        .with_condition_label("prior");

    // Sweep traces at the (possibly recalibrated) expressed certainty.
    let mut expressed_points = Vec::with_capacity(config.sweep.len());
    let mut traces = vec![prior_trace];
    for &target in config.sweep.points() {
        let expressed = match &config.recal_map {
            Some(map) => map.apply(target)?,
            None => target,
        };
        expressed_points.push(expressed);
        let prompt = render_main(
            templates,
            &sample.question,
            payload.prompt_value(),
            expressed,
            config.mode,
            reminder.as_deref(),
        )?;
        let trace = backend
            .score_answer(&prompt.text, &sample.context_answer)
            .await?
            .with_condition_label(format!("c={target}"));
        traces.push(trace);
    }

    // Align onto the shared partition and build the distributions.
    let aligned = match align_steps(&traces) {
        Ok(aligned) => aligned,
        Err(TraceError::AnswerMismatch) => {
            diagnostics.push(
                "the backend tokenized the answer differently across conditions".to_string(),
            );
            return Ok(flagged(sample, &config.sweep, diagnostics));
        }
        Err(e) => return Err(e.into()),
    };
    let mut prefix_dists = Vec::with_capacity(aligned.len());
    for trace in &aligned {
        match build_prefix_distribution(trace) {
            Ok(dist) => prefix_dists.push(dist),
            Err(TraceError::DegenerateTrace { step, condition }) => {
                diagnostics.push(format!(
                    "degenerate trace under `{condition}`: forced probability 0 at step {step}"
                ));
                return Ok(flagged(sample, &config.sweep, diagnostics));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let prior_dist = prefix_dists.remove(0);
    let observed = prefix_dists;
    let context_point = prior_dist.point_mass_like()?;

    // Diagnostics are indexed by the target certainty: recalibration only
    // changes what the prompt says, never what ideal behavior means.
    let mut points: Vec<DiagnosticPoint> = Vec::with_capacity(config.sweep.len());
    let mut ideal_sim_to_context = Vec::with_capacity(config.sweep.len());
    let mut ideal_sim_to_prior = Vec::with_capacity(config.sweep.len());
    for (index, &target) in config.sweep.points().iter().enumerate() {
        points.push(diagnostic_point(
            observed[index].distribution(),
            prior_dist.distribution(),
            context_point.distribution(),
            target,
        )?);
        let ideal = ideal_mixture(
            prior_dist.distribution(),
            context_point.distribution(),
            target,
        )?;
        ideal_sim_to_context.push(1.0 - tvd(&ideal, context_point.distribution())?);
        ideal_sim_to_prior.push(1.0 - tvd(&ideal, prior_dist.distribution())?);
    }
    let record = ObedienceRecord::from_points(config.sweep.clone(), &points)?;

    let (prior_answer, self_confidence) = match prior {
        Some(elicited) => (Some(elicited.answer), elicited.self_confidence),
        None => (None, None),
    };
    Ok(SampleResult {
        id: sample.id.clone(),
        category: sample.category.clone(),
        sweep: config.sweep.clone(),
        prior_answer,
        context_text: payload.display_text(),
        expressed: expressed_points,
        self_confidence,
        distributions: Some(SampleDistributions {
            prior: prior_dist,
            observed,
            context_point,
        }),
        record: Some(record),
        ideal_sim_to_context,
        ideal_sim_to_prior,
        diagnostics,
    })
}

// ---------------------------------------------------------------------------
// Dataset run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    /// Per-sample results in id order (usable and flagged alike).
    pub results: Vec<SampleResult>,
    /// Samples whose evaluation failed outright.
    pub failures: Vec<SampleFailure>,
    /// The retrieval filter report, when filtering ran.
    pub filter: Option<FilterReport>,
}

impl RunOutcome {
    pub fn usable(&self) -> impl Iterator<Item = &SampleResult> {
        self.results.iter().filter(|r| r.is_usable())
    }

    pub fn excluded_ids(&self) -> Vec<String> {
        self.results
            .iter()
            .filter(|r| !r.is_usable())
            .map(|r| r.id.clone())
            .chain(self.failures.iter().map(|f| f.id.clone()))
            .collect()
    }
}

/// Evaluate a dataset: optional retrieval filtering, then independent
/// per-sample evaluation under a bounded worker pool, merged in id order.
pub async fn run_dataset(
    backend: Arc<dyn ModelBackend>,
    templates: Arc<TemplateSet>,
    samples: &[Sample],
    config: Arc<RunConfig>,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(PipelineError::Dataset(DatasetError::Empty));
    }

    let mut failures: Vec<SampleFailure> = Vec::new();
    let (to_run, filter) = if config.unfiltered {
        (samples.to_vec(), None)
    } else {
        let mut extracted = BTreeMap::new();
        for sample in samples {
            let text = match extract_answer(backend.as_ref(), &templates, sample, &config.generation)
                .await
            {
                Ok(Some(text)) => text,
                Ok(None) => String::new(),
                Err(e) => {
                    failures.push(SampleFailure {
                        id: sample.id.clone(),
                        error: format!("extraction failed: {e}"),
                    });
                    String::new()
                }
            };
            extracted.insert(sample.id.clone(), text);
        }
        let report = retrieval_filter(
            samples,
            &BTreeMap::from([(backend.identity(), extracted)]),
        )?;
        let survivors: Vec<Sample> = samples
            .iter()
            .filter(|s| report.survivors.contains(&s.id))
            .cloned()
            .collect();
        (survivors, Some(report))
    };

    let semaphore = Arc::new(tokio::sync::Semaphore::new(config.workers));
    let mut handles = Vec::with_capacity(to_run.len());
    for sample in to_run {
        let backend = Arc::clone(&backend);
        let templates = Arc::clone(&templates);
        let config = Arc::clone(&config);
        let semaphore = Arc::clone(&semaphore);
        handles.push(tokio::spawn(async move {
            let _permit = semaphore.acquire().await.expect("semaphore never closes");
            let outcome = run_sample(backend.as_ref(), &templates, &sample, &config).await;
            (sample.id.clone(), outcome)
        }));
    }

    let mut results = Vec::new();
    for handle in handles {
        let (id, outcome) = handle.await.expect("sample task panicked");
        match outcome {
            Ok(result) => results.push(result),
            Err(e) => failures.push(SampleFailure {
                id,
                error: e.to_string(),
            }),
        }
    }
    results.sort_by(|a, b| a.id.cmp(&b.id));
    failures.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(RunOutcome {
        results,
        failures,
        filter,
    })
}

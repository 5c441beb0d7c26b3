//! Pipeline-level behavior: determinism, filtering, diagnostics, and the
//! separation between prompt construction and the metric path.

use std::sync::Arc;
use std::sync::Mutex;

use async_trait::async_trait;

use obeval_backend::{
    BackendError, Distortion, GenerationOutput, GenerationParams, ModelBackend, SyntheticBackend,
    SyntheticModelSpec,
};
use obeval_core::dataset::Sample;
use obeval_core::prompt::{
    ContextForm, PromptMode, ReminderSource, ReminderStyle, TemplateSet,
};
use obeval_pipeline::cache::CachedBackend;
use obeval_pipeline::results::{
    dataset_sha256, load_run, template_hashes, write_run, Manifest, MANIFEST_VERSION,
};
use obeval_pipeline::runner::{elicit_prior, run_dataset, run_sample, RunConfig};
use obeval_pipeline::synthdata::synthetic_dataset;
use obeval_pipeline::{GenerationPolicy, PipelineError};

fn canonical_backend() -> Arc<dyn ModelBackend> {
    Arc::new(SyntheticBackend::new(SyntheticModelSpec::canonical_square(), 5).unwrap())
}

fn templates() -> Arc<TemplateSet> {
    Arc::new(TemplateSet::default())
}

async fn run(
    samples: &[Sample],
    config: RunConfig,
) -> obeval_pipeline::RunOutcome {
    run_dataset(canonical_backend(), templates(), samples, Arc::new(config))
        .await
        .unwrap()
}

#[tokio::test]
async fn reruns_are_deterministic_down_to_the_bytes() {
    let samples = synthetic_dataset(&SyntheticModelSpec::canonical_square(), 4);
    let first = run(&samples, RunConfig::new(PromptMode::baseline())).await;
    let second = run(&samples, RunConfig::new(PromptMode::baseline())).await;
    assert_eq!(first.results, second.results);

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        created_unix_ms: 0,
        backend_identity: canonical_backend().identity(),
        top_k: 5,
        mode: PromptMode::baseline(),
        sweep: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        unfiltered: false,
        generation: GenerationPolicy::default(),
        dataset_label: "synthetic".into(),
        dataset_sha256: dataset_sha256(&samples),
        samples_in: samples.len(),
        samples_evaluated: first.results.len(),
        samples_usable: first.usable().count(),
        failures: 0,
        template_sha256: template_hashes(&TemplateSet::default()),
        recal_map: None,
        calls: None,
        system_prompt: None,
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    write_run(dir_a.path(), &first, &manifest).unwrap();
    write_run(dir_b.path(), &second, &manifest).unwrap();
    for file in ["results.jsonl", "filter.json", "curves/synth-0000.csv"] {
        let a = std::fs::read(dir_a.path().join(file)).unwrap();
        let b = std::fs::read(dir_b.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical reruns");
    }
}

#[tokio::test]
async fn persisted_runs_load_back_exactly() {
    let samples = synthetic_dataset(&SyntheticModelSpec::canonical_square(), 3);
    let outcome = run(&samples, RunConfig::new(PromptMode::baseline())).await;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        created_unix_ms: 7,
        backend_identity: "synthetic:test".into(),
        top_k: 5,
        mode: PromptMode::baseline(),
        sweep: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        unfiltered: false,
        generation: GenerationPolicy::default(),
        dataset_label: "synthetic".into(),
        dataset_sha256: dataset_sha256(&samples),
        samples_in: 3,
        samples_evaluated: outcome.results.len(),
        samples_usable: outcome.usable().count(),
        failures: 0,
        template_sha256: template_hashes(&TemplateSet::default()),
        recal_map: None,
        calls: None,
        system_prompt: None,
    };
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &outcome, &manifest).unwrap();
    let loaded = load_run(dir.path()).unwrap();
    assert_eq!(loaded.manifest, manifest);
    assert_eq!(loaded.samples.len(), 3);
    for (loaded_sample, result) in loaded.samples.iter().zip(&outcome.results) {
        let curves = loaded_sample.curves.as_ref().unwrap();
        let record = result.record.as_ref().unwrap();
        assert_eq!(&curves.record.deviation, &record.deviation);
        assert!((curves.record.epsilon_obey - record.epsilon_obey).abs() < 1e-15);
        assert_eq!(curves.expressed, result.expressed);
    }
}

#[tokio::test]
async fn filtering_excludes_samples_whose_context_fails_extraction() {
    let mut samples = synthetic_dataset(&SyntheticModelSpec::canonical_square(), 3);
    // This context conveys "alpha" while claiming the answer is "bravo":
    // extraction comes back with the wrong answer and the filter drops it.
    samples[1].context = "Registry entry 1 maps to the codeword alpha.".to_string();
    let outcome = run(&samples, RunConfig::new(PromptMode::baseline())).await;
    let filter = outcome.filter.as_ref().unwrap();
    assert_eq!(filter.survivors.len(), 2);
    assert!(!filter.survivors.contains(&samples[1].id));
    assert_eq!(outcome.results.len(), 2);
    let rate = filter.rates.values().next().unwrap();
    assert!((rate - 200.0 / 3.0).abs() < 1e-9);

    // The unfiltered flag evaluates everything.
    let mut config = RunConfig::new(PromptMode::baseline());
    config.unfiltered = true;
    let outcome = run(&samples, config).await;
    assert!(outcome.filter.is_none());
    assert_eq!(outcome.results.len(), 3);
}

#[tokio::test]
async fn degenerate_prior_is_flagged_not_failed() {
    // A prior that puts zero mass on the context answer makes the proxy
    // distribution undefined under the context-free prompt.
    let spec = SyntheticModelSpec {
        vocabulary: vec!["alpha".into(), "bravo".into()],
        prior: vec![1.0, 0.0],
        distortion: Distortion::Square,
    };
    let backend = SyntheticBackend::new(spec.clone(), 5).unwrap();
    let samples = synthetic_dataset(&spec, 1);
    let result = run_sample(
        &backend,
        &TemplateSet::default(),
        &samples[0],
        &RunConfig::new(PromptMode::baseline()),
    )
    .await
    .unwrap();
    assert!(!result.is_usable());
    assert!(result
        .diagnostics
        .iter()
        .any(|d| d.contains("degenerate trace")));
}

#[tokio::test]
async fn provided_alternative_requires_a_gold_answer() {
    let mut samples = synthetic_dataset(&SyntheticModelSpec::canonical_square(), 1);
    samples[0].gold_answer = None;
    let mode = PromptMode {
        reminder: ReminderSource::ProvidedAlternative,
        reminder_style: ReminderStyle::AnswerOnly,
        context_form: ContextForm::Original,
        recalibrated: false,
    };
    let backend = SyntheticBackend::new(SyntheticModelSpec::canonical_square(), 5).unwrap();
    let err = run_sample(
        &backend,
        &TemplateSet::default(),
        &samples[0],
        &RunConfig::new(mode),
    )
    .await
    .unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
}

#[tokio::test]
async fn mode_toggles_change_prompts_not_the_metric_path() {
    // The synthetic model's response depends only on the expressed
    // certainty, so any mode whose toggles differ purely in prompt text
    // must produce identical metric inputs and identical records.
    let samples = synthetic_dataset(&SyntheticModelSpec::canonical_square(), 2);
    let with_reminder = PromptMode {
        reminder: ReminderSource::SelfPrior,
        reminder_style: ReminderStyle::AnswerOnly,
        context_form: ContextForm::Original,
        recalibrated: false,
    };
    let baseline = run(&samples, RunConfig::new(PromptMode::baseline())).await;
    let reminded = run(&samples, RunConfig::new(with_reminder)).await;
    for (a, b) in baseline.results.iter().zip(&reminded.results) {
        assert_eq!(a.distributions, b.distributions);
        assert_eq!(a.record, b.record);
    }
    // Both modes present the context verbatim.
    assert_eq!(baseline.results[0].context_text, samples[0].context);
    assert_eq!(reminded.results[0].context_text, samples[0].context);
}

#[tokio::test]
async fn undistorted_model_has_zero_obedience_error() {
    // With the identity distortion the observed response equals the ideal
    // mixture at every grid point.
    let spec = SyntheticModelSpec::canonical_identity();
    let samples = synthetic_dataset(&spec, 2);
    let backend: Arc<dyn ModelBackend> = Arc::new(SyntheticBackend::new(spec, 5).unwrap());
    let outcome = run_dataset(
        backend,
        templates(),
        &samples,
        Arc::new(RunConfig::new(PromptMode::baseline())),
    )
    .await
    .unwrap();
    for result in outcome.usable() {
        assert!(result.record.as_ref().unwrap().epsilon_obey < 1e-9);
    }
}

#[tokio::test]
async fn simplified_and_provided_contexts_read_identically_on_the_oracle() {
    // The synthetic extraction rule returns the context answer, so the
    // model-simplified context and the dataset-provided one come out as the
    // same text.
    let samples = synthetic_dataset(&SyntheticModelSpec::canonical_square(), 2);
    let mode_with = |context_form| PromptMode {
        reminder: ReminderSource::None,
        reminder_style: ReminderStyle::AnswerOnly,
        context_form,
        recalibrated: false,
    };
    let simplified = run(&samples, RunConfig::new(mode_with(ContextForm::Simplified))).await;
    let provided = run(&samples, RunConfig::new(mode_with(ContextForm::ProvidedSimple))).await;
    for (a, b) in simplified.results.iter().zip(&provided.results) {
        assert_eq!(a.context_text, "The answer is bravo");
        assert_eq!(a.context_text, b.context_text);
        assert_eq!(a.record, b.record);
    }
}

#[tokio::test]
async fn summarized_context_flows_through_the_sweep() {
    let samples = synthetic_dataset(&SyntheticModelSpec::canonical_square(), 1);
    let mode = PromptMode {
        reminder: ReminderSource::None,
        reminder_style: ReminderStyle::AnswerOnly,
        context_form: ContextForm::Summarized,
        recalibrated: false,
    };
    let outcome = run(&samples, RunConfig::new(mode)).await;
    let result = &outcome.results[0];
    assert!(result.is_usable());
    assert!(result.context_text.contains("bravo"));
    assert_ne!(result.context_text, samples[0].context);
    // The oracle's response depends on the certainty and conveyed answer
    // only, so the metrics match the baseline.
    let baseline = run(&samples, RunConfig::new(PromptMode::baseline())).await;
    assert_eq!(result.record, baseline.results[0].record);
}

// ---------------------------------------------------------------------------
// Generation-policy plumbing, observed through a recording backend
// ---------------------------------------------------------------------------

struct RecordingBackend {
    last_params: Mutex<Option<GenerationParams>>,
}

#[async_trait]
impl ModelBackend for RecordingBackend {
    fn identity(&self) -> String {
        "recording".into()
    }

    fn top_k(&self) -> u32 {
        5
    }

    async fn score_answer(
        &self,
        _prompt: &str,
        _answer: &str,
    ) -> Result<obeval_core::trace::ScoredTrace, BackendError> {
        Err(BackendError::Capability("scoring not recorded".into()))
    }

    async fn generate(
        &self,
        _prompt: &str,
        params: &GenerationParams,
    ) -> Result<GenerationOutput, BackendError> {
        *self.last_params.lock().unwrap() = Some(params.clone());
        Ok(GenerationOutput {
            text: "answer".into(),
            token_probs: vec![0.5],
        })
    }
}

#[tokio::test]
async fn explained_style_uses_the_explained_token_budget() {
    let backend = RecordingBackend {
        last_params: Mutex::new(None),
    };
    let samples = synthetic_dataset(&SyntheticModelSpec::canonical_square(), 1);
    let policy = GenerationPolicy {
        prior_max_tokens: 16,
        explained_max_tokens: 100,
        ..GenerationPolicy::default()
    };

    elicit_prior(
        &backend,
        &TemplateSet::default(),
        &samples[0],
        ReminderStyle::AnswerOnly,
        &policy,
    )
    .await
    .unwrap();
    assert_eq!(
        backend.last_params.lock().unwrap().as_ref().unwrap().max_new_tokens,
        16
    );

    elicit_prior(
        &backend,
        &TemplateSet::default(),
        &samples[0],
        ReminderStyle::Explained,
        &policy,
    )
    .await
    .unwrap();
    assert_eq!(
        backend.last_params.lock().unwrap().as_ref().unwrap().max_new_tokens,
        100
    );
}

#[tokio::test]
async fn cached_and_uncached_runs_agree() {
    let samples = synthetic_dataset(&SyntheticModelSpec::canonical_square(), 2);
    let dir = tempfile::tempdir().unwrap();
    let cached: Arc<dyn ModelBackend> = Arc::new(
        CachedBackend::new(canonical_backend(), Some(dir.path())).unwrap(),
    );
    let direct = run(&samples, RunConfig::new(PromptMode::baseline())).await;
    let via_cache = run_dataset(
        cached,
        templates(),
        &samples,
        Arc::new(RunConfig::new(PromptMode::baseline())),
    )
    .await
    .unwrap();
    assert_eq!(direct.results, via_cache.results);
}

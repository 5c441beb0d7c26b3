//! The operations behind the service endpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use obeval_backend::{BackendSelection, ModelBackend};
use obeval_client::api::{
    EvalTarget, FilterRequest, FilterSummary, FitRecalRequest, FitSummary, ReportRequest,
    ReportSummary, RunRef, SweepRequest, SweepSummary,
};
use obeval_core::dataset::{self, retrieval_filter, LoadOptions, Sample};
use obeval_core::prob::CertaintySweep;
use obeval_core::recal::RecalibrationMap;
use obeval_core::report::{
    ablation_table, aggregate, heatmap, write_ablation_csv, write_curves_csv, write_curves_svg,
    write_heatmap_csv, write_heatmap_svg, write_recal_map_csv, write_recal_map_svg,
    AggregateCurves,
};
use obeval_core::prompt::TemplateSet;
use obeval_pipeline::cache::CachedBackend;
use obeval_pipeline::fit::{fit_held_out_maps, fit_pooled};
use obeval_pipeline::results::{
    dataset_sha256, load_run, now_unix_ms, template_hashes, write_run, Manifest,
    MANIFEST_VERSION,
};
use obeval_pipeline::runner::{extract_answer, run_dataset, PipelineError, RunConfig};
use obeval_pipeline::synthdata::synthetic_dataset;

struct Prepared {
    samples: Vec<Sample>,
    dataset_label: String,
    backend: Arc<CachedBackend>,
    templates: Arc<TemplateSet>,
}

fn io_err(path: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.to_string(),
        reason: e.to_string(),
    }
}

fn prepare(target: &EvalTarget) -> Result<Prepared, PipelineError> {
    let (samples, dataset_label) = match &target.dataset {
        Some(path) => {
            let samples = dataset::load_with(
                Path::new(path),
                LoadOptions {
                    include_sports: target.include_sports,
                },
            )?;
            (samples, path.clone())
        }
        None => match &target.backend {
            BackendSelection::Synthetic { spec, .. } => {
                let n = target.synthetic_samples;
                (synthetic_dataset(spec, n), format!("synthetic:n={n}"))
            }
            BackendSelection::Http(_) => {
                return Err(PipelineError::Config(
                    "an HTTP backend needs a dataset; generated datasets exist only for the \
                     synthetic backend"
                        .into(),
                ))
            }
        },
    };
    let inner = target.backend.build()?;
    let backend = Arc::new(CachedBackend::new(
        inner,
        target.cache_dir.as_deref().map(Path::new),
    )?);
    let templates = match &target.template_dir {
        Some(dir) => TemplateSet::from_dir(Path::new(dir))?,
        None => TemplateSet::default(),
    };
    Ok(Prepared {
        samples,
        dataset_label,
        backend,
        templates: Arc::new(templates),
    })
}

fn load_map(path: &str) -> Result<RecalibrationMap, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(RecalibrationMap::from_text(&text)?)
}

fn build_config(
    mode: obeval_client::api::ModeSpec,
    sweep: &[f64],
    recal_map: Option<RecalibrationMap>,
    unfiltered: bool,
    workers: usize,
) -> Result<RunConfig, PipelineError> {
    let mut config = RunConfig::new(mode.to_prompt_mode(recal_map.is_some()));
    config.sweep = CertaintySweep::from_values(sweep)?;
    config.recal_map = recal_map;
    config.unfiltered = unfiltered;
    config.workers = workers;
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

pub async fn sweep(request: SweepRequest) -> Result<serde_json::Value, PipelineError> {
    let prepared = prepare(&request.target)?;
    let recal_map = request.recal_map.as_deref().map(load_map).transpose()?;
    let recal_text = recal_map.as_ref().map(RecalibrationMap::to_text);
    let config = build_config(
        request.mode,
        &request.sweep,
        recal_map,
        request.unfiltered,
        request.target.workers,
    )?;
    let samples_in = prepared.samples.len();
    let outcome = run_dataset(
        Arc::clone(&prepared.backend) as Arc<dyn ModelBackend>,
        Arc::clone(&prepared.templates),
        &prepared.samples,
        Arc::new(config.clone()),
    )
    .await?;

    let curves: Vec<_> = outcome.usable().filter_map(|r| r.curves()).collect();
    let agg = if curves.is_empty() {
        None
    } else {
        Some(aggregate(&curves, outcome.excluded_ids())?)
    };

    let calls = prepared.backend.counters().snapshot();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        created_unix_ms: now_unix_ms(),
        backend_identity: prepared.backend.identity(),
        top_k: prepared.backend.top_k(),
        mode: config.mode,
        sweep: request.sweep.clone(),
        unfiltered: request.unfiltered,
        generation: config.generation.clone(),
        dataset_label: prepared.dataset_label,
        dataset_sha256: dataset_sha256(&prepared.samples),
        samples_in,
        samples_evaluated: outcome.results.len(),
        samples_usable: outcome.usable().count(),
        failures: outcome.failures.len(),
        template_sha256: template_hashes(&prepared.templates),
        recal_map: recal_text,
        calls: Some(calls),
        system_prompt: None,
    };
    let out_dir = Path::new(&request.out_dir);
    write_run(out_dir, &outcome, &manifest)?;
    if let Some(agg) = &agg {
        write_curves_csv(agg, &out_dir.join("aggregate.csv"))
            .map_err(|e| io_err(&request.out_dir, e))?;
    }
    let summary = SweepSummary {
        out_dir: request.out_dir.clone(),
        backend_identity: manifest.backend_identity.clone(),
        samples_in,
        samples_evaluated: manifest.samples_evaluated,
        samples_usable: manifest.samples_usable,
        failures: manifest.failures,
        epsilon_obey: agg.map(|a| a.epsilon_obey),
        calls,
        filter_rates: outcome
            .filter
            .as_ref()
            .map(|f| f.rates.clone())
            .unwrap_or_default(),
    };
    Ok(serde_json::to_value(summary).expect("summary serializes"))
}

// ---------------------------------------------------------------------------
// Recalibration fitting
// ---------------------------------------------------------------------------

pub async fn fit_recal(request: FitRecalRequest) -> Result<serde_json::Value, PipelineError> {
    let prepared = prepare(&request.target)?;
    // The fitting sweep always expresses raw certainties.
    let config = build_config(
        request.mode,
        &request.sweep,
        None,
        request.unfiltered,
        request.target.workers,
    )?;
    let outcome = run_dataset(
        Arc::clone(&prepared.backend) as Arc<dyn ModelBackend>,
        Arc::clone(&prepared.templates),
        &prepared.samples,
        Arc::new(config),
    )
    .await?;
    let samples_used = outcome.usable().count();

    let mut maps = BTreeMap::new();
    let mut tables = BTreeMap::new();
    if request.held_out {
        let fitted = fit_held_out_maps(&outcome.results)?;
        let out_dir = Path::new(&request.out);
        std::fs::create_dir_all(out_dir).map_err(|e| io_err(&request.out, e))?;
        for (category, map) in fitted {
            let file = out_dir.join(format!("{}.map", category.replace([' ', '/'], "_")));
            let text = map.to_text();
            std::fs::write(&file, &text).map_err(|e| io_err(&file.display().to_string(), e))?;
            maps.insert(category.clone(), file.display().to_string());
            tables.insert(category, text);
        }
    } else {
        let map = fit_pooled(&outcome.results)?;
        let text = map.to_text();
        if let Some(parent) = Path::new(&request.out).parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| io_err(&request.out, e))?;
            }
        }
        std::fs::write(&request.out, &text).map_err(|e| io_err(&request.out, e))?;
        maps.insert("pooled".to_string(), request.out.clone());
        tables.insert("pooled".to_string(), text);
    }
    let summary = FitSummary {
        maps,
        tables,
        samples_used,
    };
    Ok(serde_json::to_value(summary).expect("summary serializes"))
}

// ---------------------------------------------------------------------------
// Retrieval filter
// ---------------------------------------------------------------------------

pub async fn filter(request: FilterRequest) -> Result<serde_json::Value, PipelineError> {
    let prepared = prepare(&request.target)?;
    let policy = obeval_pipeline::GenerationPolicy::default();
    let mut own = BTreeMap::new();
    for sample in &prepared.samples {
        let text = extract_answer(
            prepared.backend.as_ref(),
            &prepared.templates,
            sample,
            &policy,
        )
        .await?
        .unwrap_or_default();
        own.insert(sample.id.clone(), text);
    }
    let mut extractions = request.extra_extractions.clone();
    extractions.insert(prepared.backend.identity(), own);
    let report = retrieval_filter(&prepared.samples, &extractions)?;
    if let Some(out) = &request.out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        if let Some(parent) = Path::new(out).parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| io_err(out, e))?;
            }
        }
        std::fs::write(out, json).map_err(|e| io_err(out, e))?;
    }
    let summary = FilterSummary {
        report,
        out: request.out.clone(),
    };
    Ok(serde_json::to_value(summary).expect("summary serializes"))
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

pub fn report(request: &ReportRequest) -> Result<ReportSummary, PipelineError> {
    let out_dir = Path::new(&request.out_dir);
    let mut files = Vec::new();
    let mut rows: Vec<(String, BTreeMap<String, AggregateCurves>)> = Vec::new();

    for RunRef { label, dir } in &request.runs {
        let loaded = load_run(Path::new(dir))?;
        let (curves, excluded) = loaded.sample_curves();
        if curves.is_empty() {
            return Err(PipelineError::Config(format!(
                "run `{label}` ({dir}) has no usable samples to report"
            )));
        }
        let agg = aggregate(&curves, excluded)?;

        let csv_path = out_dir.join(format!("{label}-curves.csv"));
        write_curves_csv(&agg, &csv_path).map_err(|e| io_err(&request.out_dir, e))?;
        files.push(csv_path.display().to_string());
        let svg_path = out_dir.join(format!("{label}-curves.svg"));
        write_curves_svg(&agg, label, &svg_path).map_err(|e| io_err(&request.out_dir, e))?;
        files.push(svg_path.display().to_string());

        let entries = loaded.heatmap_entries()?;
        if !entries.is_empty() {
            let map = heatmap(&entries)?;
            let heat_csv = out_dir.join(format!("{label}-heatmap.csv"));
            write_heatmap_csv(&map, &heat_csv).map_err(|e| io_err(&request.out_dir, e))?;
            files.push(heat_csv.display().to_string());
            let heat_svg = out_dir.join(format!("{label}-heatmap.svg"));
            write_heatmap_svg(&map, label, &heat_svg).map_err(|e| io_err(&request.out_dir, e))?;
            files.push(heat_svg.display().to_string());
        }

        let backend = loaded.manifest.backend_identity.clone();
        match rows.iter_mut().find(|(l, _)| l == label) {
            Some((_, cells)) => {
                if cells.insert(backend.clone(), agg).is_some() {
                    return Err(PipelineError::Config(format!(
                        "two runs labeled `{label}` share the backend `{backend}`"
                    )));
                }
            }
            None => {
                rows.push((label.clone(), BTreeMap::from([(backend, agg)])));
            }
        }
    }

    if request.runs.len() > 1 {
        let table = ablation_table(&rows)?;
        let path = out_dir.join("ablation.csv");
        write_ablation_csv(&table, &path).map_err(|e| io_err(&request.out_dir, e))?;
        files.push(path.display().to_string());
    }

    if let Some(map_path) = &request.recal_map {
        let map = load_map(map_path)?;
        let csv_path = out_dir.join("recal-map.csv");
        write_recal_map_csv(&map, &csv_path).map_err(|e| io_err(&request.out_dir, e))?;
        files.push(csv_path.display().to_string());
        let svg_path = out_dir.join("recal-map.svg");
        write_recal_map_svg(&map, "recalibration map", &svg_path)
            .map_err(|e| io_err(&request.out_dir, e))?;
        files.push(svg_path.display().to_string());
    }

    Ok(ReportSummary { files })
}

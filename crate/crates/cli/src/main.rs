//! `obeval` — evaluation runs for context-certainty obedience.
//!
//! The CLI is a client of the evaluation service. With `--server` it talks
//! to a running instance; without it, an ephemeral in-process service is
//! spawned for the duration of the command, so one-shot runs need no
//! separate daemon.
//!
//! Exit codes: 0 on success, 1 when evaluation errors are present, 2 for
//! usage or configuration errors.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use obeval_backend::{BackendConfig, BackendSelection, RetryPolicy, SyntheticModelSpec};
use obeval_client::api::{
    ErrorKind, EvalTarget, FilterRequest, FilterSummary, FitRecalRequest, FitSummary, JobState,
    JobStatus, ModeSpec, ReportRequest, RunRef, SweepRequest, SweepSummary,
};
use obeval_client::Client;
use obeval_core::prompt::{ContextForm, ReminderSource, ReminderStyle};

const EXIT_EVAL: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "obeval",
    version,
    about = "Measure and improve how a model obeys expressed context certainty",
    propagate_version = true
)]
struct Cli {
    /// Base URL of a running obeval service; omitted, an ephemeral
    /// in-process service handles the command.
    #[arg(long, global = true)]
    server: Option<String>,

    /// key=value file supplying defaults for any long flag below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evaluation service in the foreground.
    Serve {
        /// Address to listen on.
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Apply the retrieval-success filter and report per-backend rates.
    Filter(FilterArgs),
    /// Evaluate a certainty sweep under explicit mode toggles.
    Sweep(SweepArgs),
    /// Canned evaluations: the plain baseline or the full three-step
    /// interaction strategy (prior reminder, recalibration, simplified
    /// context).
    Run(RunArgs),
    /// Fit certainty recalibration maps from a raw sweep.
    FitRecal(FitRecalArgs),
    /// Emit tables and figures from stored run directories.
    Report(ReportArgs),
    /// Run the synthetic-oracle check suite and print one line per check.
    SynthCheck,
}

#[derive(Args, Clone, Default)]
struct TargetArgs {
    /// Completions URL of an HTTP backend; omitted, the built-in synthetic
    /// model is used.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the HTTP backend.
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key (the only way to pass one).
    #[arg(long)]
    api_key_env: Option<String>,
    /// Named alternative logprobs requested per scoring step [default: 5].
    #[arg(long)]
    top_k: Option<u32>,
    /// Maximum in-flight backend requests [default: 4].
    #[arg(long)]
    max_inflight: Option<usize>,
    /// Per-request timeout in seconds [default: 60].
    #[arg(long)]
    timeout_secs: Option<f64>,
    /// JSON file describing a synthetic model (vocabulary, prior,
    /// distortion); defaults to the canonical square-distortion oracle.
    #[arg(long)]
    synthetic_spec: Option<PathBuf>,
    /// Samples to generate when no dataset is given (synthetic backend
    /// only) [default: 10].
    #[arg(long)]
    synthetic_samples: Option<usize>,
    /// Line-delimited JSON dataset (fields: id, question, context,
    /// context_answer, gold_answer?, category).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Keep the sports-records category instead of dropping it.
    #[arg(long)]
    include_sports: bool,
    /// Response-cache directory; reruns over the same cache cost nothing.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Directory of template overrides (<name>.txt).
    #[arg(long)]
    template_dir: Option<PathBuf>,
    /// Concurrent samples in flight [default: 4].
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReminderArg {
    None,
    /// Remind the model of its own context-free answer.
    SelfPrior,
    /// Remind with the dataset's gold answer instead.
    Alt,
    /// Self reminder elicited with an explanation budget.
    Explained,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ContextArg {
    Original,
    /// "The answer is {extracted}" with a model-extracted answer.
    Simplified,
    /// Model-written summary of the context.
    Summarized,
    /// "The answer is {answer}" with the dataset's context answer.
    Provided,
}

#[derive(Args, Clone)]
struct ModeArgs {
    /// Reminder line in the main prompt.
    #[arg(long, value_enum, default_value = "self-prior")]
    reminder: ReminderArg,
    /// Context presentation in the main prompt.
    #[arg(long, value_enum, default_value = "simplified")]
    context: ContextArg,
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[command(flatten)]
    mode: ModeArgs,
    /// Recalibration-map table; supplying one turns recalibration on.
    #[arg(long)]
    recal_map: Option<PathBuf>,
    /// Comma-separated certainty grid [default: 0,0.2,0.4,0.6,0.8,1].
    #[arg(long)]
    sweep: Option<String>,
    /// Evaluate every sample, skipping the retrieval-success filter.
    #[arg(long)]
    unfiltered: bool,
    /// Output directory for the run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RunMode {
    /// No enhancements: original context, no reminder, raw certainty.
    Baseline,
    /// Prior reminder + recalibrated certainty + simplified context.
    Full,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, value_enum)]
    mode: RunMode,
    /// Recalibration map for `--mode full`; fitted on the fly when absent.
    #[arg(long)]
    recal_map: Option<PathBuf>,
    /// Comma-separated certainty grid [default: 0,0.2,0.4,0.6,0.8,1].
    #[arg(long)]
    sweep: Option<String>,
    /// Evaluate every sample, skipping the retrieval-success filter.
    #[arg(long)]
    unfiltered: bool,
    /// Output directory for the run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct FitRecalArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[command(flatten)]
    mode: ModeArgs,
    /// Comma-separated certainty grid [default: 0,0.2,0.4,0.6,0.8,1].
    #[arg(long)]
    sweep: Option<String>,
    /// Evaluate every sample, skipping the retrieval-success filter.
    #[arg(long)]
    unfiltered: bool,
    /// Fit one map per category from the other categories' samples; `--out`
    /// becomes a directory of <category>.map files.
    #[arg(long)]
    held_out: bool,
    /// Output map file (or directory with --held-out).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct FilterArgs {
    #[command(flatten)]
    target: TargetArgs,
    /// Extra extraction files to combine, as label=path (JSON map of
    /// sample id to extracted text); repeatable.
    #[arg(long = "extractions")]
    extractions: Vec<String>,
    /// File to write the filter report to.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ReportArgs {
    /// Stored run to report, as label=dir; repeatable. With several runs an
    /// ablation table is added.
    #[arg(long = "run", required = true)]
    runs: Vec<String>,
    /// Recalibration-map table to plot alongside.
    #[arg(long)]
    recal_map: Option<PathBuf>,
    /// Output directory for tables and figures.
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Config-file defaults
// ---------------------------------------------------------------------------

struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&PathBuf>) -> Result<Self, String> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config `{}`: {e}", path.display()))?;
            for (number, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or(format!(
                    "config line {} is not key=value: `{line}`",
                    number + 1
                ))?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Self(map))
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn fill(&self, target: &mut TargetArgs) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| format!("config key `{key}`: {e}"))
        }
        macro_rules! fill_opt {
            ($field:ident, $key:literal) => {
                if target.$field.is_none() {
                    if let Some(value) = self.get($key) {
                        target.$field = Some(parse($key, value)?);
                    }
                }
            };
        }
        fill_opt!(endpoint, "endpoint");
        fill_opt!(model, "model");
        fill_opt!(api_key_env, "api-key-env");
        fill_opt!(top_k, "top-k");
        fill_opt!(max_inflight, "max-inflight");
        fill_opt!(timeout_secs, "timeout-secs");
        fill_opt!(synthetic_spec, "synthetic-spec");
        fill_opt!(synthetic_samples, "synthetic-samples");
        fill_opt!(dataset, "dataset");
        fill_opt!(cache_dir, "cache-dir");
        fill_opt!(template_dir, "template-dir");
        fill_opt!(workers, "workers");
        if !target.include_sports {
            if let Some(value) = self.get("include-sports") {
                target.include_sports = parse("include-sports", value)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Assembly helpers
// ---------------------------------------------------------------------------

fn usage_error(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(EXIT_USAGE)
}

fn eval_error(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(EXIT_EVAL)
}

fn backend_selection(target: &TargetArgs) -> Result<BackendSelection, String> {
    match &target.endpoint {
        Some(endpoint) => {
            let model = target
                .model
                .clone()
                .ok_or("--model is required with --endpoint")?;
            Ok(BackendSelection::Http(BackendConfig {
                endpoint: endpoint.clone(),
                model,
                api_key_env: target.api_key_env.clone(),
                top_k: target.top_k.unwrap_or(5),
                max_inflight: target.max_inflight.unwrap_or(4),
                timeout_secs: target.timeout_secs.unwrap_or(60.0),
                retry: RetryPolicy::default(),
            }))
        }
        None => {
            let spec = match &target.synthetic_spec {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| format!("cannot read `{}`: {e}", path.display()))?;
                    serde_json::from_str::<SyntheticModelSpec>(&text)
                        .map_err(|e| format!("bad synthetic spec `{}`: {e}", path.display()))?
                }
                None => SyntheticModelSpec::canonical_square(),
            };
            Ok(BackendSelection::Synthetic {
                spec,
                top_k: target.top_k.unwrap_or(5),
            })
        }
    }
}

fn eval_target(target: &TargetArgs) -> Result<EvalTarget, String> {
    Ok(EvalTarget {
        dataset: target.dataset.as_ref().map(|p| p.display().to_string()),
        synthetic_samples: target.synthetic_samples.unwrap_or(10),
        include_sports: target.include_sports,
        backend: backend_selection(target)?,
        cache_dir: target.cache_dir.as_ref().map(|p| p.display().to_string()),
        template_dir: target.template_dir.as_ref().map(|p| p.display().to_string()),
        workers: target.workers.unwrap_or(4),
    })
}

fn parse_sweep(flag: Option<&str>, config: &FileConfig) -> Result<Vec<f64>, String> {
    let text = match flag.or_else(|| config.get("sweep")) {
        Some(text) => text,
        None => return Ok(vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]),
    };
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad sweep value `{part}`: {e}"))
        })
        .collect()
}

fn mode_spec(mode: &ModeArgs) -> ModeSpec {
    let (reminder, reminder_style) = match mode.reminder {
        ReminderArg::None => (ReminderSource::None, ReminderStyle::AnswerOnly),
        ReminderArg::SelfPrior => (ReminderSource::SelfPrior, ReminderStyle::AnswerOnly),
        ReminderArg::Alt => (ReminderSource::ProvidedAlternative, ReminderStyle::AnswerOnly),
        ReminderArg::Explained => (ReminderSource::SelfPrior, ReminderStyle::Explained),
    };
    let context_form = match mode.context {
        ContextArg::Original => ContextForm::Original,
        ContextArg::Simplified => ContextForm::Simplified,
        ContextArg::Summarized => ContextForm::Summarized,
        ContextArg::Provided => ContextForm::ProvidedSimple,
    };
    ModeSpec {
        reminder,
        reminder_style,
        context_form,
    }
}

fn parse_labeled(pairs: &[String], what: &str) -> Result<Vec<(String, String)>, String> {
    pairs
        .iter()
        .map(|pair| {
            pair.split_once('=')
                .map(|(label, value)| (label.to_string(), value.to_string()))
                .ok_or(format!("{what} must be label=value, got `{pair}`"))
        })
        .collect()
}

/// Poll interval; short for the in-process service, politer for remote.
fn poll_interval(remote: bool) -> Duration {
    if remote {
        Duration::from_millis(1000)
    } else {
        Duration::from_millis(50)
    }
}

struct Session {
    client: Client,
    remote: bool,
}

async fn connect(server: Option<&str>) -> Result<Session, String> {
    match server {
        Some(base) => {
            let client = Client::new(base);
            client
                .health()
                .await
                .map_err(|e| format!("cannot reach the service at {base}: {e}"))?;
            Ok(Session {
                client,
                remote: true,
            })
        }
        None => {
            let base = obeval_server::spawn_ephemeral()
                .await
                .map_err(|e| format!("cannot start the embedded service: {e}"))?;
            Ok(Session {
                client: Client::new(base),
                remote: false,
            })
        }
    }
}

async fn wait_for(session: &Session, job_id: &str) -> Result<JobStatus, String> {
    session
        .client
        .wait(job_id, poll_interval(session.remote))
        .await
        .map_err(|e| e.to_string())
}

/// Map a finished job to an exit code, printing its error if any.
fn settle(status: &JobStatus) -> Result<(), ExitCode> {
    match status.state {
        JobState::Done => Ok(()),
        JobState::Failed => {
            let message = status.error.as_deref().unwrap_or("job failed");
            Err(match status.error_kind {
                Some(ErrorKind::Config) => usage_error(message),
                _ => eval_error(message),
            })
        }
        _ => Err(eval_error("job ended in a non-terminal state")),
    }
}

fn print_sweep_summary(summary: &SweepSummary) {
    println!("run: {}", summary.out_dir);
    println!("backend: {}", summary.backend_identity);
    for (backend, rate) in &summary.filter_rates {
        println!("retrieval rate: {rate}% ({backend})");
    }
    println!(
        "samples: {} in, {} evaluated, {} usable, {} failed",
        summary.samples_in, summary.samples_evaluated, summary.samples_usable, summary.failures
    );
    println!(
        "calls: {} scoring, {} generation",
        summary.calls.scoring, summary.calls.generation
    );
    match summary.epsilon_obey {
        Some(epsilon) => println!("epsilon_obey: {epsilon:.6}"),
        None => println!("epsilon_obey: n/a (no usable samples)"),
    }
}

fn sweep_exit(summary: &SweepSummary) -> ExitCode {
    if summary.failures > 0 || summary.samples_usable == 0 {
        ExitCode::from(EXIT_EVAL)
    } else {
        ExitCode::SUCCESS
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

async fn cmd_sweep(session: &Session, request: SweepRequest) -> Result<SweepSummary, ExitCode> {
    let submitted = session
        .client
        .submit_sweep(&request)
        .await
        .map_err(eval_error)?;
    let status = wait_for(session, &submitted.job_id)
        .await
        .map_err(eval_error)?;
    settle(&status)?;
    serde_json::from_value(status.result.unwrap_or_default())
        .map_err(|e| eval_error(format!("bad sweep summary: {e}")))
}

async fn cmd_fit(
    session: &Session,
    request: FitRecalRequest,
) -> Result<FitSummary, ExitCode> {
    let submitted = session
        .client
        .submit_fit_recal(&request)
        .await
        .map_err(eval_error)?;
    let status = wait_for(session, &submitted.job_id)
        .await
        .map_err(eval_error)?;
    settle(&status)?;
    serde_json::from_value(status.result.unwrap_or_default())
        .map_err(|e| eval_error(format!("bad fit summary: {e}")))
}

async fn run_command(cli: Cli) -> ExitCode {
    let config = match FileConfig::load(cli.config.as_ref()) {
        Ok(config) => config,
        Err(e) => return usage_error(e),
    };
    let server = cli
        .server
        .clone()
        .or_else(|| config.get("server").map(str::to_string));

    match cli.command {
        Command::Serve { addr } => {
            let listener = match tokio::net::TcpListener::bind(&addr).await {
                Ok(listener) => listener,
                Err(e) => return usage_error(format!("cannot bind {addr}: {e}")),
            };
            println!("obeval service listening on http://{addr}");
            match obeval_server::serve(listener).await {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => eval_error(e),
            }
        }

        Command::SynthCheck => {
            let session = match connect(server.as_deref()).await {
                Ok(session) => session,
                Err(e) => return usage_error(e),
            };
            let response = match session.client.synth_check().await {
                Ok(response) => response,
                Err(e) => return eval_error(e),
            };
            for check in &response.checks {
                let verdict = if check.passed { "PASS" } else { "FAIL" };
                println!("{verdict} {}: {}", check.name, check.detail);
            }
            if response.passed {
                println!("synth-check: all {} checks passed", response.checks.len());
                ExitCode::SUCCESS
            } else {
                eprintln!("synth-check: failures present");
                ExitCode::from(EXIT_EVAL)
            }
        }

        Command::Filter(mut args) => {
            if let Err(e) = config.fill(&mut args.target) {
                return usage_error(e);
            }
            let target = match eval_target(&args.target) {
                Ok(target) => target,
                Err(e) => return usage_error(e),
            };
            let mut extra = BTreeMap::new();
            let pairs = match parse_labeled(&args.extractions, "--extractions") {
                Ok(pairs) => pairs,
                Err(e) => return usage_error(e),
            };
            for (label, path) in pairs {
                let text = match std::fs::read_to_string(&path) {
                    Ok(text) => text,
                    Err(e) => return usage_error(format!("cannot read `{path}`: {e}")),
                };
                let map: BTreeMap<String, String> = match serde_json::from_str(&text) {
                    Ok(map) => map,
                    Err(e) => return usage_error(format!("bad extraction file `{path}`: {e}")),
                };
                extra.insert(label, map);
            }
            let session = match connect(server.as_deref()).await {
                Ok(session) => session,
                Err(e) => return usage_error(e),
            };
            let request = FilterRequest {
                target,
                extra_extractions: extra,
                out: args.out.as_ref().map(|p| p.display().to_string()),
            };
            let submitted = match session.client.submit_filter(&request).await {
                Ok(submitted) => submitted,
                Err(e) => return eval_error(e),
            };
            let status = match wait_for(&session, &submitted.job_id).await {
                Ok(status) => status,
                Err(e) => return eval_error(e),
            };
            if let Err(code) = settle(&status) {
                return code;
            }
            let summary: FilterSummary =
                match serde_json::from_value(status.result.unwrap_or_default()) {
                    Ok(summary) => summary,
                    Err(e) => return eval_error(format!("bad filter summary: {e}")),
                };
            for (backend, rate) in &summary.report.rates {
                println!("retrieval rate: {rate}% ({backend})");
            }
            println!("survivors: {}", summary.report.survivors.len());
            if let Some(out) = &summary.out {
                println!("report: {out}");
            }
            ExitCode::SUCCESS
        }

        Command::Sweep(mut args) => {
            if let Err(e) = config.fill(&mut args.target) {
                return usage_error(e);
            }
            let target = match eval_target(&args.target) {
                Ok(target) => target,
                Err(e) => return usage_error(e),
            };
            let sweep = match parse_sweep(args.sweep.as_deref(), &config) {
                Ok(sweep) => sweep,
                Err(e) => return usage_error(e),
            };
            let session = match connect(server.as_deref()).await {
                Ok(session) => session,
                Err(e) => return usage_error(e),
            };
            let request = SweepRequest {
                target,
                mode: mode_spec(&args.mode),
                recal_map: args.recal_map.as_ref().map(|p| p.display().to_string()),
                sweep,
                unfiltered: args.unfiltered,
                out_dir: args.out.display().to_string(),
            };
            match cmd_sweep(&session, request).await {
                Ok(summary) => {
                    print_sweep_summary(&summary);
                    sweep_exit(&summary)
                }
                Err(code) => code,
            }
        }

        Command::Run(mut args) => {
            if let Err(e) = config.fill(&mut args.target) {
                return usage_error(e);
            }
            let target = match eval_target(&args.target) {
                Ok(target) => target,
                Err(e) => return usage_error(e),
            };
            let sweep = match parse_sweep(args.sweep.as_deref(), &config) {
                Ok(sweep) => sweep,
                Err(e) => return usage_error(e),
            };
            let session = match connect(server.as_deref()).await {
                Ok(session) => session,
                Err(e) => return usage_error(e),
            };
            let out_dir = args.out.display().to_string();
            match args.mode {
                RunMode::Baseline => {
                    let request = SweepRequest {
                        target,
                        mode: ModeSpec::baseline(),
                        recal_map: None,
                        sweep,
                        unfiltered: args.unfiltered,
                        out_dir,
                    };
                    match cmd_sweep(&session, request).await {
                        Ok(summary) => {
                            print_sweep_summary(&summary);
                            sweep_exit(&summary)
                        }
                        Err(code) => code,
                    }
                }
                RunMode::Full => {
                    // Fit a map first unless one was supplied; the fitting
                    // sweep shares the cache with the final run.
                    let map_path = match &args.recal_map {
                        Some(path) => path.display().to_string(),
                        None => {
                            let map_path = args.out.join("recal.map").display().to_string();
                            let fit_request = FitRecalRequest {
                                target: target.clone(),
                                mode: ModeSpec::full(),
                                sweep: sweep.clone(),
                                unfiltered: args.unfiltered,
                                held_out: false,
                                out: map_path.clone(),
                            };
                            match cmd_fit(&session, fit_request).await {
                                Ok(summary) => {
                                    println!(
                                        "fitted recalibration map from {} samples: {map_path}",
                                        summary.samples_used
                                    );
                                    map_path
                                }
                                Err(code) => return code,
                            }
                        }
                    };
                    let request = SweepRequest {
                        target,
                        mode: ModeSpec::full(),
                        recal_map: Some(map_path),
                        sweep,
                        unfiltered: args.unfiltered,
                        out_dir,
                    };
                    match cmd_sweep(&session, request).await {
                        Ok(summary) => {
                            print_sweep_summary(&summary);
                            sweep_exit(&summary)
                        }
                        Err(code) => code,
                    }
                }
            }
        }

        Command::FitRecal(mut args) => {
            if let Err(e) = config.fill(&mut args.target) {
                return usage_error(e);
            }
            let target = match eval_target(&args.target) {
                Ok(target) => target,
                Err(e) => return usage_error(e),
            };
            let sweep = match parse_sweep(args.sweep.as_deref(), &config) {
                Ok(sweep) => sweep,
                Err(e) => return usage_error(e),
            };
            let session = match connect(server.as_deref()).await {
                Ok(session) => session,
                Err(e) => return usage_error(e),
            };
            let request = FitRecalRequest {
                target,
                mode: mode_spec(&args.mode),
                sweep,
                unfiltered: args.unfiltered,
                held_out: args.held_out,
                out: args.out.display().to_string(),
            };
            match cmd_fit(&session, request).await {
                Ok(summary) => {
                    for (label, path) in &summary.maps {
                        println!("map ({label}): {path}");
                    }
                    println!("fitted from {} samples", summary.samples_used);
                    ExitCode::SUCCESS
                }
                Err(code) => code,
            }
        }

        Command::Report(args) => {
            let runs = match parse_labeled(&args.runs, "--run") {
                Ok(pairs) => pairs
                    .into_iter()
                    .map(|(label, dir)| RunRef { label, dir })
                    .collect(),
                Err(e) => return usage_error(e),
            };
            let session = match connect(server.as_deref()).await {
                Ok(session) => session,
                Err(e) => return usage_error(e),
            };
            let request = ReportRequest {
                runs,
                recal_map: args.recal_map.as_ref().map(|p| p.display().to_string()),
                out_dir: args.out.display().to_string(),
            };
            match session.client.report(&request).await {
                Ok(summary) => {
                    for file in &summary.files {
                        println!("wrote {file}");
                    }
                    ExitCode::SUCCESS
                }
                Err(obeval_client::ClientError::Service { status: 400, body, .. }) => {
                    usage_error(body)
                }
                Err(e) => eval_error(e),
            }
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    run_command(cli).await
}

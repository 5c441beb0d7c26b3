//! Evaluation orchestration over any scoring backend.
//!
//! Ties the core math to a backend: elicits priors, transforms contexts,
//! sweeps certainty scores, assembles per-sample diagnostics, fits
//! recalibration maps, and persists runs. All backend traffic flows through
//! a content-addressed response cache, so a sample costs `|grid| + 1`
//! scoring calls plus at most two generations, and warm reruns cost
//! nothing.

#![forbid(unsafe_code)]

pub mod cache;
pub mod fit;
pub mod results;
pub mod runner;
pub mod synthcheck;
pub mod synthdata;

pub use cache::{CachedBackend, CallCounts};
pub use runner::{
    run_dataset, run_sample, ContextPayload, GenerationPolicy, PipelineError, RunConfig,
    RunOutcome, SampleFailure, SampleResult,
};

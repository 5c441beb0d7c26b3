//! Core math and data handling for context-certainty obedience evaluation.
//!
//! A model evaluated here receives a question, a retrieved context conveying
//! a definite answer, and an externally supplied certainty score for that
//! context. The ideal response distribution is the certainty-weighted
//! mixture of the model's own prior and the point mass at the context
//! answer; the obedience error is the area under the curve of total
//! variation distance between observed and ideal across a certainty sweep.
//!
//! Module map:
//! - [`prob`] — finite distributions, TVD, ideal mixtures, curve metrics;
//! - [`trace`] — teacher-forced token traces projected onto a shared
//!   deviation-event partition;
//! - [`prompt`] — bit-exact prompt templates for every experiment mode;
//! - [`dataset`] — line-delimited RAQA samples, retrieval filtering,
//!   correctness splits;
//! - [`recal`] — fitting and applying the certainty recalibration map;
//! - [`report`] — aggregation into tables and vector figures.

#![forbid(unsafe_code)]

pub mod dataset;
pub mod prob;
pub mod prompt;
pub mod recal;
pub mod report;
pub mod trace;

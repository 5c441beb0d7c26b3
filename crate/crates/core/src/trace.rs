//! Projection of teacher-forced token traces onto a shared finite partition.
//!
//! A scoring backend reports, per answer token, the probability of the
//! forced token plus a handful of named alternatives; the rest of the
//! vocabulary is an unnamed residual. This module turns such traces into
//! proper distributions over *deviation events*: either the model produces
//! the full answer, or it first departs at step `t` with a named token `v`
//! (`DEVIATE(t, v)`), or it first departs at step `t` with some unnamed
//! token (`DEVIATE-OTHER(t)`). The events are mutually exclusive and
//! exhaustive, so the masses provably sum to 1, and the full-answer mass is
//! the chain-rule product of the stepwise forced probabilities.
//!
//! Distances computed on this partition lower-bound the distance over full
//! answer space: merging outcomes never increases total variation distance.
//! For the bound to be meaningful, traces compared against each other must
//! first be coarsened to a common partition with [`align_steps`], which
//! intersects the named-alternative sets so every named probability is
//! exactly known in every trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::{Distribution, ProbError};

/// Tolerated deviation from unit mass for one step's reported probabilities.
pub const STEP_TOLERANCE: f64 = 1e-6;

/// Outcome label for the event "the model generates the full answer".
pub const FULL_ANSWER: &str = "full-answer";

/// Label for the event "first departure at `step`, with named token `token`".
pub fn deviate_label(step: usize, token: &str) -> String {
    format!("dev:{step}:{token}")
}

/// Label for the event "first departure at `step`, with an unnamed token".
pub fn deviate_other_label(step: usize) -> String {
    format!("dev-other:{step}")
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("forced token `{token}` carries invalid probability {prob}")]
    InvalidForcedProb { token: String, prob: f64 },
    #[error("alternative `{token}` carries invalid probability {prob}")]
    InvalidAlternativeProb { token: String, prob: f64 },
    #[error("residual mass {0} is negative")]
    NegativeResidual(f64),
    #[error("forced token `{0}` also appears among the alternatives")]
    ForcedAmongAlternatives(String),
    #[error("step probabilities sum to {sum}, outside the {STEP_TOLERANCE} tolerance around 1")]
    StepNotNormalized { sum: f64 },
    #[error("trace has {steps} steps for {tokens} answer tokens")]
    StepCountMismatch { steps: usize, tokens: usize },
    #[error("step {step} forces `{step_token}` but the answer token is `{answer_token}`")]
    ForcedTokenMismatch {
        step: usize,
        step_token: String,
        answer_token: String,
    },
    #[error("answer token list is empty")]
    EmptyAnswer,
    #[error("traces force different answers and cannot be aligned")]
    AnswerMismatch,
    #[error("forced probability is 0 at step {step}: the answer is unreachable under `{condition}`")]
    DegenerateTrace { step: usize, condition: String },
    #[error(transparent)]
    Prob(#[from] ProbError),
}

// ---------------------------------------------------------------------------
// TokenStep / ScoredTrace
// ---------------------------------------------------------------------------

/// One teacher-forced generation step.
///
/// The forced probability is carried in log space so chain-rule prefix
/// products stay accurate on long answers; it is exponentiated when the
/// distribution is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    forced_token: String,
    forced_logprob: f64,
    alternatives: BTreeMap<String, f64>,
    residual: f64,
}

impl TokenStep {
    /// Build from a linear forced probability.
    pub fn new(
        forced_token: impl Into<String>,
        forced_prob: f64,
        alternatives: BTreeMap<String, f64>,
        residual: f64,
    ) -> Result<Self, TraceError> {
        let forced_token = forced_token.into();
        if !forced_prob.is_finite() || !(0.0..=1.0 + 1e-12).contains(&forced_prob) {
            return Err(TraceError::InvalidForcedProb {
                token: forced_token,
                prob: forced_prob,
            });
        }
        Self::from_logprob(forced_token, forced_prob.min(1.0).ln(), alternatives, residual)
    }

    /// Build from a log-space forced probability, as reported by scoring
    /// endpoints. `forced_logprob` must be ≤ 0; negative infinity encodes a
    /// forced probability of exactly 0 (a degenerate step).
    pub fn from_logprob(
        forced_token: impl Into<String>,
        forced_logprob: f64,
        alternatives: BTreeMap<String, f64>,
        residual: f64,
    ) -> Result<Self, TraceError> {
        let forced_token = forced_token.into();
        if forced_logprob.is_nan() || forced_logprob > 1e-12 {
            return Err(TraceError::InvalidForcedProb {
                token: forced_token,
                prob: forced_logprob.exp(),
            });
        }
        let forced_logprob = forced_logprob.min(0.0);
        if alternatives.contains_key(&forced_token) {
            return Err(TraceError::ForcedAmongAlternatives(forced_token));
        }
        for (token, &p) in &alternatives {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(TraceError::InvalidAlternativeProb {
                    token: token.clone(),
                    prob: p,
                });
            }
        }
        if residual < 0.0 || !residual.is_finite() {
            return Err(TraceError::NegativeResidual(residual));
        }
        let sum = forced_logprob.exp() + alternatives.values().sum::<f64>() + residual;
        if (sum - 1.0).abs() > STEP_TOLERANCE {
            return Err(TraceError::StepNotNormalized { sum });
        }
        Ok(Self {
            forced_token,
            forced_logprob,
            alternatives,
            residual,
        })
    }

    pub fn forced_token(&self) -> &str {
        &self.forced_token
    }

    pub fn forced_logprob(&self) -> f64 {
        self.forced_logprob
    }

    pub fn forced_prob(&self) -> f64 {
        self.forced_logprob.exp()
    }

    pub fn alternatives(&self) -> &BTreeMap<String, f64> {
        &self.alternatives
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }
}

/// Per-step token probabilities recorded while teacher-forcing one answer
/// under one prompt condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrace {
    answer_tokens: Vec<String>,
    steps: Vec<TokenStep>,
    condition_label: String,
}

impl ScoredTrace {
    pub fn new(
        answer_tokens: Vec<String>,
        steps: Vec<TokenStep>,
        condition_label: impl Into<String>,
    ) -> Result<Self, TraceError> {
        if answer_tokens.is_empty() {
            return Err(TraceError::EmptyAnswer);
        }
        if answer_tokens.len() != steps.len() {
            return Err(TraceError::StepCountMismatch {
                steps: steps.len(),
                tokens: answer_tokens.len(),
            });
        }
        for (i, (token, step)) in answer_tokens.iter().zip(&steps).enumerate() {
            if step.forced_token() != token {
                return Err(TraceError::ForcedTokenMismatch {
                    step: i,
                    step_token: step.forced_token().to_string(),
                    answer_token: token.clone(),
                });
            }
        }
        Ok(Self {
            answer_tokens,
            steps,
            condition_label: condition_label.into(),
        })
    }

    pub fn answer_tokens(&self) -> &[String] {
        &self.answer_tokens
    }

    pub fn steps(&self) -> &[TokenStep] {
        &self.steps
    }

    pub fn condition_label(&self) -> &str {
        &self.condition_label
    }

    pub fn with_condition_label(mut self, label: impl Into<String>) -> Self {
        self.condition_label = label.into();
        self
    }

    /// Chain-rule probability of the full answer under this condition.
    pub fn chain_probability(&self) -> f64 {
        self.steps
            .iter()
            .map(TokenStep::forced_logprob)
            .sum::<f64>()
            .exp()
    }
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

/// Coarsen a set of traces over the same answer to a common partition.
///
/// At every step the named-alternative set becomes the intersection of the
/// named sets across all traces; the mass of any token a trace loses folds
/// into that trace's residual. Intersection (rather than union) keeps every
/// surviving named probability exactly known in every trace, which is what
/// preserves the coarsening lower bound for distances between them.
pub fn align_steps(traces: &[ScoredTrace]) -> Result<Vec<ScoredTrace>, TraceError> {
    if traces.len() <= 1 {
        return Ok(traces.to_vec());
    }
    let answer = traces[0].answer_tokens();
    if traces.iter().any(|t| t.answer_tokens() != answer) {
        return Err(TraceError::AnswerMismatch);
    }
    let n_steps = answer.len();
    let mut shared_names: Vec<Vec<String>> = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let mut names: Vec<String> = traces[0].steps()[step]
            .alternatives()
            .keys()
            .cloned()
            .collect();
        for trace in &traces[1..] {
            let other = trace.steps()[step].alternatives();
            names.retain(|name| other.contains_key(name));
        }
        shared_names.push(names);
    }
    traces
        .iter()
        .map(|trace| {
            let steps = trace
                .steps()
                .iter()
                .zip(&shared_names)
                .map(|(step, keep)| {
                    let mut alternatives = BTreeMap::new();
                    let mut folded = step.residual();
                    for (token, &p) in step.alternatives() {
                        if keep.contains(token) {
                            alternatives.insert(token.clone(), p);
                        } else {
                            folded += p;
                        }
                    }
                    TokenStep::from_logprob(
                        step.forced_token(),
                        step.forced_logprob(),
                        alternatives,
                        folded,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            ScoredTrace::new(
                trace.answer_tokens().to_vec(),
                steps,
                trace.condition_label(),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Prefix distributions
// ---------------------------------------------------------------------------

/// A distribution over the deviation-event partition induced by one answer:
/// the full-answer outcome, one `DEVIATE(t, v)` outcome per step and named
/// token, and one `DEVIATE-OTHER(t)` outcome per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixDistribution {
    dist: Distribution,
}

impl PrefixDistribution {
    pub fn distribution(&self) -> &Distribution {
        &self.dist
    }

    pub fn into_distribution(self) -> Distribution {
        self.dist
    }

    pub fn full_answer_mass(&self) -> f64 {
        self.dist.mass_of(FULL_ANSWER).unwrap_or(0.0)
    }

    /// The point mass at the full answer, on this distribution's partition.
    pub fn point_mass_like(&self) -> Result<PrefixDistribution, TraceError> {
        let dist = Distribution::point_mass(self.dist.outcomes_arc(), FULL_ANSWER)?;
        Ok(PrefixDistribution { dist })
    }
}

/// Build the deviation-event distribution of one trace via the chain rule.
///
/// The trace must already be step-aligned with every trace it will be
/// compared against; aligned traces produce identical outcome lists. A
/// forced probability of 0 at any step makes the proxy undefined (the
/// answer is unreachable under this condition) and is reported as a
/// degenerate-trace error rather than papered over.
pub fn build_prefix_distribution(trace: &ScoredTrace) -> Result<PrefixDistribution, TraceError> {
    for (step_index, step) in trace.steps().iter().enumerate() {
        if step.forced_prob() == 0.0 {
            return Err(TraceError::DegenerateTrace {
                step: step_index,
                condition: trace.condition_label().to_string(),
            });
        }
    }
    let mut outcomes = Vec::new();
    let mut mass = Vec::new();
    outcomes.push(FULL_ANSWER.to_string());
    mass.push(trace.chain_probability());
    let mut prefix_logprob = 0.0_f64;
    for (step_index, step) in trace.steps().iter().enumerate() {
        let prefix = prefix_logprob.exp();
        for (token, &p) in step.alternatives() {
            outcomes.push(deviate_label(step_index, token));
            mass.push(prefix * p);
        }
        outcomes.push(deviate_other_label(step_index));
        mass.push(prefix * step.residual());
        prefix_logprob += step.forced_logprob();
    }
    let dist = Distribution::new(outcomes, mass)?;
    Ok(PrefixDistribution { dist })
}

/// The degenerate distribution concentrated on the full answer, over the
/// minimal partition induced by the answer alone (no named alternatives).
pub fn point_mass_answer(answer_tokens: &[String]) -> Result<PrefixDistribution, TraceError> {
    if answer_tokens.is_empty() {
        return Err(TraceError::EmptyAnswer);
    }
    let mut outcomes = Vec::with_capacity(answer_tokens.len() + 1);
    let mut mass = Vec::with_capacity(answer_tokens.len() + 1);
    outcomes.push(FULL_ANSWER.to_string());
    mass.push(1.0);
    for step in 0..answer_tokens.len() {
        outcomes.push(deviate_other_label(step));
        mass.push(0.0);
    }
    let dist = Distribution::new(outcomes, mass)?;
    Ok(PrefixDistribution { dist })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::tvd;

    fn alts(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(t, p)| (t.to_string(), *p)).collect()
    }

    fn trace(label: &str, steps: Vec<TokenStep>) -> ScoredTrace {
        let tokens = steps.iter().map(|s| s.forced_token().to_string()).collect();
        ScoredTrace::new(tokens, steps, label).unwrap()
    }

    #[test]
    fn step_validation() {
        assert!(TokenStep::new("a", 0.8, alts(&[("b", 0.2)]), 0.0).is_ok());
        assert!(matches!(
            TokenStep::new("a", 0.8, alts(&[("a", 0.2)]), 0.0),
            Err(TraceError::ForcedAmongAlternatives(_))
        ));
        assert!(matches!(
            TokenStep::new("a", 0.8, alts(&[("b", 0.1)]), 0.0),
            Err(TraceError::StepNotNormalized { .. })
        ));
        assert!(matches!(
            TokenStep::new("a", 0.8, alts(&[]), -0.1),
            Err(TraceError::NegativeResidual(_))
        ));
        assert!(matches!(
            TokenStep::new("a", 1.4, alts(&[]), 0.0),
            Err(TraceError::InvalidForcedProb { .. })
        ));
    }

    #[test]
    fn trace_validation() {
        let step = TokenStep::new("a", 1.0, alts(&[]), 0.0).unwrap();
        assert!(matches!(
            ScoredTrace::new(vec![], vec![], "x"),
            Err(TraceError::EmptyAnswer)
        ));
        assert!(matches!(
            ScoredTrace::new(vec!["b".into()], vec![step.clone()], "x"),
            Err(TraceError::ForcedTokenMismatch { .. })
        ));
        assert!(matches!(
            ScoredTrace::new(vec!["a".into(), "b".into()], vec![step], "x"),
            Err(TraceError::StepCountMismatch { .. })
        ));
    }

    #[test]
    fn single_step_certain_answer() {
        let t = trace("c=1", vec![TokenStep::new("a", 1.0, alts(&[]), 0.0).unwrap()]);
        let d = build_prefix_distribution(&t).unwrap();
        assert_eq!(d.full_answer_mass(), 1.0);
    }

    #[test]
    fn two_step_chain_rule_by_hand() {
        // forced probs (0.5, 0.8), step residuals (0.5, 0.2):
        // FULL = 0.4, DEVIATE-OTHER(step 0) = 0.5, DEVIATE-OTHER(step 1) = 0.1.
        let t = trace(
            "c=0.4",
            vec![
                TokenStep::new("par", 0.5, alts(&[]), 0.5).unwrap(),
                TokenStep::new("is", 0.8, alts(&[]), 0.2).unwrap(),
            ],
        );
        let d = build_prefix_distribution(&t).unwrap();
        assert!((d.full_answer_mass() - 0.4).abs() < 1e-12);
        assert!(
            (d.distribution().mass_of(&deviate_other_label(0)).unwrap() - 0.5).abs() < 1e-12
        );
        assert!(
            (d.distribution().mass_of(&deviate_other_label(1)).unwrap() - 0.1).abs() < 1e-12
        );
        let total: f64 = d.distribution().masses().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_mass_tvd_is_one_minus_full_answer_mass() {
        let q = trace(
            "q",
            vec![
                TokenStep::new("par", 0.5, alts(&[("lon", 0.3)]), 0.2).unwrap(),
                TokenStep::new("is", 0.8, alts(&[]), 0.2).unwrap(),
            ],
        );
        let qd = build_prefix_distribution(&q).unwrap();
        let point = qd.point_mass_like().unwrap();
        let d = tvd(point.distribution(), qd.distribution()).unwrap();
        assert!((d - (1.0 - qd.full_answer_mass())).abs() < 1e-12);
    }

    #[test]
    fn point_mass_against_uniform_partition() {
        let point = point_mass_answer(&["a".into(), "b".into(), "c".into()]).unwrap();
        let uniform = Distribution::with_outcomes(
            point.distribution().outcomes_arc(),
            vec![0.25, 0.25, 0.25, 0.25],
        )
        .unwrap();
        assert!((tvd(point.distribution(), &uniform).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(
            tvd(point.distribution(), point.distribution()).unwrap(),
            0.0
        );
    }

    #[test]
    fn degenerate_forced_prob_is_an_error() {
        let t = trace(
            "c=0",
            vec![TokenStep::new("a", 0.0, alts(&[("b", 1.0)]), 0.0).unwrap()],
        );
        assert!(matches!(
            build_prefix_distribution(&t),
            Err(TraceError::DegenerateTrace { step: 0, .. })
        ));
    }

    #[test]
    fn alignment_intersects_named_sets() {
        // A names {x, y}, B names {x}: the aligned set is {x} and A's mass
        // for y moves into A's residual.
        let a = trace(
            "a",
            vec![TokenStep::new("t", 0.5, alts(&[("x", 0.3), ("y", 0.1)]), 0.1).unwrap()],
        );
        let b = trace(
            "b",
            vec![TokenStep::new("t", 0.6, alts(&[("x", 0.4)]), 0.0).unwrap()],
        );
        let aligned = align_steps(&[a, b]).unwrap();
        let a_step = &aligned[0].steps()[0];
        assert_eq!(a_step.alternatives(), &alts(&[("x", 0.3)]));
        assert!((a_step.residual() - 0.2).abs() < 1e-12);
        let b_step = &aligned[1].steps()[0];
        assert_eq!(b_step.alternatives(), &alts(&[("x", 0.4)]));
        let sum =
            a_step.forced_prob() + a_step.alternatives().values().sum::<f64>() + a_step.residual();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn alignment_identity_cases() {
        let a = trace(
            "a",
            vec![TokenStep::new("t", 0.5, alts(&[("x", 0.5)]), 0.0).unwrap()],
        );
        let b = trace(
            "b",
            vec![TokenStep::new("t", 0.2, alts(&[("x", 0.8)]), 0.0).unwrap()],
        );
        let aligned = align_steps(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(aligned, vec![a.clone(), b]);
        let single = align_steps(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single, vec![a]);
    }

    #[test]
    fn alignment_rejects_answer_mismatch() {
        let a = trace("a", vec![TokenStep::new("t", 1.0, alts(&[]), 0.0).unwrap()]);
        let b = trace("b", vec![TokenStep::new("u", 1.0, alts(&[]), 0.0).unwrap()]);
        assert!(matches!(
            align_steps(&[a, b]),
            Err(TraceError::AnswerMismatch)
        ));
    }

    #[test]
    fn aligned_traces_share_outcome_lists() {
        let a = trace(
            "a",
            vec![
                TokenStep::new("t", 0.5, alts(&[("x", 0.3), ("y", 0.1)]), 0.1).unwrap(),
                TokenStep::new("u", 0.9, alts(&[("z", 0.1)]), 0.0).unwrap(),
            ],
        );
        let b = trace(
            "b",
            vec![
                TokenStep::new("t", 0.6, alts(&[("x", 0.4)]), 0.0).unwrap(),
                TokenStep::new("u", 0.7, alts(&[("z", 0.2)]), 0.1).unwrap(),
            ],
        );
        let aligned = align_steps(&[a, b]).unwrap();
        let da = build_prefix_distribution(&aligned[0]).unwrap();
        let db = build_prefix_distribution(&aligned[1]).unwrap();
        assert_eq!(da.distribution().outcomes(), db.distribution().outcomes());
        assert!(tvd(da.distribution(), db.distribution()).is_ok());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// A step with random named alternatives whose masses, together with
        /// the forced probability, leave a non-negative residual.
        fn arb_step(token: &'static str) -> impl Strategy<Value = TokenStep> {
            (
                1e-6_f64..1.0,
                proptest::collection::btree_map("[a-d]", 0.0_f64..1.0, 0..3),
            )
                .prop_map(move |(forced, raw_alts)| {
                    let mut scale: f64 = forced;
                    for v in raw_alts.values() {
                        scale += v;
                    }
                    // Scale everything into (0, 0.9] so a residual remains.
                    let shrink = 0.9 / scale.max(0.9);
                    let forced = forced * shrink;
                    let alternatives: BTreeMap<String, f64> = raw_alts
                        .into_iter()
                        .filter(|(t, _)| t != token)
                        .map(|(t, v)| (t, v * shrink))
                        .collect();
                    let residual = 1.0 - forced - alternatives.values().sum::<f64>();
                    TokenStep::new(token, forced, alternatives, residual).unwrap()
                })
        }

        fn arb_trace(len: usize) -> impl Strategy<Value = ScoredTrace> {
            proptest::collection::vec(arb_step("tok"), len..=len).prop_map(|steps| {
                let steps: Vec<TokenStep> = steps;
                let tokens: Vec<String> =
                    steps.iter().map(|s| s.forced_token().to_string()).collect();
                ScoredTrace::new(tokens, steps, "fuzz").unwrap()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(300))]

            #[test]
            fn prefix_distribution_normalizes(t in (1usize..8).prop_flat_map(arb_trace)) {
                let d = build_prefix_distribution(&t).unwrap();
                let total: f64 = d.distribution().masses().iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                let product = t.chain_probability();
                prop_assert!((d.full_answer_mass() - product).abs() <= product * 1e-9);
            }

            #[test]
            fn alignment_is_idempotent(
                a in arb_trace(3),
                b in arb_trace(3),
            ) {
                let once = align_steps(&[a, b]).unwrap();
                let twice = align_steps(&once).unwrap();
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn coarsening_never_increases_tvd(
                a in arb_trace(2),
                b in arb_trace(2),
            ) {
                let aligned = align_steps(&[a, b]).unwrap();
                let fine_a = build_prefix_distribution(&aligned[0]).unwrap();
                let fine_b = build_prefix_distribution(&aligned[1]).unwrap();
                let fine = tvd(fine_a.distribution(), fine_b.distribution()).unwrap();

                // Merge every step's named alternatives into its residual:
                // a strictly coarser partition of the same traces.
                let coarse: Vec<ScoredTrace> = aligned
                    .iter()
                    .map(|t| {
                        let steps = t
                            .steps()
                            .iter()
                            .map(|s| {
                                let folded =
                                    s.residual() + s.alternatives().values().sum::<f64>();
                                TokenStep::from_logprob(
                                    s.forced_token(),
                                    s.forced_logprob(),
                                    BTreeMap::new(),
                                    folded,
                                )
                                .unwrap()
                            })
                            .collect();
                        ScoredTrace::new(t.answer_tokens().to_vec(), steps, t.condition_label())
                            .unwrap()
                    })
                    .collect();
                let coarse_a = build_prefix_distribution(&coarse[0]).unwrap();
                let coarse_b = build_prefix_distribution(&coarse[1]).unwrap();
                let coarser = tvd(coarse_a.distribution(), coarse_b.distribution()).unwrap();
                prop_assert!(coarser <= fine + 1e-12);
            }
        }
    }
}

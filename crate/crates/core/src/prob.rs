//! Exact arithmetic over finite probability distributions.
//!
//! Everything downstream of the scoring backends reduces to four operations
//! on finite distributions that share an outcome space:
//!
//! - [`tvd`] — total variation distance, half the L1 distance between mass
//!   functions;
//! - [`ideal_mixture`] — the reference behavior `(1 - c) * prior + c * point`
//!   for a context expressed with certainty `c`;
//! - [`diagnostic_point`] — the three per-certainty diagnostics (similarity
//!   to context, similarity to prior, deviation from ideal);
//! - [`obedience_error`] — trapezoidal area under a deviation curve over a
//!   certainty sweep, the scalar that summarizes a whole sweep.
//!
//! All operations are pure functions over immutable values and are safe to
//! call from any number of workers without coordination.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum tolerated deviation from unit mass on construction. Inputs
/// further away are rejected rather than silently fixed.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Errors raised by distribution construction and the metric operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbError {
    #[error("distribution has no outcomes")]
    Empty,
    #[error("outcome and mass lists differ in length ({outcomes} vs {masses})")]
    LengthMismatch { outcomes: usize, masses: usize },
    #[error("duplicate outcome identifier `{0}`")]
    DuplicateOutcome(String),
    #[error("outcome `{outcome}` carries invalid mass {mass}")]
    InvalidMass { outcome: String, mass: f64 },
    #[error("masses sum to {sum}, outside the {NORMALIZATION_TOLERANCE} tolerance around 1")]
    NotNormalized { sum: f64 },
    #[error("distributions are defined over different outcome spaces")]
    OutcomeMismatch,
    #[error("expected a point mass but the largest outcome mass is {max_mass}")]
    NotPointMass { max_mass: f64 },
    #[error("certainty {0} outside [0, 1]")]
    InvalidCertainty(f64),
    #[error("invalid certainty sweep: {0}")]
    InvalidSweep(String),
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
}

// ---------------------------------------------------------------------------
// Distribution
// ---------------------------------------------------------------------------

/// A normalized probability distribution over an ordered list of opaque
/// outcome identifiers.
///
/// Invariants enforced at construction:
/// - outcome identifiers are unique and the list is non-empty;
/// - every mass is finite and non-negative;
/// - masses sum to 1 within [`NORMALIZATION_TOLERANCE`], after which they are
///   renormalized so the stored sum is 1 up to f64 round-off.
///
/// The outcome list is shared behind an [`Arc`] so distributions built over
/// the same partition compare cheaply in [`tvd`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    outcomes: Arc<Vec<String>>,
    mass: Vec<f64>,
}

impl Distribution {
    pub fn new(outcomes: Vec<String>, mass: Vec<f64>) -> Result<Self, ProbError> {
        Self::with_outcomes(Arc::new(outcomes), mass)
    }

    /// Build over an existing shared outcome list.
    pub fn with_outcomes(outcomes: Arc<Vec<String>>, mass: Vec<f64>) -> Result<Self, ProbError> {
        if outcomes.is_empty() {
            return Err(ProbError::Empty);
        }
        if outcomes.len() != mass.len() {
            return Err(ProbError::LengthMismatch {
                outcomes: outcomes.len(),
                masses: mass.len(),
            });
        }
        let mut seen = HashSet::with_capacity(outcomes.len());
        for outcome in outcomes.iter() {
            if !seen.insert(outcome.as_str()) {
                return Err(ProbError::DuplicateOutcome(outcome.clone()));
            }
        }
        for (outcome, &m) in outcomes.iter().zip(&mass) {
            if !m.is_finite() || m < 0.0 {
                return Err(ProbError::InvalidMass {
                    outcome: outcome.clone(),
                    mass: m,
                });
            }
        }
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(ProbError::NotNormalized { sum });
        }
        let mut mass = mass;
        // Renormalize, but leave vectors already summing to 1 within f64
        // round-off untouched: construction must be idempotent so that
        // re-wrapping a stored mass vector reproduces it bitwise.
        if (sum - 1.0).abs() > 1e-12 {
            for m in &mut mass {
                *m /= sum;
            }
            let heaviest = mass
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            for _ in 0..8 {
                let s: f64 = mass.iter().sum();
                if s == 1.0 {
                    break;
                }
                mass[heaviest] += 1.0 - s;
            }
        }
        Ok(Self { outcomes, mass })
    }

    /// Degenerate distribution with all mass on `at`.
    pub fn point_mass(outcomes: Arc<Vec<String>>, at: &str) -> Result<Self, ProbError> {
        let index = outcomes
            .iter()
            .position(|o| o == at)
            .ok_or(ProbError::OutcomeMismatch)?;
        let mut mass = vec![0.0; outcomes.len()];
        mass[index] = 1.0;
        Self::with_outcomes(outcomes, mass)
    }

    pub fn outcomes(&self) -> &[String] {
        &self.outcomes
    }

    pub fn outcomes_arc(&self) -> Arc<Vec<String>> {
        Arc::clone(&self.outcomes)
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn mass_of(&self, outcome: &str) -> Option<f64> {
        self.outcomes
            .iter()
            .position(|o| o == outcome)
            .map(|i| self.mass[i])
    }

    /// True when one outcome carries (essentially) all the mass.
    pub fn is_point_mass(&self) -> bool {
        self.mass.iter().any(|&m| m >= 1.0 - 1e-12)
    }

    /// True when `self` and `other` are defined over the identical outcome
    /// list: same identifiers, same order.
    pub fn same_outcome_space(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.outcomes, &other.outcomes) || self.outcomes == other.outcomes
    }
}

// ---------------------------------------------------------------------------
// Certainty and sweeps
// ---------------------------------------------------------------------------

/// A context-certainty score in [0, 1], displayed as an integer percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Certainty(f64);

impl Certainty {
    pub const ZERO: Certainty = Certainty(0.0);
    pub const ONE: Certainty = Certainty(1.0);

    pub fn new(value: f64) -> Result<Self, ProbError> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(ProbError::InvalidCertainty(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The integer-percent reading of this certainty, when it has one.
    pub fn percent(self) -> Option<u32> {
        let scaled = self.0 * 100.0;
        let rounded = scaled.round();
        if (scaled - rounded).abs() < 1e-9 {
            Some(rounded as u32)
        } else {
            None
        }
    }

    pub fn approx_eq(self, other: Certainty) -> bool {
        (self.0 - other.0).abs() < 1e-9
    }
}

impl fmt::Display for Certainty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.percent() {
            Some(p) => write!(f, "{p}%"),
            None => write!(f, "{}%", self.0 * 100.0),
        }
    }
}

/// The fixed grid of certainty scores a sample is evaluated at.
///
/// The grid must start at 0, end at 1, and be strictly increasing. The
/// default is the six-point sweep 0%, 20%, 40%, 60%, 80%, 100%.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintySweep {
    points: Vec<Certainty>,
}

impl CertaintySweep {
    pub fn new(points: Vec<Certainty>) -> Result<Self, ProbError> {
        if points.len() < 2 {
            return Err(ProbError::InvalidSweep(format!(
                "need at least 2 grid points, got {}",
                points.len()
            )));
        }
        if points[0].value() != 0.0 {
            return Err(ProbError::InvalidSweep(format!(
                "grid must start at 0, starts at {}",
                points[0].value()
            )));
        }
        if points[points.len() - 1].value() != 1.0 {
            return Err(ProbError::InvalidSweep(format!(
                "grid must end at 1, ends at {}",
                points[points.len() - 1].value()
            )));
        }
        for pair in points.windows(2) {
            if pair[1].value() <= pair[0].value() {
                return Err(ProbError::InvalidSweep(format!(
                    "grid must be strictly increasing, saw {} then {}",
                    pair[0].value(),
                    pair[1].value()
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn from_values(values: &[f64]) -> Result<Self, ProbError> {
        let points = values
            .iter()
            .map(|&v| Certainty::new(v))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(points)
    }

    pub fn points(&self) -> &[Certainty] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index_of(&self, c: Certainty) -> Option<usize> {
        self.points.iter().position(|p| p.approx_eq(c))
    }
}

impl Default for CertaintySweep {
    fn default() -> Self {
        Self::from_values(&[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).expect("default sweep is valid")
    }
}

// ---------------------------------------------------------------------------
// Metric operations
// ---------------------------------------------------------------------------

/// Total variation distance: half the L1 distance between the mass functions.
///
/// Requires the two distributions to share the identical outcome list; a
/// caller holding traces over different partitions must coarsen them into a
/// common partition first (see the trace module).
pub fn tvd(p: &Distribution, q: &Distribution) -> Result<f64, ProbError> {
    if !p.same_outcome_space(q) {
        return Err(ProbError::OutcomeMismatch);
    }
    let l1: f64 = p
        .mass
        .iter()
        .zip(&q.mass)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok((l1 / 2.0).clamp(0.0, 1.0))
}

/// The ideal certainty-obedient response: `(1 - c) * prior + c * point`.
///
/// `context_point` must be a point mass — the degenerate distribution of a
/// definite context answer.
pub fn ideal_mixture(
    prior: &Distribution,
    context_point: &Distribution,
    c: Certainty,
) -> Result<Distribution, ProbError> {
    if !prior.same_outcome_space(context_point) {
        return Err(ProbError::OutcomeMismatch);
    }
    if !context_point.is_point_mass() {
        let max_mass = context_point
            .mass
            .iter()
            .fold(0.0_f64, |acc, &m| acc.max(m));
        return Err(ProbError::NotPointMass { max_mass });
    }
    let w = c.value();
    let mass = prior
        .mass
        .iter()
        .zip(&context_point.mass)
        .map(|(p, d)| (1.0 - w) * p + w * d)
        .collect();
    Distribution::with_outcomes(prior.outcomes_arc(), mass)
}

/// Area under a deviation curve over the certainty interval [0, 1], by the
/// trapezoidal rule on the curve's own grid. Exact for piecewise-linear
/// curves, which is all a finite sweep can ever witness.
pub fn obedience_error(curve: &[(Certainty, f64)]) -> Result<f64, ProbError> {
    if curve.len() < 2 {
        return Err(ProbError::InvalidCurve(format!(
            "need at least 2 points, got {}",
            curve.len()
        )));
    }
    if curve[0].0.value() != 0.0 || curve[curve.len() - 1].0.value() != 1.0 {
        return Err(ProbError::InvalidCurve(
            "curve grid must span [0, 1]".to_string(),
        ));
    }
    for pair in curve.windows(2) {
        if pair[1].0.value() <= pair[0].0.value() {
            return Err(ProbError::InvalidCurve(
                "curve grid must be strictly increasing".to_string(),
            ));
        }
    }
    for &(c, v) in curve {
        if !v.is_finite() || !(-1e-12..=1.0 + 1e-12).contains(&v) {
            return Err(ProbError::InvalidCurve(format!(
                "value {v} at certainty {} outside [0, 1]",
                c.value()
            )));
        }
    }
    let area: f64 = curve
        .windows(2)
        .map(|w| {
            let (x0, y0) = (w[0].0.value(), w[0].1);
            let (x1, y1) = (w[1].0.value(), w[1].1);
            (x1 - x0) * (y0 + y1) / 2.0
        })
        .sum();
    Ok(area.clamp(0.0, 1.0))
}

/// The three diagnostics at one certainty grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticPoint {
    /// `1 - tvd(observed, context point mass)`.
    pub sim_to_context: f64,
    /// `1 - tvd(observed, prior)`.
    pub sim_to_prior: f64,
    /// `tvd(observed, ideal mixture at c)`.
    pub deviation: f64,
}

/// Evaluate the diagnostics of an observed distribution against the prior
/// and the context point mass at certainty `c`.
pub fn diagnostic_point(
    observed: &Distribution,
    prior: &Distribution,
    context_point: &Distribution,
    c: Certainty,
) -> Result<DiagnosticPoint, ProbError> {
    let sim_to_context = 1.0 - tvd(observed, context_point)?;
    let sim_to_prior = 1.0 - tvd(observed, prior)?;
    let ideal = ideal_mixture(prior, context_point, c)?;
    let deviation = tvd(observed, &ideal)?;
    Ok(DiagnosticPoint {
        sim_to_context,
        sim_to_prior,
        deviation,
    })
}

// ---------------------------------------------------------------------------
// ObedienceRecord
// ---------------------------------------------------------------------------

/// Per-sample diagnostic curves over a sweep, plus the obedience error
/// scalar (trapezoidal area under the deviation curve).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObedienceRecord {
    pub sweep: CertaintySweep,
    pub sim_to_context: Vec<f64>,
    pub sim_to_prior: Vec<f64>,
    pub deviation: Vec<f64>,
    pub epsilon_obey: f64,
}

impl ObedienceRecord {
    pub fn new(
        sweep: CertaintySweep,
        sim_to_context: Vec<f64>,
        sim_to_prior: Vec<f64>,
        deviation: Vec<f64>,
    ) -> Result<Self, ProbError> {
        let n = sweep.len();
        for (name, curve) in [
            ("sim_to_context", &sim_to_context),
            ("sim_to_prior", &sim_to_prior),
            ("deviation", &deviation),
        ] {
            if curve.len() != n {
                return Err(ProbError::InvalidCurve(format!(
                    "{name} has {} values for a {n}-point sweep",
                    curve.len()
                )));
            }
            for &v in curve.iter() {
                if !v.is_finite() || !(-1e-12..=1.0 + 1e-12).contains(&v) {
                    return Err(ProbError::InvalidCurve(format!(
                        "{name} value {v} outside [0, 1]"
                    )));
                }
            }
        }
        let curve: Vec<(Certainty, f64)> = sweep
            .points()
            .iter()
            .copied()
            .zip(deviation.iter().copied())
            .collect();
        let epsilon_obey = obedience_error(&curve)?;
        Ok(Self {
            sweep,
            sim_to_context,
            sim_to_prior,
            deviation,
            epsilon_obey,
        })
    }

    pub fn from_points(
        sweep: CertaintySweep,
        points: &[DiagnosticPoint],
    ) -> Result<Self, ProbError> {
        Self::new(
            sweep,
            points.iter().map(|p| p.sim_to_context).collect(),
            points.iter().map(|p| p.sim_to_prior).collect(),
            points.iter().map(|p| p.deviation).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(mass: &[f64]) -> Distribution {
        let outcomes = (0..mass.len()).map(|i| format!("o{i}")).collect();
        Distribution::new(outcomes, mass.to_vec()).unwrap()
    }

    fn shared(mass: &[f64], like: &Distribution) -> Distribution {
        Distribution::with_outcomes(like.outcomes_arc(), mass.to_vec()).unwrap()
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(matches!(
            Distribution::new(vec![], vec![]),
            Err(ProbError::Empty)
        ));
        assert!(matches!(
            Distribution::new(vec!["a".into()], vec![0.5, 0.5]),
            Err(ProbError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Distribution::new(vec!["a".into(), "a".into()], vec![0.5, 0.5]),
            Err(ProbError::DuplicateOutcome(_))
        ));
        assert!(matches!(
            Distribution::new(vec!["a".into(), "b".into()], vec![1.2, -0.2]),
            Err(ProbError::InvalidMass { .. })
        ));
        assert!(matches!(
            Distribution::new(vec!["a".into(), "b".into()], vec![0.6, 0.6]),
            Err(ProbError::NotNormalized { .. })
        ));
    }

    #[test]
    fn construction_renormalizes_within_tolerance() {
        let d = dist(&[0.5000004, 0.4999999]);
        let sum: f64 = d.masses().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn construction_is_idempotent() {
        let d = dist(&[0.5000004, 0.4999999]);
        let again = Distribution::with_outcomes(d.outcomes_arc(), d.masses().to_vec()).unwrap();
        assert_eq!(d.masses(), again.masses());
    }

    #[test]
    fn tvd_identity_case() {
        let p = dist(&[0.5, 0.5]);
        let q = shared(&[0.5, 0.5], &p);
        assert_eq!(tvd(&p, &q).unwrap(), 0.0);
    }

    #[test]
    fn tvd_disjoint_point_masses() {
        let p = dist(&[1.0, 0.0]);
        let q = shared(&[0.0, 1.0], &p);
        assert_eq!(tvd(&p, &q).unwrap(), 1.0);
    }

    #[test]
    fn tvd_direct_evaluation() {
        // 0.5 * (|0.6| + |-0.6|) = 0.6
        let p = dist(&[0.8, 0.2]);
        let q = shared(&[0.2, 0.8], &p);
        assert!((tvd(&p, &q).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn tvd_rejects_mismatched_spaces() {
        let p = dist(&[0.5, 0.5]);
        let q = Distribution::new(vec!["x".into(), "y".into()], vec![0.5, 0.5]).unwrap();
        assert!(matches!(tvd(&p, &q), Err(ProbError::OutcomeMismatch)));
    }

    #[test]
    fn mixture_endpoints() {
        let prior = dist(&[0.8, 0.2]);
        let point = shared(&[0.0, 1.0], &prior);
        let at_zero = ideal_mixture(&prior, &point, Certainty::ZERO).unwrap();
        let at_one = ideal_mixture(&prior, &point, Certainty::ONE).unwrap();
        assert_eq!(tvd(&at_zero, &prior).unwrap(), 0.0);
        assert_eq!(tvd(&at_one, &point).unwrap(), 0.0);
    }

    #[test]
    fn mixture_hand_evaluation() {
        let prior = dist(&[0.8, 0.2]);
        let point = shared(&[0.0, 1.0], &prior);
        let mixed = ideal_mixture(&prior, &point, Certainty::new(0.5).unwrap()).unwrap();
        assert!((mixed.masses()[0] - 0.4).abs() < 1e-15);
        assert!((mixed.masses()[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn mixture_rejects_non_point_mass() {
        let prior = dist(&[0.8, 0.2]);
        let not_point = shared(&[0.5, 0.5], &prior);
        assert!(matches!(
            ideal_mixture(&prior, &not_point, Certainty::ZERO),
            Err(ProbError::NotPointMass { .. })
        ));
    }

    fn curve_on_default(values: &[f64]) -> Vec<(Certainty, f64)> {
        CertaintySweep::default()
            .points()
            .iter()
            .copied()
            .zip(values.iter().copied())
            .collect()
    }

    #[test]
    fn obedience_error_constant_curves() {
        assert_eq!(
            obedience_error(&curve_on_default(&[0.0; 6])).unwrap(),
            0.0
        );
        assert!((obedience_error(&curve_on_default(&[1.0; 6])).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn obedience_error_hand_trapezoid() {
        // Trapezoid rule by hand over the six-point grid. The continuum value
        // of the generating curve 0.8 * c * (1 - c) is 2/15.
        let curve = curve_on_default(&[0.0, 0.128, 0.192, 0.192, 0.128, 0.0]);
        assert!((obedience_error(&curve).unwrap() - 0.128).abs() < 1e-15);
    }

    #[test]
    fn obedience_error_rejects_partial_grid() {
        let half = vec![
            (Certainty::ZERO, 0.0),
            (Certainty::new(0.5).unwrap(), 0.0),
        ];
        assert!(matches!(
            obedience_error(&half),
            Err(ProbError::InvalidCurve(_))
        ));
    }

    #[test]
    fn diagnostic_point_trivial_endpoints() {
        let prior = dist(&[0.8, 0.2]);
        let point = shared(&[0.0, 1.0], &prior);
        let at_zero = diagnostic_point(&prior, &prior, &point, Certainty::ZERO).unwrap();
        assert_eq!(at_zero.deviation, 0.0);
        let at_one = diagnostic_point(&point, &prior, &point, Certainty::ONE).unwrap();
        assert_eq!(at_one.deviation, 0.0);
        assert_eq!(at_one.sim_to_context, 1.0);
    }

    #[test]
    fn diagnostic_point_mixture_observed() {
        // observed equals the ideal mixture at c = 0.5, so deviation is 0 and
        // both similarities land at 0.6.
        let prior = dist(&[0.8, 0.2]);
        let point = shared(&[0.0, 1.0], &prior);
        let observed = shared(&[0.4, 0.6], &prior);
        let d = diagnostic_point(&observed, &prior, &point, Certainty::new(0.5).unwrap()).unwrap();
        assert!(d.deviation.abs() < 1e-15);
        assert!((d.sim_to_context - 0.6).abs() < 1e-15);
        assert!((d.sim_to_prior - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sweep_validation() {
        assert!(CertaintySweep::from_values(&[0.0, 1.0]).is_ok());
        assert!(CertaintySweep::from_values(&[0.1, 1.0]).is_err());
        assert!(CertaintySweep::from_values(&[0.0, 0.9]).is_err());
        assert!(CertaintySweep::from_values(&[0.0, 0.5, 0.5, 1.0]).is_err());
        let grid = CertaintySweep::default();
        assert_eq!(grid.len(), 6);
        assert_eq!(grid.points()[1].percent(), Some(20));
    }

    #[test]
    fn certainty_percent_reading() {
        assert_eq!(Certainty::new(0.4).unwrap().percent(), Some(40));
        assert_eq!(Certainty::new(1.0).unwrap().percent(), Some(100));
        assert_eq!(Certainty::new(0.1234).unwrap().percent(), None);
        assert_eq!(Certainty::new(0.4).unwrap().to_string(), "40%");
        assert!(Certainty::new(1.2).is_err());
        assert!(Certainty::new(-0.1).is_err());
    }

    #[test]
    fn record_computes_epsilon() {
        let sweep = CertaintySweep::default();
        let record = ObedienceRecord::new(
            sweep,
            vec![0.2, 0.3, 0.4, 0.5, 0.6, 1.0],
            vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.2],
            vec![0.0, 0.128, 0.192, 0.192, 0.128, 0.0],
        )
        .unwrap();
        assert!((record.epsilon_obey - 0.128).abs() < 1e-15);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_mass(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0_f64..1.0, n).prop_map(|v| {
                let sum: f64 = v.iter().sum();
                if sum == 0.0 {
                    let mut out = vec![0.0; v.len()];
                    out[0] = 1.0;
                    out
                } else {
                    v.into_iter().map(|m| m / sum).collect()
                }
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn metric_axioms(
                p_mass in arb_mass(5),
                q_mass in arb_mass(5),
                r_mass in arb_mass(5),
            ) {
                let p = dist(&p_mass);
                let q = shared(&q_mass, &p);
                let r = shared(&r_mass, &p);
                let pq = tvd(&p, &q).unwrap();
                let qp = tvd(&q, &p).unwrap();
                let pp = tvd(&p, &p).unwrap();
                let pr = tvd(&p, &r).unwrap();
                let rq = tvd(&r, &q).unwrap();
                prop_assert!((0.0..=1.0).contains(&pq));
                prop_assert!((pq - qp).abs() < 1e-12);
                prop_assert!(pp == 0.0);
                prop_assert!(pq <= pr + rq + 1e-12);
            }

            #[test]
            fn mixture_endpoints_exact(p_mass in arb_mass(4), at in 0usize..4) {
                let prior = dist(&p_mass);
                let outcome = prior.outcomes()[at].clone();
                let point = Distribution::point_mass(prior.outcomes_arc(), &outcome).unwrap();
                let zero = ideal_mixture(&prior, &point, Certainty::ZERO).unwrap();
                let one = ideal_mixture(&prior, &point, Certainty::ONE).unwrap();
                prop_assert!(tvd(&zero, &prior).unwrap() == 0.0);
                prop_assert!(tvd(&one, &point).unwrap() == 0.0);
            }

            #[test]
            fn integration_commutes_with_averaging(
                curves in proptest::collection::vec(
                    proptest::collection::vec(0.0_f64..=1.0, 6), 1..20),
            ) {
                let sweep = CertaintySweep::default();
                let n = curves.len() as f64;
                let mean_of_areas = curves
                    .iter()
                    .map(|c| {
                        let pts: Vec<_> = sweep.points().iter().copied().zip(c.iter().copied()).collect();
                        obedience_error(&pts).unwrap()
                    })
                    .sum::<f64>()
                    / n;
                let mean_curve: Vec<f64> = (0..6)
                    .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / n)
                    .collect();
                let pts: Vec<_> = sweep.points().iter().copied().zip(mean_curve).collect();
                let area_of_mean = obedience_error(&pts).unwrap();
                prop_assert!((mean_of_areas - area_of_mean).abs() < 1e-12);
            }

            #[test]
            fn observed_equal_to_ideal_gives_zero_epsilon(
                p_mass in arb_mass(4),
                at in 0usize..4,
            ) {
                let sweep = CertaintySweep::default();
                let prior = dist(&p_mass);
                let outcome = prior.outcomes()[at].clone();
                let point = Distribution::point_mass(prior.outcomes_arc(), &outcome).unwrap();
                let points: Vec<DiagnosticPoint> = sweep
                    .points()
                    .iter()
                    .map(|&c| {
                        let observed = ideal_mixture(&prior, &point, c).unwrap();
                        diagnostic_point(&observed, &prior, &point, c).unwrap()
                    })
                    .collect();
                let record = ObedienceRecord::from_points(sweep, &points).unwrap();
                prop_assert!(record.epsilon_obey < 1e-12);
            }
        }
    }
}

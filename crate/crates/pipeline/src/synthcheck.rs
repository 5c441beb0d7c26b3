//! The synthetic-oracle check suite.
//!
//! Every check here has a known-correct expectation: either a closed form
//! on the synthetic model (whose distortion makes the deviation curve, the
//! obedience error, and the fitted recalibration map all analytic) or a
//! property that holds for arbitrary fuzzed inputs. The suite runs from the
//! `synth-check` command and doubles as the core of the acceptance tests.
//!
//! Fuzzing uses a fixed-seed xorshift generator so every run checks the
//! same inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use obeval_backend::{ModelBackend, SyntheticBackend, SyntheticModelSpec};
use obeval_core::prob::{
    ideal_mixture, tvd, Certainty, CertaintySweep, Distribution,
};
use obeval_core::prompt::{ContextForm, PromptMode, ReminderSource, ReminderStyle};
use obeval_core::report::aggregate;
use obeval_core::trace::{
    align_steps, build_prefix_distribution, ScoredTrace, TokenStep,
};

use crate::cache::CachedBackend;
use crate::fit::{fit_held_out_maps, fit_pooled};
use crate::runner::{run_dataset, PipelineError, RunConfig, RunOutcome};
use crate::synthdata::synthetic_dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Deterministic xorshift64* generator for fuzzed inputs.
pub struct Rng(u64);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(if seed == 0 { 0x9e3779b97f4a7c15 } else { seed })
    }

    fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x.wrapping_mul(0x2545f4914f6cdd1d)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// A random distribution over `n` shared outcomes.
pub fn random_distribution(rng: &mut Rng, outcomes: &std::sync::Arc<Vec<String>>) -> Distribution {
    let mut mass: Vec<f64> = (0..outcomes.len()).map(|_| rng.uniform()).collect();
    let sum: f64 = mass.iter().sum();
    if sum == 0.0 {
        mass[0] = 1.0;
    } else {
        for m in &mut mass {
            *m /= sum;
        }
    }
    Distribution::with_outcomes(std::sync::Arc::clone(outcomes), mass).expect("valid fuzz mass")
}

/// A random teacher-forced trace of the given length. Step tokens are fixed
/// so traces of equal length can be aligned against each other.
pub fn random_trace(rng: &mut Rng, len: usize, label: &str) -> ScoredTrace {
    let alphabet = ["a", "b", "c", "d"];
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let forced = (1e-3 + rng.uniform() * 0.896).min(0.9);
        let mut alternatives = BTreeMap::new();
        let mut remaining = 1.0 - forced;
        for &name in alphabet.iter().take(rng.below(4)) {
            let share = rng.uniform() * remaining * 0.5;
            alternatives.insert(name.to_string(), share);
            remaining -= share;
        }
        let residual = remaining;
        steps.push(TokenStep::new(format!("t{t}"), forced, alternatives, residual).unwrap());
    }
    let tokens = (0..len).map(|t| format!("t{t}")).collect();
    ScoredTrace::new(tokens, steps, label).unwrap()
}

fn outcome(name: &str, result: Result<String, String>) -> CheckOutcome {
    match result {
        Ok(detail) => CheckOutcome {
            name: name.to_string(),
            passed: true,
            detail,
        },
        Err(detail) => CheckOutcome {
            name: name.to_string(),
            passed: false,
            detail,
        },
    }
}

// ---------------------------------------------------------------------------
// Property checks over fuzzed inputs
// ---------------------------------------------------------------------------

pub fn check_metric_axioms(pairs: usize) -> CheckOutcome {
    let started = Instant::now();
    let run = || -> Result<String, String> {
        let mut rng = Rng::new(101);
        let outcomes = std::sync::Arc::new(
            (0..5).map(|i| format!("o{i}")).collect::<Vec<_>>(),
        );
        let mut worst_symmetry = 0.0_f64;
        for i in 0..pairs {
            let p = random_distribution(&mut rng, &outcomes);
            let q = random_distribution(&mut rng, &outcomes);
            let r = random_distribution(&mut rng, &outcomes);
            let pq = tvd(&p, &q).map_err(|e| e.to_string())?;
            let qp = tvd(&q, &p).map_err(|e| e.to_string())?;
            if !(0.0..=1.0).contains(&pq) {
                return Err(format!("pair {i}: distance {pq} outside [0, 1]"));
            }
            worst_symmetry = worst_symmetry.max((pq - qp).abs());
            if (pq - qp).abs() > 1e-12 {
                return Err(format!("pair {i}: symmetry gap {}", (pq - qp).abs()));
            }
            if tvd(&p, &p).map_err(|e| e.to_string())? != 0.0 {
                return Err(format!("pair {i}: self-distance is not exactly 0"));
            }
            let pr = tvd(&p, &r).map_err(|e| e.to_string())?;
            let rq = tvd(&r, &q).map_err(|e| e.to_string())?;
            if pq > pr + rq + 1e-12 {
                return Err(format!(
                    "pair {i}: triangle violation {pq} > {pr} + {rq}"
                ));
            }
        }
        Ok(format!(
            "{pairs} pairs in {:?}, worst symmetry gap {worst_symmetry:.2e}",
            started.elapsed()
        ))
    };
    outcome("metric-axioms", run())
}

pub fn check_mixture_endpoints(priors: usize) -> CheckOutcome {
    let run = || -> Result<String, String> {
        let mut rng = Rng::new(202);
        let outcomes = std::sync::Arc::new(
            (0..4).map(|i| format!("o{i}")).collect::<Vec<_>>(),
        );
        for i in 0..priors {
            let prior = random_distribution(&mut rng, &outcomes);
            let at = rng.below(outcomes.len());
            let point = Distribution::point_mass(prior.outcomes_arc(), &outcomes[at])
                .map_err(|e| e.to_string())?;
            let zero = ideal_mixture(&prior, &point, Certainty::ZERO).map_err(|e| e.to_string())?;
            let one = ideal_mixture(&prior, &point, Certainty::ONE).map_err(|e| e.to_string())?;
            if tvd(&zero, &prior).map_err(|e| e.to_string())? != 0.0 {
                return Err(format!("prior {i}: mixture at c=0 is not exactly the prior"));
            }
            if tvd(&one, &point).map_err(|e| e.to_string())? != 0.0 {
                return Err(format!("prior {i}: mixture at c=1 is not exactly the point mass"));
            }
        }
        Ok(format!("{priors} fuzzed priors, both endpoints exact"))
    };
    outcome("mixture-endpoints", run())
}

pub fn check_prefix_normalization(traces: usize) -> CheckOutcome {
    let run = || -> Result<String, String> {
        let mut rng = Rng::new(303);
        let mut worst_sum = 0.0_f64;
        let mut worst_rel = 0.0_f64;
        for i in 0..traces {
            let len = 1 + rng.below(32);
            let trace = random_trace(&mut rng, len, "fuzz");
            let dist = build_prefix_distribution(&trace).map_err(|e| e.to_string())?;
            let total: f64 = dist.distribution().masses().iter().sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
            if (total - 1.0).abs() > 1e-6 {
                return Err(format!("trace {i} (len {len}): mass sums to {total}"));
            }
            let product = trace.chain_probability();
            let rel = (dist.full_answer_mass() - product).abs() / product;
            worst_rel = worst_rel.max(rel);
            if rel > 1e-9 {
                return Err(format!(
                    "trace {i} (len {len}): full-answer mass off by relative {rel:.2e}"
                ));
            }
        }
        Ok(format!(
            "{traces} traces (lengths 1-32), worst sum gap {worst_sum:.2e}, worst chain-product relative error {worst_rel:.2e}"
        ))
    };
    outcome("prefix-normalization", run())
}

pub fn check_coarsening_bound(pairs: usize) -> CheckOutcome {
    let run = || -> Result<String, String> {
        let mut rng = Rng::new(404);
        for i in 0..pairs {
            let len = 1 + rng.below(4);
            let a = random_trace(&mut rng, len, "a");
            let b = random_trace(&mut rng, len, "b");
            let aligned = align_steps(&[a, b]).map_err(|e| e.to_string())?;
            let fine: Vec<_> = aligned
                .iter()
                .map(|t| build_prefix_distribution(t).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            let fine_tvd =
                tvd(fine[0].distribution(), fine[1].distribution()).map_err(|e| e.to_string())?;

            // Merge a random subset of each step's named alternatives into
            // the residual, identically in both traces.
            let coarse: Vec<ScoredTrace> = aligned
                .iter()
                .map(|t| {
                    let mut fold_seed = Rng::new(1000 + i as u64);
                    let steps = t
                        .steps()
                        .iter()
                        .map(|s| {
                            let mut kept = BTreeMap::new();
                            let mut folded = s.residual();
                            for (token, &p) in s.alternatives() {
                                if fold_seed.below(2) == 0 {
                                    folded += p;
                                } else {
                                    kept.insert(token.clone(), p);
                                }
                            }
                            TokenStep::from_logprob(s.forced_token(), s.forced_logprob(), kept, folded)
                                .unwrap()
                        })
                        .collect();
                    ScoredTrace::new(t.answer_tokens().to_vec(), steps, t.condition_label()).unwrap()
                })
                .collect();
            let coarse_dists: Vec<_> = coarse
                .iter()
                .map(|t| build_prefix_distribution(t).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            let coarse_tvd = tvd(coarse_dists[0].distribution(), coarse_dists[1].distribution())
                .map_err(|e| e.to_string())?;
            if coarse_tvd > fine_tvd + 1e-12 {
                return Err(format!(
                    "pair {i}: merging outcomes increased distance {fine_tvd} -> {coarse_tvd}"
                ));
            }
        }
        Ok(format!("{pairs} fuzzed pairs, merging never increased the distance"))
    };
    outcome("coarsening-lower-bound", run())
}

pub fn check_linearity(sets: usize) -> CheckOutcome {
    let run = || -> Result<String, String> {
        let mut rng = Rng::new(505);
        let sweep = CertaintySweep::default();
        let mut worst = 0.0_f64;
        for i in 0..sets {
            let n = 1 + rng.below(12);
            let samples: Vec<obeval_core::report::SampleCurves> = (0..n)
                .map(|k| {
                    let deviation: Vec<f64> =
                        (0..sweep.len()).map(|_| rng.uniform()).collect();
                    let record = obeval_core::prob::ObedienceRecord::new(
                        sweep.clone(),
                        vec![0.5; sweep.len()],
                        vec![0.5; sweep.len()],
                        deviation,
                    )
                    .unwrap();
                    obeval_core::report::SampleCurves {
                        id: format!("s{k}"),
                        record,
                        ideal_sim_to_context: vec![0.5; sweep.len()],
                        ideal_sim_to_prior: vec![0.5; sweep.len()],
                    }
                })
                .collect();
            let mean_eps = samples.iter().map(|s| s.record.epsilon_obey).sum::<f64>() / n as f64;
            let agg = aggregate(&samples, vec![]).map_err(|e| e.to_string())?;
            let gap = (agg.epsilon_obey - mean_eps).abs();
            worst = worst.max(gap);
            if gap > 1e-12 {
                return Err(format!("set {i}: linearity gap {gap:.2e}"));
            }
        }
        Ok(format!("{sets} fuzzed result sets, worst linearity gap {worst:.2e}"))
    };
    outcome("linearity", run())
}

// ---------------------------------------------------------------------------
// Synthetic-oracle pipeline checks
// ---------------------------------------------------------------------------

/// The analytic deviation curve of the canonical square model on the
/// default sweep, and its trapezoidal area.
pub fn canonical_expectations() -> (Vec<f64>, f64) {
    (vec![0.0, 0.128, 0.192, 0.192, 0.128, 0.0], 0.128)
}

async fn canonical_run(
    cache_dir: Option<&Path>,
    config: RunConfig,
    n_samples: usize,
) -> Result<(RunOutcome, Arc<CachedBackend>), PipelineError> {
    let spec = SyntheticModelSpec::canonical_square();
    let samples = synthetic_dataset(&spec, n_samples);
    let inner: Arc<dyn ModelBackend> = Arc::new(SyntheticBackend::new(spec, 5)?);
    let backend = Arc::new(CachedBackend::new(inner, cache_dir)?);
    let templates = Arc::new(obeval_core::prompt::TemplateSet::default());
    let outcome = run_dataset(
        Arc::clone(&backend) as Arc<dyn ModelBackend>,
        templates,
        &samples,
        Arc::new(config),
    )
    .await?;
    Ok((outcome, backend))
}

fn baseline_config() -> RunConfig {
    RunConfig::new(PromptMode::baseline())
}

pub async fn check_synthetic_baseline() -> CheckOutcome {
    let run = async {
        let (outcome, _) = canonical_run(None, baseline_config(), 4)
            .await
            .map_err(|e| e.to_string())?;
        let curves: Vec<_> = outcome.usable().filter_map(|r| r.curves()).collect();
        if curves.len() != 4 {
            return Err(format!("expected 4 usable samples, got {}", curves.len()));
        }
        let agg = aggregate(&curves, outcome.excluded_ids()).map_err(|e| e.to_string())?;
        let (expected_curve, expected_eps) = canonical_expectations();
        for (i, (&got, &want)) in agg.deviation.iter().zip(&expected_curve).enumerate() {
            if (got - want).abs() > 1e-9 {
                return Err(format!(
                    "deviation[{i}] = {got}, expected {want} (gap {:.2e})",
                    (got - want).abs()
                ));
            }
        }
        if (agg.epsilon_obey - expected_eps).abs() > 1e-9 {
            return Err(format!(
                "obedience error {} differs from {expected_eps}",
                agg.epsilon_obey
            ));
        }
        Ok(format!(
            "full pipeline reproduces the closed-form curve; obedience error {:.6}",
            agg.epsilon_obey
        ))
    };
    outcome("synthetic-baseline", run.await)
}

/// Independent brute force for the canonical square model: minimize the
/// analytic distance 0.8 * |c0^2 - c| over the 6x6 grid with the
/// closest-then-smallest tie rule.
pub fn brute_force_square_map(sweep: &CertaintySweep) -> Vec<u32> {
    let points: Vec<f64> = sweep.points().iter().map(|c| c.value()).collect();
    points
        .iter()
        .map(|&c| {
            let mut best = 0usize;
            for i in 1..points.len() {
                let d = |i: usize| 0.8 * (points[i] * points[i] - c).abs();
                if d(i) < d(best)
                    || (d(i) == d(best)
                        && (points[i] - c).abs() < (points[best] - c).abs())
                {
                    best = i;
                }
            }
            (points[best] * 100.0).round() as u32
        })
        .collect()
}

pub async fn check_synthetic_recalibration() -> CheckOutcome {
    let run = async {
        let (raw, _) = canonical_run(None, baseline_config(), 4)
            .await
            .map_err(|e| e.to_string())?;
        let map = fit_pooled(&raw.results).map_err(|e| e.to_string())?;
        let fitted: Vec<u32> = map
            .mapping()
            .iter()
            .map(|c| c.percent().unwrap_or(u32::MAX))
            .collect();
        let expected = [0, 40, 60, 80, 80, 100];
        if fitted != expected {
            return Err(format!("fitted map {fitted:?}, expected {expected:?}"));
        }
        let brute = brute_force_square_map(map.sweep());
        if fitted != brute.as_slice() {
            return Err(format!("fitted map {fitted:?} disagrees with brute force {brute:?}"));
        }

        let baseline_eps = {
            let curves: Vec<_> = raw.usable().filter_map(|r| r.curves()).collect();
            aggregate(&curves, vec![]).map_err(|e| e.to_string())?.epsilon_obey
        };
        let recal_config = RunConfig::new(PromptMode {
            recalibrated: true,
            ..PromptMode::baseline()
        });
        let recal_config = RunConfig {
            recal_map: Some(map),
            ..recal_config
        };
        let (recal, _) = canonical_run(None, recal_config, 4)
            .await
            .map_err(|e| e.to_string())?;
        let recal_eps = {
            let curves: Vec<_> = recal.usable().filter_map(|r| r.curves()).collect();
            aggregate(&curves, vec![]).map_err(|e| e.to_string())?.epsilon_obey
        };
        if recal_eps + 1e-12 >= baseline_eps {
            return Err(format!(
                "recalibration did not reduce the error: {baseline_eps} -> {recal_eps}"
            ));
        }
        Ok(format!(
            "map (0,40,60,80,80,100)% matches brute force; obedience error {baseline_eps:.6} -> {recal_eps:.6}"
        ))
    };
    outcome("synthetic-recalibration", run.await)
}

pub async fn check_held_out_invariance() -> CheckOutcome {
    let run = async {
        let (raw, _) = canonical_run(None, baseline_config(), 6)
            .await
            .map_err(|e| e.to_string())?;
        let pooled = fit_pooled(&raw.results).map_err(|e| e.to_string())?;
        let held_out = fit_held_out_maps(&raw.results).map_err(|e| e.to_string())?;
        if held_out.len() < 2 {
            return Err(format!("expected several categories, got {}", held_out.len()));
        }
        for (category, map) in &held_out {
            if map.mapping() != pooled.mapping() {
                return Err(format!(
                    "held-out map for `{category}` differs from the in-category map"
                ));
            }
        }
        Ok(format!(
            "{} held-out maps all equal the pooled map",
            held_out.len()
        ))
    };
    outcome("held-out-invariance", run.await)
}

pub async fn check_call_economy(cache_root: &Path) -> CheckOutcome {
    let run = async {
        let cache_dir = cache_root.join("economy-cache");
        let config = RunConfig::new(PromptMode {
            reminder: ReminderSource::SelfPrior,
            reminder_style: ReminderStyle::AnswerOnly,
            context_form: ContextForm::Simplified,
            recalibrated: false,
        });
        let (outcome_cold, backend) = canonical_run(Some(&cache_dir), config.clone(), 10)
            .await
            .map_err(|e| e.to_string())?;
        if outcome_cold.results.len() != 10 {
            return Err(format!(
                "expected 10 evaluated samples, got {}",
                outcome_cold.results.len()
            ));
        }
        let cold = backend.counters().snapshot();
        if cold.scoring != 70 {
            return Err(format!("cold run made {} scoring calls, expected 70", cold.scoring));
        }
        if cold.generation > 20 {
            return Err(format!(
                "cold run made {} generations, expected at most 20",
                cold.generation
            ));
        }
        let (_, warm_backend) = canonical_run(Some(&cache_dir), config, 10)
            .await
            .map_err(|e| e.to_string())?;
        let warm = warm_backend.counters().snapshot();
        if warm.scoring != 0 || warm.generation != 0 {
            return Err(format!(
                "warm rerun still reached the backend: {} scoring, {} generation",
                warm.scoring, warm.generation
            ));
        }
        Ok(format!(
            "cold run: {} scoring calls, {} generations; warm rerun: 0 and 0",
            cold.scoring, cold.generation
        ))
    };
    outcome("call-count-economy", run.await)
}

// ---------------------------------------------------------------------------
// Suite driver
// ---------------------------------------------------------------------------

fn scratch_dir() -> PathBuf {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    std::env::temp_dir().join(format!("obeval-synthcheck-{}-{nanos}", std::process::id()))
}

/// Run the whole oracle suite. Scratch state lives under a fresh temporary
/// directory, removed afterwards.
pub async fn run_all() -> Vec<CheckOutcome> {
    let scratch = scratch_dir();
    let mut outcomes = vec![
        check_metric_axioms(1000),
        check_mixture_endpoints(100),
        check_prefix_normalization(1000),
        check_coarsening_bound(500),
        check_linearity(200),
    ];
    outcomes.push(check_synthetic_baseline().await);
    outcomes.push(check_synthetic_recalibration().await);
    outcomes.push(check_held_out_invariance().await);
    outcomes.push(check_call_economy(&scratch).await);
    let _ = std::fs::remove_dir_all(&scratch);
    outcomes
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

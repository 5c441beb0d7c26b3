//! Generation of in-memory datasets for the synthetic oracle model.

use obeval_backend::SyntheticModelSpec;
use obeval_core::dataset::Sample;

/// Default category cycle for generated datasets; several categories so
/// held-out fitting has complements to work with.
pub const SYNTH_CATEGORIES: [&str; 3] = ["Dates", "Locations", "Names"];

/// Build `n` samples whose contexts convey the spec's lowest-prior
/// vocabulary token, so context and prior genuinely disagree. Gold answers
/// alternate between agreeing and disagreeing with the context, giving the
/// correctness split both sides to work with.
pub fn synthetic_dataset(spec: &SyntheticModelSpec, n: usize) -> Vec<Sample> {
    let answer_index = spec
        .prior
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let answer = &spec.vocabulary[answer_index];
    let other = spec
        .vocabulary
        .iter()
        .find(|t| t.as_str() != answer.as_str())
        .unwrap_or(answer);
    (0..n)
        .map(|i| Sample {
            id: format!("synth-{i:04}"),
            question: format!("Which codeword does registry entry {i} map to?"),
            context: format!("Registry entry {i} maps to the codeword {answer}."),
            context_answer: answer.clone(),
            gold_answer: Some(if i % 2 == 0 {
                answer.clone()
            } else {
                other.clone()
            }),
            category: SYNTH_CATEGORIES[i % SYNTH_CATEGORIES.len()].to_string(),
        })
        .collect()
}

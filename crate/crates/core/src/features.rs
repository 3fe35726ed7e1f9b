//! Ensemble features consumed by the failure estimator.
//!
//! Every feature is invariant under permutation of the ensemble outputs, and
//! bit-identical for identical inputs: sums go through [`exact_sum`] or exact
//! integer arithmetic so evaluation order never matters.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::domain::{EnsembleResponse, DEFAULT_CONFIDENCE};
use crate::numeric::exact_sum;

pub const FEATURE_COUNT: usize = 6;

/// Canonical feature order, shared by training data, estimator files and the
/// wire format.
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "exact_agreement",
    "lexical_agreement",
    "length_dispersion",
    "mean_confidence",
    "confidence_spread",
    "confidence_missing",
];

/// Router inputs. Serializes as a fixed-order array of six numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; FEATURE_COUNT]", into = "[f64; FEATURE_COUNT]")]
pub struct FeatureVector {
    pub exact_agreement: f64,
    pub lexical_agreement: f64,
    /// Coefficient of variation of output token counts.
    pub length_dispersion: f64,
    pub mean_confidence: f64,
    pub confidence_spread: f64,
    /// Share of outputs that reported no confidence.
    pub confidence_missing: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.exact_agreement,
            self.lexical_agreement,
            self.length_dispersion,
            self.mean_confidence,
            self.confidence_spread,
            self.confidence_missing,
        ]
    }

    pub fn from_array(v: [f64; FEATURE_COUNT]) -> Self {
        FeatureVector {
            exact_agreement: v[0],
            lexical_agreement: v[1],
            length_dispersion: v[2],
            mean_confidence: v[3],
            confidence_spread: v[4],
            confidence_missing: v[5],
        }
    }
}

impl From<[f64; FEATURE_COUNT]> for FeatureVector {
    fn from(v: [f64; FEATURE_COUNT]) -> Self {
        FeatureVector::from_array(v)
    }
}

impl From<FeatureVector> for [f64; FEATURE_COUNT] {
    fn from(f: FeatureVector) -> Self {
        f.to_array()
    }
}

fn token_set(text: &str) -> BTreeSet<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn jaccard_sets(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        // two empty texts are identical
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Jaccard similarity of lowercased whitespace-token sets.
pub fn jaccard(a: &str, b: &str) -> f64 {
    jaccard_sets(&token_set(a), &token_set(b))
}

/// Fraction of answered outputs that match the modal answer (0 when none answered).
pub fn exact_agreement(ensemble: &EnsembleResponse) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut answered = 0usize;
    for answer in ensemble.outputs.iter().filter_map(|o| o.extracted_answer.as_deref()) {
        *counts.entry(answer).or_default() += 1;
        answered += 1;
    }
    match counts.values().max() {
        Some(&modal) => modal as f64 / answered as f64,
        None => 0.0,
    }
}

/// Mean pairwise token-set Jaccard similarity; 1.0 for a single output.
pub fn lexical_agreement(ensemble: &EnsembleResponse) -> f64 {
    let sets: Vec<_> = ensemble.outputs.iter().map(|o| token_set(&o.raw_text)).collect();
    if sets.len() < 2 {
        return 1.0;
    }
    let mut sims = Vec::with_capacity(sets.len() * (sets.len() - 1) / 2);
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            sims.push(jaccard_sets(&sets[i], &sets[j]));
        }
    }
    exact_sum(sims.iter().copied()) / sims.len() as f64
}

/// Population standard deviation of output token counts over their mean.
pub fn length_dispersion(ensemble: &EnsembleResponse) -> f64 {
    let n = ensemble.outputs.len() as u128;
    if n < 2 {
        return 0.0;
    }
    let (sum, sum_sq) = ensemble.outputs.iter().fold((0u128, 0u128), |(s, q), o| {
        let t = o.output_tokens as u128;
        (s + t, q + t * t)
    });
    if sum == 0 {
        return 0.0;
    }
    // n^2 * variance, exact in integers
    let scaled_var = n * sum_sq - sum * sum;
    let std = (scaled_var as f64).sqrt() / n as f64;
    let mean = sum as f64 / n as f64;
    std / mean
}

/// Population variance of output token counts. Recorded in traces alongside
/// the scale-free dispersion.
pub fn token_variance(ensemble: &EnsembleResponse) -> f64 {
    let n = ensemble.outputs.len() as u128;
    if n == 0 {
        return 0.0;
    }
    let (sum, sum_sq) = ensemble.outputs.iter().fold((0u128, 0u128), |(s, q), o| {
        let t = o.output_tokens as u128;
        (s + t, q + t * t)
    });
    (n * sum_sq - sum * sum) as f64 / (n * n) as f64
}

pub fn build_feature_vector(ensemble: &EnsembleResponse) -> FeatureVector {
    let confidences: Vec<f64> = ensemble.outputs.iter().filter_map(|o| o.confidence).collect();
    let n = ensemble.outputs.len().max(1);
    let (mean_confidence, confidence_spread) = if confidences.is_empty() {
        (DEFAULT_CONFIDENCE, 0.0)
    } else {
        let max = confidences.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = confidences.iter().copied().fold(f64::INFINITY, f64::min);
        (
            exact_sum(confidences.iter().copied()) / confidences.len() as f64,
            max - min,
        )
    };
    FeatureVector {
        exact_agreement: exact_agreement(ensemble),
        lexical_agreement: lexical_agreement(ensemble),
        length_dispersion: length_dispersion(ensemble),
        mean_confidence,
        confidence_spread,
        confidence_missing: (n - confidences.len()) as f64 / n as f64,
    }
}

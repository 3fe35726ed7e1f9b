//! Synthetic arithmetic-question traces with a tunable link between
//! ensemble agreement and Layer-1 failure.
//!
//! Each record draws its Layer-1 outcome first, then a latent "ease" score
//! `z ~ N(+s/2, 1)` for correct records and `N(-s/2, 1)` for failures, where
//! `s` is `feature_separation`. Everything the router can observe (agreement
//! pattern, wording overlap, length spread, confidences) is a function of `z`
//! and independent noise only, so `s = 0` makes the features carry no signal.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{TraceError, TraceRecord, TRACE_SCHEMA_VERSION};
use crate::domain::{aggregate_l1_answer, EnsembleResponse, ModelOutput, Query, TaskKind};
use crate::features::token_variance;
use crate::numeric::sigmoid;

/// Calibrated so the boosted router on default traces clears the
/// learnability targets with margin.
pub const DEFAULT_FEATURE_SEPARATION: f64 = 2.0;

/// Layer-1 accuracy of the reference ensemble on grade-school math.
pub const REFERENCE_L1_ACCURACY: f64 = 0.791;
/// Oracle accuracy of the reference Layer-2 model.
pub const REFERENCE_L2_ACCURACY: f64 = 0.98;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTraceParams {
    pub n: usize,
    pub l1_accuracy: f64,
    pub l2_accuracy: f64,
    pub feature_separation: f64,
    pub seed: u64,
    pub l1_models: Vec<String>,
    pub l1_mean_tokens: f64,
    pub l2_mean_tokens: f64,
    /// Seconds.
    pub l1_mean_latency: f64,
    pub l2_mean_latency: f64,
    /// Probability that an output omits its confidence line.
    pub confidence_missing_rate: f64,
}

impl Default for SyntheticTraceParams {
    fn default() -> Self {
        SyntheticTraceParams {
            n: 10_000,
            l1_accuracy: REFERENCE_L1_ACCURACY,
            l2_accuracy: REFERENCE_L2_ACCURACY,
            feature_separation: DEFAULT_FEATURE_SEPARATION,
            seed: 42,
            l1_models: vec!["l1-a".into(), "l1-b".into(), "l1-c".into()],
            l1_mean_tokens: 180.0,
            l2_mean_tokens: 320.0,
            l1_mean_latency: 0.9,
            l2_mean_latency: 3.2,
            confidence_missing_rate: 0.1,
        }
    }
}

impl SyntheticTraceParams {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::InvalidParams(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        for (name, v) in [
            ("l1_accuracy", self.l1_accuracy),
            ("l2_accuracy", self.l2_accuracy),
            ("confidence_missing_rate", self.confidence_missing_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} must be in [0,1]"));
            }
        }
        if !(self.feature_separation >= 0.0 && self.feature_separation.is_finite()) {
            return bad("feature_separation must be finite and nonnegative".into());
        }
        if self.l1_models.is_empty() {
            return bad("at least one layer-1 model is required".into());
        }
        for (name, v) in [
            ("l1_mean_tokens", self.l1_mean_tokens),
            ("l2_mean_tokens", self.l2_mean_tokens),
            ("l1_mean_latency", self.l1_mean_latency),
            ("l2_mean_latency", self.l2_mean_latency),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

const STEP_WORDS: &[&str] = &[
    "first", "compute", "the", "total", "then", "multiply", "by", "add", "subtract", "each", "so", "we",
    "get", "number", "of", "items", "remaining", "after", "divide", "per", "group", "which", "gives", "result",
];

const FILLER_WORDS: &[&str] = &[
    "hmm", "wait", "actually", "maybe", "assume", "instead", "perhaps", "alternatively", "recheck",
    "guess", "roughly", "approximately", "suppose", "likely", "unclear", "consider", "revisit", "hence",
    "therefore", "thus", "notice", "observe", "careful", "recall", "estimate", "carry", "borrow", "round",
];

#[derive(Clone, Copy)]
enum Pattern {
    Unanimous,
    Majority,
    Split,
}

fn pct(x: f64) -> u32 {
    (x * 100.0).round().clamp(1.0, 99.0) as u32
}

fn round_ms(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

// A wrong answer distinct from every value in `taken`.
fn wrong_answer(rng: &mut ChaCha8Rng, gold: i64, taken: &[i64]) -> i64 {
    loop {
        let offset = rng.random_range(1..=12) * if rng.random() { 1 } else { -1 };
        let candidate = gold + offset;
        if !taken.contains(&candidate) {
            return candidate;
        }
    }
}

// A minority answer. When Layer 1 is wrong, the gold answer may appear once
// among the dissenters. `taken` starts as [gold, head].
fn dissent(rng: &mut ChaCha8Rng, l1_correct: bool, gold: i64, taken: &mut Vec<i64>) -> i64 {
    let alt = if !l1_correct && !taken[2..].contains(&gold) && rng.random::<bool>() {
        gold
    } else {
        wrong_answer(rng, gold, taken)
    };
    taken.push(alt);
    alt
}

/// Deterministic synthetic traces; see the module docs for the generative
/// model.
pub fn generate_synthetic(params: &SyntheticTraceParams) -> Result<Vec<TraceRecord>, TraceError> {
    params.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(params.seed);
    let half_gap = params.feature_separation / 2.0;
    (0..params.n)
        .map(|i| {
            // one stream per record keeps records independent of each other
            let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            generate_record(params, i, half_gap, &mut rng)
        })
        .collect()
}

fn generate_record(
    params: &SyntheticTraceParams,
    index: usize,
    half_gap: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TraceRecord, TraceError> {
    let k = params.l1_models.len();
    let (a, b, c) = (
        rng.random_range(2..=60i64),
        rng.random_range(2..=25i64),
        rng.random_range(0..=99i64),
    );
    let gold = a * b + c;
    let prompt = format!("A crate holds {a} rows of {b} jars and {c} loose jars. How many jars are there?");

    let l1_correct = rng.random::<f64>() < params.l1_accuracy;
    let l2_correct = rng.random::<f64>() < params.l2_accuracy;
    let noise: f64 = StandardNormal.sample(rng);
    let z = noise + if l1_correct { half_gap } else { -half_gap };
    let difficulty = sigmoid(-1.5 * z);

    let pattern = if k == 1 || z > 0.0 {
        Pattern::Unanimous
    } else if z > -1.0 || k == 2 {
        Pattern::Majority
    } else {
        Pattern::Split
    };

    // answers[j] for model j, plus the output that must win on confidence
    let mut answers = vec![0i64; k];
    let mut forced_winner: Option<usize> = None;
    let head = if l1_correct { gold } else { wrong_answer(rng, gold, &[gold]) };
    match pattern {
        Pattern::Unanimous => answers.fill(head),
        Pattern::Majority => {
            answers.fill(head);
            // strictly fewer dissenters than head votes, except the 1-1 case
            let dissenters = ((k - 1) / 2).max(1);
            let mut positions: Vec<usize> = (0..k).collect();
            positions.shuffle(rng);
            let mut taken = vec![gold, head];
            for &j in &positions[..dissenters] {
                answers[j] = dissent(rng, l1_correct, gold, &mut taken);
            }
            if k == 2 {
                forced_winner = answers.iter().position(|&x| x == head);
            }
        }
        Pattern::Split => {
            let mut taken = vec![gold, head];
            for slot in answers.iter_mut() {
                *slot = dissent(rng, l1_correct, gold, &mut taken);
            }
            let w = rng.random_range(0..k);
            answers[w] = head;
            forced_winner = Some(w);
        }
    }

    // confidences in whole percent; absent ones count as 50% on ties
    let conf_noise = Normal::new(0.0, 0.12).expect("valid normal");
    let mut confidences: Vec<Option<u32>> = (0..k)
        .map(|_| {
            let c = 0.72 + 0.03 * z + conf_noise.sample(rng);
            (rng.random::<f64>() >= params.confidence_missing_rate).then(|| pct(c))
        })
        .collect();
    if let Some(w) = forced_winner {
        let top = confidences.iter().flatten().copied().max().unwrap_or(0).max(51);
        confidences[w] = Some(top);
        for (j, c) in confidences.iter_mut().enumerate() {
            if j != w {
                if let Some(v) = c {
                    if *v >= top {
                        *v = top - 1;
                    }
                }
            }
        }
    }

    let spread = 0.08 + 0.45 * difficulty;
    let steps: Vec<&str> = (0..10).map(|_| STEP_WORDS[rng.random_range(0..STEP_WORDS.len())]).collect();
    let outputs: Vec<ModelOutput> = (0..k)
        .map(|j| {
            let eps: f64 = StandardNormal.sample(rng);
            let tokens = (params.l1_mean_tokens * (spread * eps).exp()).round().max(1.0) as u64;
            let mut words: Vec<String> = Vec::new();
            words.push(format!("{a}x{b}"));
            for s in &steps {
                if rng.random::<f64>() > 0.35 * difficulty {
                    words.push((*s).to_string());
                }
            }
            let fillers = (6.0 * difficulty + rng.random::<f64>() * 2.0).floor() as usize;
            for _ in 0..fillers {
                words.push(FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())].to_string());
            }
            let mut text = format!("{} = {}.\n#### {}", words.join(" "), answers[j], answers[j]);
            if let Some(p) = confidences[j] {
                text.push_str(&format!("\nConfidence: {p}%"));
            }
            let lat_noise: f64 = StandardNormal.sample(rng);
            let latency = round_ms(
                params.l1_mean_latency * tokens as f64 / params.l1_mean_tokens * (0.1 * lat_noise).exp(),
            );
            ModelOutput::from_text(params.l1_models[j].clone(), text, TaskKind::Convergent, tokens, latency)
        })
        .collect();

    let query = Query {
        id: format!("syn-{:06}", index),
        prompt,
        task_kind: TaskKind::Convergent,
        gold_answer: Some(gold.to_string()),
    };
    let ensemble = EnsembleResponse::new(query.id.clone(), outputs)?;
    let aggregated = aggregate_l1_answer(&ensemble, TaskKind::Convergent)?;
    let l1_aggregated_correct = Some(&aggregated.answer) == query.gold_answer.as_ref();
    debug_assert_eq!(l1_aggregated_correct, l1_correct, "generator broke its own outcome");

    let l2_noise: f64 = StandardNormal.sample(rng);
    let l2_tokens = (params.l2_mean_tokens * (0.2 * l2_noise).exp()).round().max(1.0) as u64;
    let l2_latency = round_ms(params.l2_mean_latency * l2_tokens as f64 / params.l2_mean_tokens);
    Ok(TraceRecord {
        schema_version: TRACE_SCHEMA_VERSION,
        l1_token_variance: Some(token_variance(&ensemble)),
        query,
        l1_outputs: ensemble.outputs,
        l1_aggregated_correct,
        l2_correct,
        l2_output_tokens: l2_tokens,
        l2_latency,
    })
}

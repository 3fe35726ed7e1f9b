//! Domain types shared by every module, plus answer extraction, confidence
//! parsing and Layer-1 answer aggregation.
//!
//! Canonical answer strings are the unit of correctness comparison across the
//! whole system: two answers agree iff their canonical strings are equal.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::jaccard;

/// Confidence assumed for outputs that did not report one, for tie-breaking only.
pub const DEFAULT_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// A single canonical short answer (e.g. arithmetic word problems).
    Convergent,
    OpenEnded,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("query id must be nonempty")]
    EmptyQueryId,
    #[error("ensemble for query {0} has no outputs")]
    EmptyEnsemble(String),
    #[error("output from {model_id}: {reason}")]
    InvalidOutput { model_id: String, reason: String },
    #[error("no output in the ensemble yields an answer")]
    NoAnswerAvailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub prompt: String,
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
}

impl Query {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.id.is_empty() {
            return Err(DomainError::EmptyQueryId);
        }
        Ok(())
    }
}

/// One Layer-1 model's output for a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub model_id: String,
    pub raw_text: String,
    #[serde(default)]
    pub extracted_answer: Option<String>,
    #[serde(default)]
    pub confidence: Option<f64>,
    pub output_tokens: u64,
    /// Seconds.
    pub latency: f64,
}

impl ModelOutput {
    /// Builds an output from raw text, running answer extraction and
    /// confidence parsing.
    pub fn from_text(
        model_id: impl Into<String>,
        raw_text: impl Into<String>,
        task_kind: TaskKind,
        output_tokens: u64,
        latency: f64,
    ) -> Self {
        let raw_text = raw_text.into();
        ModelOutput {
            model_id: model_id.into(),
            extracted_answer: extract_answer(&raw_text, task_kind),
            confidence: parse_confidence(&raw_text),
            raw_text,
            output_tokens,
            latency,
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |reason: &str| DomainError::InvalidOutput {
            model_id: self.model_id.clone(),
            reason: reason.to_string(),
        };
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(bad("confidence outside [0,1]"));
            }
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(bad("latency must be finite and nonnegative"));
        }
        Ok(())
    }

    fn tie_break_confidence(&self) -> f64 {
        self.confidence.unwrap_or(DEFAULT_CONFIDENCE)
    }
}

/// All Layer-1 outputs for one query, in ensemble order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResponse {
    pub query_id: String,
    pub outputs: Vec<ModelOutput>,
}

impl EnsembleResponse {
    pub fn new(query_id: impl Into<String>, outputs: Vec<ModelOutput>) -> Result<Self, DomainError> {
        let ensemble = EnsembleResponse {
            query_id: query_id.into(),
            outputs,
        };
        ensemble.validate()?;
        Ok(ensemble)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.query_id.is_empty() {
            return Err(DomainError::EmptyQueryId);
        }
        if self.outputs.is_empty() {
            return Err(DomainError::EmptyEnsemble(self.query_id.clone()));
        }
        self.outputs.iter().try_for_each(ModelOutput::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedAnswer {
    pub answer: String,
    /// Share of the ensemble backing `answer`, in (0, 1].
    pub support: f64,
    pub source_model: String,
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?").expect("valid regex")
});

static CONFIDENCE_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)confidence\s*:\s*([0-9]+(?:\.[0-9]+)?)\s*%").expect("valid regex")
});

const ANSWER_MARKER: &str = "####";

/// Canonical decimal form of a numeric token: no thousands separators, no
/// leading `+`, no redundant leading zeros, no trailing fractional zeros.
pub fn normalize_number(token: &str) -> String {
    let token = token.trim().replace(',', "");
    let (negative, digits) = match token.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, token.strip_prefix('+').unwrap_or(&token)),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f.trim_end_matches('0')),
        None => (digits, ""),
    };
    let int_part = match int_part.trim_start_matches('0') {
        "" => "0",
        s => s,
    };
    let mut out = String::with_capacity(digits.len() + 1);
    let is_zero = int_part == "0" && frac_part.is_empty();
    if negative && !is_zero {
        out.push('-');
    }
    out.push_str(int_part);
    if !frac_part.is_empty() {
        out.push('.');
        out.push_str(frac_part);
    }
    out
}

fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Extracts the canonical answer from a model's raw text.
///
/// Convergent tasks take the text after the final `####` marker, falling back
/// to the last numeric token anywhere in the text. Open-ended tasks use the
/// whole text with whitespace collapsed.
pub fn extract_answer(raw_text: &str, task_kind: TaskKind) -> Option<String> {
    match task_kind {
        TaskKind::OpenEnded => {
            let text = normalize_whitespace(raw_text);
            (!text.is_empty()).then_some(text)
        }
        TaskKind::Convergent => {
            // a confidence marker is never the answer
            let cleaned = CONFIDENCE_LINE.replace_all(raw_text, "");
            let raw_text = cleaned.as_ref();
            if let Some(idx) = raw_text.rfind(ANSWER_MARKER) {
                let tail = raw_text[idx + ANSWER_MARKER.len()..].trim();
                if let Some(m) = NUMBER.find(tail) {
                    return Some(normalize_number(m.as_str()));
                }
                let tail = normalize_whitespace(tail);
                if !tail.is_empty() {
                    return Some(tail);
                }
            }
            NUMBER
                .find_iter(raw_text)
                .last()
                .map(|m| normalize_number(m.as_str()))
        }
    }
}

/// Parses the last `Confidence: N%` marker (case-insensitive), clamped to [0,1].
pub fn parse_confidence(raw_text: &str) -> Option<f64> {
    raw_text
        .lines()
        .filter_map(|line| CONFIDENCE_LINE.captures_iter(line).last())
        .last()
        .and_then(|caps| caps[1].parse::<f64>().ok())
        .map(|pct| (pct / 100.0).clamp(0.0, 1.0))
}

/// Picks the Layer-1 answer returned on short-circuit.
///
/// Convergent: majority vote over extracted answers; ties go to the answer
/// whose best supporting output reports the highest confidence, then to
/// ensemble order. Open-ended: the highest-confidence output, with support
/// equal to its mean token-set Jaccard similarity against the ensemble.
pub fn aggregate_l1_answer(
    ensemble: &EnsembleResponse,
    task_kind: TaskKind,
) -> Result<AggregatedAnswer, DomainError> {
    match task_kind {
        TaskKind::Convergent => aggregate_majority(ensemble),
        TaskKind::OpenEnded => aggregate_most_confident(ensemble),
    }
}

struct Candidate<'a> {
    answer: &'a str,
    count: usize,
    best_confidence: f64,
    // index of the highest-confidence (earliest on ties) supporting output
    representative: usize,
}

fn aggregate_majority(ensemble: &EnsembleResponse) -> Result<AggregatedAnswer, DomainError> {
    let mut candidates: Vec<Candidate<'_>> = Vec::new();
    let mut answered = 0usize;
    for (idx, output) in ensemble.outputs.iter().enumerate() {
        let Some(answer) = output.extracted_answer.as_deref() else {
            continue;
        };
        answered += 1;
        let confidence = output.tie_break_confidence();
        match candidates.iter_mut().find(|c| c.answer == answer) {
            Some(c) => {
                c.count += 1;
                if confidence > c.best_confidence {
                    c.best_confidence = confidence;
                    c.representative = idx;
                }
            }
            None => candidates.push(Candidate {
                answer,
                count: 1,
                best_confidence: confidence,
                representative: idx,
            }),
        }
    }
    // Candidates are in order of first appearance, so the first maximum wins
    // remaining ties.
    let mut best: Option<&Candidate<'_>> = None;
    for c in &candidates {
        let better = match best {
            None => true,
            Some(b) => c.count > b.count || (c.count == b.count && c.best_confidence > b.best_confidence),
        };
        if better {
            best = Some(c);
        }
    }
    let best = best.ok_or(DomainError::NoAnswerAvailable)?;
    Ok(AggregatedAnswer {
        answer: best.answer.to_string(),
        support: best.count as f64 / answered as f64,
        source_model: ensemble.outputs[best.representative].model_id.clone(),
    })
}

fn aggregate_most_confident(ensemble: &EnsembleResponse) -> Result<AggregatedAnswer, DomainError> {
    let mut best: Option<(usize, f64, String)> = None;
    for (idx, output) in ensemble.outputs.iter().enumerate() {
        let answer = output
            .extracted_answer
            .clone()
            .or_else(|| extract_answer(&output.raw_text, TaskKind::OpenEnded));
        let Some(answer) = answer else { continue };
        let confidence = output.tie_break_confidence();
        if best.as_ref().is_none_or(|(_, c, _)| confidence > *c) {
            best = Some((idx, confidence, answer));
        }
    }
    let (idx, _, answer) = best.ok_or(DomainError::NoAnswerAvailable)?;
    let chosen = &ensemble.outputs[idx].raw_text;
    let sims: Vec<f64> = ensemble
        .outputs
        .iter()
        .map(|o| jaccard(chosen, &o.raw_text))
        .collect();
    let support = crate::numeric::exact_mean(&sims).unwrap_or(1.0);
    Ok(AggregatedAnswer {
        answer,
        support,
        source_model: ensemble.outputs[idx].model_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(model: &str, answer: Option<&str>, confidence: Option<f64>) -> ModelOutput {
        ModelOutput {
            model_id: model.to_string(),
            raw_text: answer.map(|a| format!("#### {a}")).unwrap_or_default(),
            extracted_answer: answer.map(str::to_string),
            confidence,
            output_tokens: 10,
            latency: 0.1,
        }
    }

    fn ens(outputs: Vec<ModelOutput>) -> EnsembleResponse {
        EnsembleResponse::new("q", outputs).unwrap()
    }

    #[test]
    fn extract_prefers_final_marker() {
        let text = "Natalia sold 48/2 = 24 clips.\nso the total is 18.\n#### 18";
        assert_eq!(extract_answer(text, TaskKind::Convergent).as_deref(), Some("18"));
        assert_eq!(
            extract_answer("#### 3\nthen again\n#### 4", TaskKind::Convergent).as_deref(),
            Some("4")
        );
    }

    #[test]
    fn extract_without_numbers_is_absent() {
        assert_eq!(extract_answer("no numbers here", TaskKind::Convergent), None);
        assert_eq!(extract_answer("   ", TaskKind::OpenEnded), None);
    }

    #[test]
    fn extract_normalizes_thousands_separator() {
        assert_eq!(
            extract_answer("The answer is 1,200 apples", TaskKind::Convergent).as_deref(),
            Some("1200")
        );
    }

    #[test]
    fn extract_uses_last_number() {
        assert_eq!(
            extract_answer("3 boxes of 4 is 12.0 total", TaskKind::Convergent).as_deref(),
            Some("12")
        );
        assert_eq!(
            extract_answer("it is 42\nConfidence: 90%", TaskKind::Convergent).as_deref(),
            Some("42")
        );
    }

    #[test]
    fn open_ended_collapses_whitespace() {
        assert_eq!(
            extract_answer("  def f():\n    return 1 ", TaskKind::OpenEnded).as_deref(),
            Some("def f(): return 1")
        );
    }

    #[test]
    fn number_normalization_rules() {
        assert_eq!(normalize_number("+1,234.500"), "1234.5");
        assert_eq!(normalize_number("18.0"), "18");
        assert_eq!(normalize_number("-0.0"), "0");
        assert_eq!(normalize_number("007"), "7");
        assert_eq!(normalize_number("-3.25"), "-3.25");
        assert_eq!(normalize_number("0.50"), "0.5");
    }

    #[test]
    fn confidence_parsing() {
        assert_eq!(parse_confidence("blah\nConfidence: 90%"), Some(0.9));
        assert_eq!(parse_confidence("no marker"), None);
        assert_eq!(parse_confidence("Confidence: 150%"), Some(1.0));
        assert_eq!(parse_confidence("confidence: 20%\nCONFIDENCE:  75.5 %"), Some(0.755));
    }

    #[test]
    fn majority_unanimous_and_modal() {
        let a = aggregate_l1_answer(
            &ens(vec![out("a", Some("4"), None), out("b", Some("4"), None), out("c", Some("4"), None)]),
            TaskKind::Convergent,
        )
        .unwrap();
        assert_eq!((a.answer.as_str(), a.support), ("4", 1.0));

        let a = aggregate_l1_answer(
            &ens(vec![out("a", Some("4"), None), out("b", Some("4"), None), out("c", Some("5"), None)]),
            TaskKind::Convergent,
        )
        .unwrap();
        assert_eq!((a.answer.as_str(), a.support), ("4", 2.0 / 3.0));
    }

    #[test]
    fn tie_breaks_by_confidence_then_order() {
        // Oracle: enumerate both orderings of the two-way tie; the
        // confidence rule must pick "5" either way.
        let x = out("a", Some("4"), Some(0.6));
        let y = out("b", Some("5"), Some(0.9));
        for outputs in [vec![x.clone(), y.clone()], vec![y.clone(), x.clone()]] {
            let a = aggregate_l1_answer(&ens(outputs), TaskKind::Convergent).unwrap();
            assert_eq!((a.answer.as_str(), a.support, a.source_model.as_str()), ("5", 0.5, "b"));
        }
        // equal confidence falls back to ensemble order
        let a = aggregate_l1_answer(
            &ens(vec![out("a", Some("9"), None), out("b", Some("8"), None)]),
            TaskKind::Convergent,
        )
        .unwrap();
        assert_eq!(a.answer, "9");
    }

    #[test]
    fn support_ignores_unanswered_outputs() {
        let a = aggregate_l1_answer(
            &ens(vec![out("a", Some("7"), None), out("b", None, None), out("c", Some("7"), None)]),
            TaskKind::Convergent,
        )
        .unwrap();
        assert_eq!(a.support, 1.0);
    }

    #[test]
    fn no_answer_is_an_error() {
        let e = aggregate_l1_answer(&ens(vec![out("a", None, None)]), TaskKind::Convergent);
        assert_eq!(e, Err(DomainError::NoAnswerAvailable));
    }

    #[test]
    fn open_ended_picks_most_confident() {
        let mk = |m: &str, t: &str| ModelOutput::from_text(m, t, TaskKind::OpenEnded, 5, 0.0);
        let mut a = mk("a", "x y z");
        a.confidence = Some(0.4);
        let b = mk("b", "x y w\nConfidence: 80%");
        let c = mk("c", "x y z");
        let agg = aggregate_l1_answer(&ens(vec![a, b, c]), TaskKind::OpenEnded).unwrap();
        assert_eq!(agg.source_model, "b");
        assert!(agg.support > 0.0 && agg.support <= 1.0);
    }

    #[test]
    fn ensemble_validation() {
        assert!(EnsembleResponse::new("q", vec![]).is_err());
        assert!(EnsembleResponse::new("", vec![out("a", Some("1"), None)]).is_err());
        assert!(EnsembleResponse::new("q", vec![out("a", Some("1"), Some(1.5))]).is_err());
    }
}

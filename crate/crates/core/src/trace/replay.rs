use serde::{Deserialize, Serialize};

use super::{TraceError, TraceRecord};
use crate::decision::{verdict_for, RoutingPolicy, Verdict};
use crate::domain::DEFAULT_CONFIDENCE;
use crate::estimator::FailureEstimator;
use crate::features::{build_feature_vector, FEATURE_NAMES};
use crate::ledger::{query_cost, summarize, CostModel, LedgerSummary, QueryRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayDecision {
    pub query_id: String,
    pub p_fail: f64,
    pub verdict: Verdict,
    pub correct: bool,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub summary: LedgerSummary,
    pub decisions: Vec<ReplayDecision>,
}

impl ReplayResult {
    pub fn escalated_ids(&self) -> impl Iterator<Item = &str> {
        self.decisions
            .iter()
            .filter(|d| d.verdict == Verdict::Escalate)
            .map(|d| d.query_id.as_str())
    }
}

/// One operating point of the anytime profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub threshold: f64,
    pub escalation_rate: f64,
    pub accuracy: f64,
    pub relative_cost: f64,
    pub mean_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// One point per grid threshold, in grid order.
    pub points: Vec<ParetoPoint>,
    /// Non-dominated points, by increasing relative cost.
    pub frontier: Vec<ParetoPoint>,
}

fn check_estimator(estimator: &FailureEstimator) -> Result<(), TraceError> {
    if estimator.feature_order.iter().map(String::as_str).ne(FEATURE_NAMES) {
        return Err(TraceError::SchemaMismatch(format!(
            "estimator feature order {:?} differs from trace features {FEATURE_NAMES:?}",
            estimator.feature_order
        )));
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<(), TraceError> {
    let in_range = grid.iter().all(|t| (0.0..=1.0).contains(t));
    let sorted = grid.windows(2).all(|w| w[0] <= w[1]);
    if grid.is_empty() || !in_range || !sorted {
        return Err(TraceError::InvalidGrid);
    }
    Ok(())
}

/// Failure probabilities for every record, in trace order.
pub fn score_traces(traces: &[TraceRecord], estimator: &FailureEstimator) -> Result<Vec<f64>, TraceError> {
    check_estimator(estimator)?;
    traces
        .iter()
        .map(|t| Ok(estimator.predict_p_fail(&build_feature_vector(&t.ensemble()?))))
        .collect()
}

// Routes every record given its score and a verdict rule.
fn route<F>(
    traces: &[TraceRecord],
    scores: &[f64],
    cost_model: &CostModel,
    first_model_only: bool,
    mut route_one: F,
) -> Result<ReplayResult, TraceError>
where
    F: FnMut(&TraceRecord, f64) -> Result<(Verdict, bool), TraceError>,
{
    cost_model.validate()?;
    let mut records = Vec::with_capacity(traces.len());
    let mut decisions = Vec::with_capacity(traces.len());
    for (t, &p_fail) in traces.iter().zip(scores) {
        let (verdict, stop_correct) = route_one(t, p_fail)?;
        let escalated = verdict == Verdict::Escalate;
        let used = if first_model_only { &t.l1_outputs[..1] } else { &t.l1_outputs[..] };
        let usage: Vec<(&str, u64)> = used.iter().map(|o| (o.model_id.as_str(), o.output_tokens)).collect();
        let cost = query_cost(
            &t.query.id,
            verdict,
            &usage,
            escalated.then_some(t.l2_output_tokens),
            cost_model,
        )?;
        let correct = if escalated { t.l2_correct } else { stop_correct };
        decisions.push(ReplayDecision {
            query_id: t.query.id.clone(),
            p_fail,
            verdict,
            correct,
            cost: cost.total,
        });
        records.push(QueryRecord {
            query_id: t.query.id.clone(),
            verdict,
            cost,
            oracle_tokens: Some(t.l2_output_tokens),
            oracle_latency: escalated.then_some(t.l2_latency),
            l1_latency: used.iter().map(|o| o.latency).fold(0.0, f64::max),
            correct: Some(correct),
            degraded: false,
        });
    }
    Ok(ReplayResult {
        summary: summarize(&records, cost_model)?,
        decisions,
    })
}

/// Replays at `threshold` using precomputed failure probabilities.
pub fn replay_with_scores(
    traces: &[TraceRecord],
    scores: &[f64],
    threshold: f64,
    cost_model: &CostModel,
) -> Result<ReplayResult, TraceError> {
    route(traces, scores, cost_model, false, |t, p| {
        Ok((verdict_for(p, threshold), t.l1_aggregated_correct))
    })
}

/// Routes every trace record through the estimator and the escalation rule.
/// Stopped queries score the recorded Layer-1 outcome, escalated ones the
/// recorded Oracle outcome.
pub fn replay(
    traces: &[TraceRecord],
    estimator: &FailureEstimator,
    policy: &RoutingPolicy,
    cost_model: &CostModel,
) -> Result<ReplayResult, TraceError> {
    policy
        .validate()
        .map_err(|e| TraceError::InvalidParams(e.to_string()))?;
    let scores = score_traces(traces, estimator)?;
    replay_with_scores(traces, &scores, policy.threshold_t, cost_model)
}

fn point(threshold: f64, s: &LedgerSummary) -> ParetoPoint {
    ParetoPoint {
        threshold,
        escalation_rate: s.escalation_rate,
        accuracy: s.accuracy.unwrap_or(0.0),
        relative_cost: s.relative_cost,
        mean_latency: s.mean_latency,
    }
}

/// Keeps points not dominated in (lower relative cost, higher accuracy).
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.relative_cost
            .total_cmp(&b.relative_cost)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then(a.threshold.total_cmp(&b.threshold))
    });
    let mut frontier: Vec<ParetoPoint> = Vec::new();
    for p in sorted {
        if frontier.last().is_none_or(|best| p.accuracy > best.accuracy) {
            frontier.push(p);
        }
    }
    frontier
}

/// Replays the traces at every grid threshold. The estimator runs once per
/// record; only the verdicts change across the grid.
pub fn sweep_thresholds(
    traces: &[TraceRecord],
    estimator: &FailureEstimator,
    grid: &[f64],
    cost_model: &CostModel,
) -> Result<SweepResult, TraceError> {
    check_grid(grid)?;
    let scores = score_traces(traces, estimator)?;
    let points = grid
        .iter()
        .map(|&t| Ok(point(t, &replay_with_scores(traces, &scores, t, cost_model)?.summary)))
        .collect::<Result<Vec<_>, TraceError>>()?;
    Ok(SweepResult {
        frontier: pareto_frontier(&points),
        points,
    })
}

fn first_output_outcome(t: &TraceRecord) -> Result<(f64, bool), TraceError> {
    let first = t
        .l1_outputs
        .first()
        .ok_or_else(|| TraceError::SchemaMismatch(format!("record {} has no layer-1 outputs", t.query.id)))?;
    let gold = t.query.gold_answer.as_ref().ok_or_else(|| {
        TraceError::SchemaMismatch(format!("record {} lacks a gold answer for cascade scoring", t.query.id))
    })?;
    let confidence = first.confidence.unwrap_or(DEFAULT_CONFIDENCE);
    Ok((confidence, first.extracted_answer.as_ref() == Some(gold)))
}

/// Single-model confidence cascade: keep the first Layer-1 model's answer
/// unless its self-reported confidence is below `confidence_threshold`. Only
/// the first model's tokens and latency are billed.
pub fn baseline_confidence_cascade(
    traces: &[TraceRecord],
    confidence_threshold: f64,
    cost_model: &CostModel,
) -> Result<ReplayResult, TraceError> {
    let outcomes = traces.iter().map(first_output_outcome).collect::<Result<Vec<_>, _>>()?;
    let confidences: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    let mut next = outcomes.iter().map(|o| o.1);
    route(traces, &confidences, cost_model, true, |_, confidence| {
        let correct = next.next().expect("one outcome per record");
        let verdict = if confidence < confidence_threshold {
            Verdict::Escalate
        } else {
            Verdict::Stop
        };
        Ok((verdict, correct))
    })
}

/// Cascade operating points over a grid of confidence thresholds.
pub fn sweep_confidence_cascade(
    traces: &[TraceRecord],
    grid: &[f64],
    cost_model: &CostModel,
) -> Result<SweepResult, TraceError> {
    if grid.is_empty() {
        return Err(TraceError::InvalidGrid);
    }
    let points = grid
        .iter()
        .map(|&t| Ok(point(t, &baseline_confidence_cascade(traces, t, cost_model)?.summary)))
        .collect::<Result<Vec<_>, TraceError>>()?;
    Ok(SweepResult {
        frontier: pareto_frontier(&points),
        points,
    })
}

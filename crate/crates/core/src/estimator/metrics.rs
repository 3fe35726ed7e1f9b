//! Evaluation metrics for failure estimators. The positive class is
//! "Layer 1 failed"; a prediction is positive when `p_fail > threshold`,
//! matching the escalation rule.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{FailureEstimator, LabeledExample};
use crate::numeric::exact_sum;

pub const ECE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub decision_threshold: f64,
    pub accuracy: f64,
    /// `None` when no example was predicted positive.
    pub precision: Option<f64>,
    /// `None` when the data holds no positives.
    pub recall: Option<f64>,
    /// `None` unless both classes are present.
    pub auc: Option<f64>,
    pub ece: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n={} threshold={}", self.n, self.decision_threshold)?;
        writeln!(
            f,
            "accuracy={:.4} precision={} recall={} auc={} ece={:.4}",
            self.accuracy,
            fmt_metric(self.precision),
            fmt_metric(self.recall),
            fmt_metric(self.auc),
            self.ece
        )?;
        write!(f, "confusion: tp={} fp={} tn={} fn={}", self.tp, self.fp, self.tn, self.fn_)
    }
}

/// Confusion counts and derived metrics for precomputed scores.
pub fn report_from_scores(scores: &[f64], labels: &[bool], decision_threshold: f64) -> EvalReport {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s > decision_threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = scores.len();
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    EvalReport {
        n,
        decision_threshold,
        accuracy: ratio(tp + tn, n).unwrap_or(0.0),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        auc: auc(scores, labels),
        ece: expected_calibration_error(scores, labels, ECE_BINS),
        tp,
        fp,
        tn,
        fn_,
    }
}

pub fn evaluate(estimator: &FailureEstimator, data: &[LabeledExample], decision_threshold: f64) -> EvalReport {
    let scores: Vec<f64> = data.iter().map(|e| estimator.predict_p_fail(&e.features)).collect();
    let labels: Vec<bool> = data.iter().map(|e| e.label).collect();
    report_from_scores(&scores, &labels, decision_threshold)
}

/// Area under the ROC curve via the Mann-Whitney rank statistic, with tied
/// scores receiving their average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 2*rank for positives keeps midranks integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the midrank (i+j+2)/2
        let twice_mid = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // U = rank_sum - p(p+1)/2, scaled by 2
    let twice_u = twice_rank_sum - p * (p + 1);
    Some(twice_u as f64 / (2 * p * q) as f64)
}

/// Equal-width binned calibration error: sum over bins of
/// `(bin_size / n) * |failure_rate - mean_score|`.
pub fn expected_calibration_error(scores: &[f64], labels: &[bool], bins: usize) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, &s) in scores.iter().enumerate() {
        let b = ((s * bins as f64).floor() as usize).min(bins - 1);
        members[b].push(i);
    }
    let n = scores.len() as f64;
    let terms = members.iter().filter(|m| !m.is_empty()).map(|m| {
        let size = m.len() as f64;
        let rate = m.iter().filter(|&&i| labels[i]).count() as f64 / size;
        let mean = exact_sum(m.iter().map(|&i| scores[i])) / size;
        size / n * (rate - mean).abs()
    });
    exact_sum(terms)
}

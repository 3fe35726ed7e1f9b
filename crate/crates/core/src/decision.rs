//! Value-of-computation escalation rule.
//!
//! Stopping at Layer 1 is worth `(1 - p_fail) * u_correct`; escalating is
//! worth `oracle_success_prob * u_correct - c_esc`. Escalation is optimal
//! once `p_fail` exceeds `1 - oracle_success_prob + c_esc / u_correct`, which
//! with a perfect oracle reduces to the cost ratio `c_esc / u_correct`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::AggregatedAnswer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecisionError {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("verdict is stop but no Layer-1 answer is available")]
    MissingAnswer,
}

fn check(name: &'static str, value: f64, domain: &'static str, ok: bool) -> Result<(), DecisionError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(DecisionError::Domain { name, value, domain })
    }
}

fn check_p_fail(p_fail: f64) -> Result<(), DecisionError> {
    check("p_fail", p_fail, "[0, 1]", (0.0..=1.0).contains(&p_fail))
}

fn check_costs(u_correct: f64, c_esc: f64, oracle_success_prob: f64) -> Result<(), DecisionError> {
    check("u_correct", u_correct, "(0, inf)", u_correct > 0.0)?;
    check("c_esc", c_esc, "[0, inf)", c_esc >= 0.0)?;
    check(
        "oracle_success_prob",
        oracle_success_prob,
        "(0, 1]",
        oracle_success_prob > 0.0 && oracle_success_prob <= 1.0,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingPolicy {
    pub threshold_t: f64,
    pub u_correct: f64,
    pub c_esc: f64,
    #[serde(default = "default_oracle_success_prob")]
    pub oracle_success_prob: f64,
}

fn default_oracle_success_prob() -> f64 {
    1.0
}

/// Operating threshold reported for the reference deployment.
pub const REFERENCE_THRESHOLD: f64 = 0.70;

impl Default for RoutingPolicy {
    fn default() -> Self {
        RoutingPolicy {
            threshold_t: REFERENCE_THRESHOLD,
            u_correct: 1.0,
            c_esc: 0.3,
            oracle_success_prob: 1.0,
        }
    }
}

impl RoutingPolicy {
    /// Policy whose threshold is derived from its own costs.
    pub fn from_costs(u_correct: f64, c_esc: f64, oracle_success_prob: f64) -> Result<Self, DecisionError> {
        Ok(RoutingPolicy {
            threshold_t: threshold_from_costs(u_correct, c_esc, oracle_success_prob)?,
            u_correct,
            c_esc,
            oracle_success_prob,
        })
    }

    pub fn with_threshold(self, threshold_t: f64) -> Self {
        RoutingPolicy { threshold_t, ..self }
    }

    pub fn validate(&self) -> Result<(), DecisionError> {
        check(
            "threshold_t",
            self.threshold_t,
            "[0, 1]",
            (0.0..=1.0).contains(&self.threshold_t),
        )?;
        check_costs(self.u_correct, self.c_esc, self.oracle_success_prob)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stop,
    Escalate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub verdict: Verdict,
    pub p_fail: f64,
    pub threshold: f64,
    pub expected_utility_stop: f64,
    pub expected_utility_escalate: f64,
    /// Present iff the verdict is stop.
    pub chosen_answer: Option<AggregatedAnswer>,
}

pub fn expected_utility_stop(p_fail: f64, u_correct: f64) -> Result<f64, DecisionError> {
    check_p_fail(p_fail)?;
    check("u_correct", u_correct, "(0, inf)", u_correct > 0.0)?;
    Ok((1.0 - p_fail) * u_correct)
}

pub fn expected_utility_escalate(
    u_correct: f64,
    c_esc: f64,
    oracle_success_prob: f64,
) -> Result<f64, DecisionError> {
    check_costs(u_correct, c_esc, oracle_success_prob)?;
    Ok(oracle_success_prob * u_correct - c_esc)
}

/// The failure probability above which escalating beats stopping.
pub fn threshold_from_costs(u_correct: f64, c_esc: f64, oracle_success_prob: f64) -> Result<f64, DecisionError> {
    check_costs(u_correct, c_esc, oracle_success_prob)?;
    let ratio = c_esc / u_correct;
    let t = if oracle_success_prob == 1.0 {
        ratio
    } else {
        1.0 - oracle_success_prob + ratio
    };
    Ok(t.clamp(0.0, 1.0))
}

/// Escalates iff `p_fail > policy.threshold_t`; the boundary stops.
pub fn decide(
    p_fail: f64,
    policy: &RoutingPolicy,
    l1_answer: Option<AggregatedAnswer>,
) -> Result<RoutingDecision, DecisionError> {
    check_p_fail(p_fail)?;
    policy.validate()?;
    let verdict = if p_fail > policy.threshold_t {
        Verdict::Escalate
    } else {
        Verdict::Stop
    };
    let chosen_answer = match verdict {
        Verdict::Stop => Some(l1_answer.ok_or(DecisionError::MissingAnswer)?),
        Verdict::Escalate => None,
    };
    Ok(RoutingDecision {
        verdict,
        p_fail,
        threshold: policy.threshold_t,
        expected_utility_stop: expected_utility_stop(p_fail, policy.u_correct)?,
        expected_utility_escalate: expected_utility_escalate(
            policy.u_correct,
            policy.c_esc,
            policy.oracle_success_prob,
        )?,
        chosen_answer,
    })
}

/// Verdict only, for sweeps that do not need the full decision record.
pub fn verdict_for(p_fail: f64, threshold: f64) -> Verdict {
    if p_fail > threshold {
        Verdict::Escalate
    } else {
        Verdict::Stop
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn answer() -> Option<AggregatedAnswer> {
        Some(AggregatedAnswer {
            answer: "1".into(),
            support: 1.0,
            source_model: "m".into(),
        })
    }

    fn policy(t: f64) -> RoutingPolicy {
        RoutingPolicy::default().with_threshold(t)
    }

    #[test]
    fn utility_of_stopping() {
        assert_eq!(expected_utility_stop(0.0, 1.0).unwrap(), 1.0);
        assert_eq!(expected_utility_stop(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(expected_utility_stop(0.2, 1.0).unwrap(), 0.8);
        assert!(expected_utility_stop(1.2, 1.0).is_err());
        assert!(expected_utility_stop(-0.1, 1.0).is_err());
    }

    #[test]
    fn utility_of_escalating() {
        assert_eq!(expected_utility_escalate(1.0, 0.3, 1.0).unwrap(), 0.7);
        assert_eq!(expected_utility_escalate(1.0, 0.0, 1.0).unwrap(), 1.0);
        assert!((expected_utility_escalate(1.0, 0.3, 0.9).unwrap() - 0.6).abs() < 1e-15);
        assert!(expected_utility_escalate(1.0, 0.3, 0.0).is_err());
        assert!(expected_utility_escalate(0.0, 0.3, 1.0).is_err());
        assert!(expected_utility_escalate(1.0, -0.1, 1.0).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_from_costs(1.0, 0.3, 1.0).unwrap(), 0.3);
        assert_eq!(threshold_from_costs(1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((threshold_from_costs(1.0, 0.3, 0.9).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(threshold_from_costs(1.0, 5.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn generalized_threshold_matches_grid_crossing() {
        // brute force: first grid point where escalating strictly wins
        let (u, c, p2) = (1.0, 0.3, 0.9);
        let t = threshold_from_costs(u, c, p2).unwrap();
        let step = 1e-4;
        let crossing = (0..=10_000)
            .map(|i| i as f64 * step)
            .find(|&p| expected_utility_escalate(u, c, p2).unwrap() > expected_utility_stop(p, u).unwrap())
            .unwrap();
        assert!((crossing - t).abs() <= step + 1e-12);
    }

    #[test]
    fn decide_examples() {
        let d = decide(0.75, &policy(0.70), None).unwrap();
        assert_eq!(d.verdict, Verdict::Escalate);
        assert!(d.chosen_answer.is_none());
        let d = decide(0.70, &policy(0.70), answer()).unwrap();
        assert_eq!(d.verdict, Verdict::Stop);
        assert_eq!(d.chosen_answer, answer());
        assert_eq!(decide(0.0, &policy(0.0), answer()).unwrap().verdict, Verdict::Stop);
        assert_eq!(decide(0.2, &policy(0.7), None), Err(DecisionError::MissingAnswer));
        assert!(decide(1.5, &policy(0.7), answer()).is_err());
    }

    #[test]
    fn decisions_carry_both_utilities() {
        let d = decide(0.2, &policy(0.7), answer()).unwrap();
        assert_eq!(d.expected_utility_stop, 0.8);
        assert_eq!(d.expected_utility_escalate, 0.7);
    }

    proptest! {
        #[test]
        fn stop_region_is_downward_closed(p in 0.0f64..=1.0, q in 0.0f64..=1.0, t in 0.0f64..=1.0) {
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            if decide(hi, &policy(t), answer()).unwrap().verdict == Verdict::Stop {
                prop_assert_eq!(decide(lo, &policy(t), answer()).unwrap().verdict, Verdict::Stop);
            }
        }

        #[test]
        fn verdict_depends_only_on_cost_ratio(
            p in 0u32..=64, c in 0u32..=64, k in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0, 8.0]),
        ) {
            // dyadic grid keeps the comparison exact
            let (p, c) = (p as f64 / 64.0, c as f64 / 64.0);
            let base = RoutingPolicy::from_costs(1.0, c, 1.0).unwrap();
            let scaled = RoutingPolicy::from_costs(k, c * k, 1.0).unwrap();
            prop_assert_eq!(
                decide(p, &base, answer()).unwrap().verdict,
                decide(p, &scaled, answer()).unwrap().verdict
            );
        }
    }
}

//! Per-query cost accounting and aggregate summaries (escalation rate,
//! relative cost versus an Oracle-only deployment, latency overhead).
//!
//! Costs are per 1k output tokens. Totals use exactly rounded summation, so a
//! summary does not depend on the order records were appended in.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::Verdict;
use crate::numeric::exact_sum;

/// Latency overhead measured for the reference deployment, used as the
/// default router overhead.
pub const REFERENCE_ROUTER_OVERHEAD: f64 = 0.82;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("query {0} escalated without an oracle token count")]
    MissingUsage(String),
    #[error("query {0} stopped but carries billed oracle usage")]
    UnexpectedUsage(String),
    #[error("no unit cost configured for model {0}")]
    UnknownModel(String),
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("ledger is empty")]
    EmptyLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Cost per 1k output tokens for each Layer-1 model.
    #[serde(default)]
    pub l1_unit_costs: BTreeMap<String, f64>,
    /// Fallback for Layer-1 models missing from `l1_unit_costs`.
    #[serde(default)]
    pub l1_default_unit_cost: Option<f64>,
    pub l2_unit_cost: f64,
    #[serde(default)]
    pub count_l1_in_total: bool,
    #[serde(default = "default_router_overhead")]
    pub router_overhead_latency: f64,
    /// Oracle tokens assumed per query when no query escalated.
    #[serde(default = "default_oracle_tokens")]
    pub default_oracle_tokens: u64,
}

fn default_router_overhead() -> f64 {
    REFERENCE_ROUTER_OVERHEAD
}

fn default_oracle_tokens() -> u64 {
    300
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            l1_unit_costs: BTreeMap::new(),
            l1_default_unit_cost: Some(0.2),
            l2_unit_cost: 8.0,
            count_l1_in_total: false,
            router_overhead_latency: REFERENCE_ROUTER_OVERHEAD,
            default_oracle_tokens: default_oracle_tokens(),
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), LedgerError> {
        let bad = |m: &str| Err(LedgerError::InvalidCostModel(m.to_string()));
        if !(self.l2_unit_cost > 0.0 && self.l2_unit_cost.is_finite()) {
            return bad("l2_unit_cost must be positive and finite");
        }
        let l1 = self.l1_unit_costs.values().chain(self.l1_default_unit_cost.as_ref());
        if l1.into_iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return bad("layer-1 unit costs must be finite and nonnegative");
        }
        if !(self.router_overhead_latency >= 0.0 && self.router_overhead_latency.is_finite()) {
            return bad("router_overhead_latency must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn l1_unit_cost(&self, model_id: &str) -> Result<f64, LedgerError> {
        self.l1_unit_costs
            .get(model_id)
            .copied()
            .or(self.l1_default_unit_cost)
            .ok_or_else(|| LedgerError::UnknownModel(model_id.to_string()))
    }

    pub fn oracle_cost(&self, tokens: u64) -> f64 {
        tokens as f64 / 1000.0 * self.l2_unit_cost
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryCost {
    /// Layer-1 spend, whether or not it counts toward `total`.
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

/// Cost of one routed query. `l1_usage` holds (model_id, output_tokens).
pub fn query_cost(
    query_id: &str,
    verdict: Verdict,
    l1_usage: &[(&str, u64)],
    oracle_tokens: Option<u64>,
    model: &CostModel,
) -> Result<QueryCost, LedgerError> {
    let l2 = match (verdict, oracle_tokens) {
        (Verdict::Escalate, Some(t)) => model.oracle_cost(t),
        (Verdict::Escalate, None) => return Err(LedgerError::MissingUsage(query_id.to_string())),
        (Verdict::Stop, Some(_)) => return Err(LedgerError::UnexpectedUsage(query_id.to_string())),
        (Verdict::Stop, None) => 0.0,
    };
    let l1_terms = l1_usage
        .iter()
        .map(|(m, t)| Ok(*t as f64 / 1000.0 * model.l1_unit_cost(m)?))
        .collect::<Result<Vec<f64>, LedgerError>>()?;
    let l1 = exact_sum(l1_terms);
    let total = if model.count_l1_in_total { exact_sum([l1, l2]) } else { l2 };
    Ok(QueryCost { l1, l2, total })
}

/// One routed query as seen by the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub verdict: Verdict,
    pub cost: QueryCost,
    /// Oracle output volume for this query, when known. Escalated queries
    /// always carry it; offline traces carry it for every query.
    pub oracle_tokens: Option<u64>,
    /// Oracle latency, present only when the Oracle was actually called.
    pub oracle_latency: Option<f64>,
    /// Slowest Layer-1 backend, i.e. fan-out wall time.
    pub l1_latency: f64,
    pub correct: Option<bool>,
    #[serde(default)]
    pub degraded: bool,
}

/// Which oracle token volumes the Oracle-only denominator was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleCostBasis {
    /// Every query carried a recorded oracle volume.
    Recorded,
    /// Queries without a volume used the mean over escalated queries.
    MeanEscalated,
    /// Nothing escalated; the configured default volume was used.
    ConfiguredDefault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub n_queries: usize,
    pub escalation_rate: f64,
    pub total_cost: f64,
    pub oracle_only_cost: f64,
    pub relative_cost: f64,
    /// `1 / relative_cost`; "unbounded" when nothing was spent.
    #[serde(with = "factor_serde")]
    pub cost_reduction_factor: Option<f64>,
    pub cost_savings: f64,
    pub mean_latency_overhead: f64,
    pub accuracy: Option<f64>,
    pub count_l1_in_total: bool,
    pub l1_cost: f64,
    pub l2_cost: f64,
    /// Relative cost under the opposite Layer-1 convention.
    pub relative_cost_alternate: f64,
    pub oracle_cost_basis: OracleCostBasis,
    /// Mean end-to-end latency: fan-out, router overhead and Oracle call.
    pub mean_latency: f64,
    pub degraded: usize,
}

mod factor_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    const UNBOUNDED: &str = "unbounded";

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str(UNBOUNDED),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Text(t) if t == UNBOUNDED => Ok(None),
            Raw::Text(t) => t.parse().map(Some).map_err(serde::de::Error::custom),
        }
    }
}

/// Append-only record store. Appends need a single writer; summaries read a
/// snapshot.
#[derive(Debug, Clone)]
pub struct Ledger {
    cost_model: CostModel,
    records: Vec<QueryRecord>,
}

impl Ledger {
    pub fn new(cost_model: CostModel) -> Result<Self, LedgerError> {
        cost_model.validate()?;
        Ok(Ledger {
            cost_model,
            records: Vec::new(),
        })
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost_model
    }

    pub fn append(&mut self, record: QueryRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[QueryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn summarize(&self) -> Result<LedgerSummary, LedgerError> {
        summarize(&self.records, &self.cost_model)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn summarize(records: &[QueryRecord], model: &CostModel) -> Result<LedgerSummary, LedgerError> {
    if records.is_empty() {
        return Err(LedgerError::EmptyLedger);
    }
    let n = records.len();
    let escalated: Vec<&QueryRecord> = records.iter().filter(|r| r.verdict == Verdict::Escalate).collect();
    let escalation_rate = escalated.len() as f64 / n as f64;

    let l1_cost = exact_sum(records.iter().map(|r| r.cost.l1));
    let l2_cost = exact_sum(records.iter().map(|r| r.cost.l2));
    let total_cost = exact_sum(records.iter().map(|r| r.cost.total));

    let escalated_tokens: Vec<f64> = escalated.iter().filter_map(|r| r.oracle_tokens).map(|t| t as f64).collect();
    let all_recorded = records.iter().all(|r| r.oracle_tokens.is_some());
    let (fallback_tokens, oracle_cost_basis) = if all_recorded {
        (0.0, OracleCostBasis::Recorded)
    } else if !escalated_tokens.is_empty() {
        let mean = exact_sum(escalated_tokens.iter().copied()) / escalated_tokens.len() as f64;
        (mean, OracleCostBasis::MeanEscalated)
    } else {
        (model.default_oracle_tokens as f64, OracleCostBasis::ConfiguredDefault)
    };
    let oracle_only_cost = exact_sum(records.iter().map(|r| {
        let tokens = r.oracle_tokens.map_or(fallback_tokens, |t| t as f64);
        tokens / 1000.0 * model.l2_unit_cost
    }));

    let relative_cost = ratio(total_cost, oracle_only_cost);
    let alternate_total = if model.count_l1_in_total {
        l2_cost
    } else {
        exact_sum([l1_cost, l2_cost])
    };
    let overhead = model.router_overhead_latency;
    let overheads: Vec<f64> = records.iter().map(|r| overhead + r.oracle_latency.unwrap_or(0.0)).collect();
    let end_to_end: Vec<f64> = records
        .iter()
        .zip(&overheads)
        .map(|(r, o)| r.l1_latency + o)
        .collect();
    let graded: Vec<bool> = records.iter().filter_map(|r| r.correct).collect();
    let accuracy = (graded.len() == n).then(|| graded.iter().filter(|&&c| c).count() as f64 / n as f64);

    Ok(LedgerSummary {
        n_queries: n,
        escalation_rate,
        total_cost,
        oracle_only_cost,
        relative_cost,
        cost_reduction_factor: (relative_cost > 0.0).then(|| 1.0 / relative_cost),
        cost_savings: 1.0 - relative_cost,
        mean_latency_overhead: exact_sum(overheads.iter().copied()) / n as f64,
        accuracy,
        count_l1_in_total: model.count_l1_in_total,
        l1_cost,
        l2_cost,
        relative_cost_alternate: ratio(alternate_total, oracle_only_cost),
        oracle_cost_basis,
        mean_latency: exact_sum(end_to_end) / n as f64,
        degraded: records.iter().filter(|r| r.degraded).count(),
    })
}

impl LedgerSummary {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(self).expect("summary serializes");
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf8")
    }
}

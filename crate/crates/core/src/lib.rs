//! Cost-aware two-tier cascade routing.
//!
//! Every query first goes to an ensemble of cheap Layer-1 models. The router
//! turns their agreement, length spread and self-reported confidence into a
//! failure probability, and escalates to the expensive Layer-2 model only
//! when that probability exceeds a threshold derived from the relative cost
//! of escalation.
//!
//! Data flows `domain` → `features` → `estimator` → `decision`, with
//! `ledger` accounting costs. `trace` replays labeled traces offline and
//! `gateway` serves the same pipeline over HTTP.

pub mod cli;
pub mod decision;
pub mod domain;
pub mod estimator;
pub mod features;
pub mod gateway;
pub mod ledger;
pub mod numeric;
pub mod trace;

pub use decision::{decide, RoutingDecision, RoutingPolicy, Verdict};
pub use domain::{aggregate_l1_answer, AggregatedAnswer, EnsembleResponse, ModelOutput, Query, TaskKind};
pub use estimator::{EstimatorKind, FailureEstimator, LabeledExample};
pub use features::{build_feature_vector, FeatureVector};
pub use ledger::{CostModel, LedgerSummary};
pub use trace::{ParetoPoint, TraceRecord};

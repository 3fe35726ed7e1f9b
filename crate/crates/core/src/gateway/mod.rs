//! Online router: fans a prompt out to the Layer-1 backends, scores the
//! ensemble, and calls the Layer-2 backend only when the policy says so.

mod backend;
mod config;
mod mock;
mod server;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{
    decide, expected_utility_escalate, expected_utility_stop, DecisionError, RoutingDecision, RoutingPolicy, Verdict,
};
use crate::domain::{aggregate_l1_answer, AggregatedAnswer, EnsembleResponse, ModelOutput, TaskKind};
use crate::estimator::{EstimatorError, FailureEstimator};
use crate::features::{build_feature_vector, FeatureVector};
use crate::ledger::{query_cost, Ledger, LedgerError, LedgerSummary, QueryCost, QueryRecord};
use crate::trace::write_atomic;

pub use backend::{BackendClient, BackendError, Completion};
pub use config::{default_preamble, BackendConfig, GatewayConfig, Tier, CONFIDENCE_INSTRUCTION};
pub use mock::{MockHandle, MockReply, MockScript};
pub use server::{router, serve, start, start_with_estimator, RunningGateway};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("every layer-1 backend failed: {}", .0.join("; "))]
    AllBackendsFailed(Vec<String>),
    #[error("layer-2 backend failed and no layer-1 answer is available: {0}")]
    OracleUnavailable(String),
    #[error("internal: {0}")]
    Internal(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<LedgerError> for GatewayError {
    fn from(e: LedgerError) -> Self {
        GatewayError::Internal(e.to_string())
    }
}

impl From<DecisionError> for GatewayError {
    fn from(e: DecisionError) -> Self {
        GatewayError::Internal(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteRequest {
    pub prompt: String,
    #[serde(default)]
    pub task_kind: Option<TaskKind>,
    #[serde(default)]
    pub threshold_override: Option<f64>,
    /// Generated as `req-<n>` when absent.
    #[serde(default)]
    pub query_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStatus {
    Ok,
    Timeout,
    Error,
}

/// Outcome of one backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendCall {
    pub model_id: String,
    pub status: CallStatus,
    pub latency: f64,
    pub output_tokens: Option<u64>,
    pub error: Option<String>,
}

impl BackendCall {
    fn from_result(model_id: &str, started: Instant, r: &Result<Completion, BackendError>) -> Self {
        match r {
            Ok(c) => BackendCall {
                model_id: model_id.to_string(),
                status: CallStatus::Ok,
                latency: c.latency,
                output_tokens: Some(c.output_tokens),
                error: None,
            },
            Err(e) => BackendCall {
                model_id: model_id.to_string(),
                status: if matches!(e, BackendError::Timeout(_)) {
                    CallStatus::Timeout
                } else {
                    CallStatus::Error
                },
                latency: started.elapsed().as_secs_f64(),
                output_tokens: None,
                error: Some(e.to_string()),
            },
        }
    }
}

/// Everything needed to reconstruct a routing decision. Also the audit log
/// line format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResponse {
    pub query_id: String,
    /// The aggregated Layer-1 answer on stop, the Oracle's full text on
    /// escalate.
    pub answer: String,
    /// Model whose output is served.
    pub answer_source: String,
    pub verdict: Verdict,
    pub p_fail: f64,
    pub threshold: f64,
    pub features: FeatureVector,
    pub expected_utility_stop: f64,
    pub expected_utility_escalate: f64,
    pub l1_answer: Option<AggregatedAnswer>,
    /// Layer-1 outputs that arrived, in configuration order.
    pub l1_outputs: Vec<ModelOutput>,
    pub layer1: Vec<BackendCall>,
    pub layer2: Option<BackendCall>,
    pub cost: QueryCost,
    pub estimator_id: String,
    pub policy: RoutingPolicy,
    /// Escalated because no Layer-1 output yielded an answer.
    pub forced_escalation: bool,
    /// The Oracle failed and the Layer-1 answer was served instead.
    pub degraded: bool,
    pub fan_out_latency: f64,
    /// Time spent on features, prediction and the decision.
    pub router_latency: f64,
    pub total_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendHealth {
    pub model_id: String,
    pub tier: Tier,
    pub endpoint: String,
    /// Status of the most recent call; `None` before the first call.
    pub last_status: Option<CallStatus>,
    pub calls: u64,
    pub failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub status: String,
    pub estimator_id: String,
    pub policy: RoutingPolicy,
    pub backends: Vec<BackendHealth>,
}

pub struct Gateway {
    estimator: FailureEstimator,
    estimator_id: String,
    policy: RoutingPolicy,
    default_task_kind: TaskKind,
    layer1: Vec<BackendClient>,
    layer2: BackendClient,
    ledger: Mutex<Ledger>,
    audit: Option<Mutex<std::fs::File>>,
    ledger_path: Option<std::path::PathBuf>,
    health: Mutex<BTreeMap<String, BackendHealth>>,
    next_id: AtomicU64,
}

impl Gateway {
    pub fn new(config: &GatewayConfig, estimator: FailureEstimator) -> Result<Self, GatewayError> {
        config.validate()?;
        estimator.validate()?;
        let http = reqwest::Client::builder()
            .build()
            .map_err(|e| GatewayError::Internal(e.to_string()))?;
        let mut layer1 = Vec::new();
        let mut layer2 = None;
        for b in &config.backends {
            let client = BackendClient::new(b.clone(), http.clone());
            match b.tier {
                Tier::Layer1 => layer1.push(client),
                Tier::Layer2 => layer2 = Some(client),
            }
        }
        let layer2 = layer2.ok_or_else(|| GatewayError::Config(vec!["no layer2 backend".into()]))?;
        let audit = match &config.audit_log {
            Some(p) => Some(Mutex::new(
                std::fs::OpenOptions::new().create(true).append(true).open(p)?,
            )),
            None => None,
        };
        let health = config
            .backends
            .iter()
            .map(|b| {
                let h = BackendHealth {
                    model_id: b.model_id.clone(),
                    tier: b.tier,
                    endpoint: if b.mock.is_some() && b.endpoint.is_empty() {
                        "mock".into()
                    } else {
                        b.endpoint.clone()
                    },
                    last_status: None,
                    calls: 0,
                    failures: 0,
                };
                (b.model_id.clone(), h)
            })
            .collect();
        Ok(Gateway {
            estimator_id: estimator.fingerprint(),
            estimator,
            policy: config.policy,
            default_task_kind: config.default_task_kind,
            layer1,
            layer2,
            ledger: Mutex::new(Ledger::new(config.cost_model())?),
            audit,
            ledger_path: config.ledger_path.clone(),
            health: Mutex::new(health),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn estimator_id(&self) -> &str {
        &self.estimator_id
    }

    fn note(&self, call: &BackendCall) {
        let mut health = self.health.lock().expect("health lock");
        if let Some(h) = health.get_mut(&call.model_id) {
            h.calls += 1;
            if call.status != CallStatus::Ok {
                h.failures += 1;
            }
            h.last_status = Some(call.status);
        }
    }

    /// Calls every Layer-1 backend concurrently. Returns per-backend call
    /// records and the outputs that arrived, both in configuration order,
    /// plus the wall time of the whole fan-out.
    pub async fn fan_out(&self, prompt: &str, task_kind: TaskKind) -> (Vec<BackendCall>, Vec<ModelOutput>, f64) {
        let started = Instant::now();
        let results = futures::future::join_all(self.layer1.iter().map(|c| c.complete(prompt))).await;
        let wall = started.elapsed().as_secs_f64();
        let mut calls = Vec::with_capacity(results.len());
        let mut outputs = Vec::new();
        for (client, r) in self.layer1.iter().zip(&results) {
            let call = BackendCall::from_result(client.model_id(), started, r);
            self.note(&call);
            calls.push(call);
            if let Ok(c) = r {
                outputs.push(ModelOutput::from_text(
                    client.model_id(),
                    c.text.clone(),
                    task_kind,
                    c.output_tokens,
                    c.latency,
                ));
            }
        }
        (calls, outputs, wall)
    }

    pub async fn handle(&self, req: RouteRequest) -> Result<RouteResponse, GatewayError> {
        let started = Instant::now();
        let policy = match req.threshold_override {
            Some(t) => {
                let p = self.policy.with_threshold(t);
                p.validate().map_err(|e| GatewayError::BadRequest(e.to_string()))?;
                p
            }
            None => self.policy,
        };
        if let Some(id) = &req.query_id {
            if id.is_empty() {
                return Err(GatewayError::BadRequest("query_id must be nonempty".into()));
            }
        }
        let task_kind = req.task_kind.unwrap_or(self.default_task_kind);
        let query_id = req
            .query_id
            .clone()
            .unwrap_or_else(|| format!("req-{}", self.next_id.fetch_add(1, Ordering::SeqCst)));

        let (layer1, outputs, fan_out_latency) = self.fan_out(&req.prompt, task_kind).await;
        if outputs.is_empty() {
            let reasons = layer1
                .iter()
                .map(|c| format!("{}: {}", c.model_id, c.error.as_deref().unwrap_or("failed")))
                .collect();
            return Err(GatewayError::AllBackendsFailed(reasons));
        }

        let routing_started = Instant::now();
        let ensemble = EnsembleResponse::new(query_id.clone(), outputs)
            .map_err(|e| GatewayError::Internal(e.to_string()))?;
        let features = build_feature_vector(&ensemble);
        let p_fail = self.estimator.predict_p_fail(&features);
        let l1_answer = aggregate_l1_answer(&ensemble, task_kind).ok();
        let forced_escalation = l1_answer.is_none() && p_fail <= policy.threshold_t;
        let decision = if forced_escalation {
            // nothing to stop with
            RoutingDecision {
                verdict: Verdict::Escalate,
                p_fail,
                threshold: policy.threshold_t,
                expected_utility_stop: expected_utility_stop(p_fail, policy.u_correct)?,
                expected_utility_escalate: expected_utility_escalate(
                    policy.u_correct,
                    policy.c_esc,
                    policy.oracle_success_prob,
                )?,
                chosen_answer: None,
            }
        } else {
            decide(p_fail, &policy, l1_answer.clone())?
        };
        let router_latency = routing_started.elapsed().as_secs_f64();

        let mut layer2 = None;
        let mut degraded = false;
        let mut oracle_tokens = None;
        let mut oracle_latency = None;
        let (answer, answer_source) = match decision.verdict {
            Verdict::Stop => {
                let a = decision.chosen_answer.clone().expect("stop carries an answer");
                (a.answer, a.source_model)
            }
            Verdict::Escalate => {
                let t0 = Instant::now();
                let result = self.layer2.complete(&req.prompt).await;
                let call = BackendCall::from_result(self.layer2.model_id(), t0, &result);
                self.note(&call);
                oracle_latency = Some(call.latency);
                layer2 = Some(call);
                match result {
                    Ok(c) => {
                        oracle_tokens = Some(c.output_tokens);
                        (c.text, self.layer2.model_id().to_string())
                    }
                    Err(e) => {
                        let Some(a) = l1_answer.clone() else {
                            return Err(GatewayError::OracleUnavailable(e.to_string()));
                        };
                        degraded = true;
                        (a.answer, a.source_model)
                    }
                }
            }
        };

        let usage: Vec<(&str, u64)> = ensemble
            .outputs
            .iter()
            .map(|o| (o.model_id.as_str(), o.output_tokens))
            .collect();
        let billed_oracle = match decision.verdict {
            Verdict::Escalate => Some(oracle_tokens.unwrap_or(0)),
            Verdict::Stop => None,
        };
        let record = {
            let mut ledger = self.ledger.lock().expect("ledger lock");
            let cost = query_cost(&query_id, decision.verdict, &usage, billed_oracle, ledger.cost_model())?;
            let record = QueryRecord {
                query_id: query_id.clone(),
                verdict: decision.verdict,
                cost,
                oracle_tokens,
                oracle_latency,
                l1_latency: fan_out_latency,
                correct: None,
                degraded,
            };
            ledger.append(record.clone());
            record
        };

        let response = RouteResponse {
            query_id,
            answer,
            answer_source,
            verdict: decision.verdict,
            p_fail,
            threshold: policy.threshold_t,
            features,
            expected_utility_stop: decision.expected_utility_stop,
            expected_utility_escalate: decision.expected_utility_escalate,
            l1_answer,
            l1_outputs: ensemble.outputs,
            layer1,
            layer2,
            cost: record.cost,
            estimator_id: self.estimator_id.clone(),
            policy,
            forced_escalation,
            degraded,
            fan_out_latency,
            router_latency,
            total_latency: started.elapsed().as_secs_f64(),
        };
        self.audit(&response)?;
        Ok(response)
    }

    fn audit(&self, response: &RouteResponse) -> Result<(), GatewayError> {
        if let Some(file) = &self.audit {
            let mut line = serde_json::to_vec(response).map_err(|e| GatewayError::Internal(e.to_string()))?;
            line.push(b'\n');
            // one write per line keeps concurrent appends whole
            file.lock().expect("audit lock").write_all(&line)?;
        }
        Ok(())
    }

    /// `None` until the first query is routed.
    pub fn summary(&self) -> Option<LedgerSummary> {
        self.ledger.lock().expect("ledger lock").summarize().ok()
    }

    pub fn records(&self) -> Vec<QueryRecord> {
        self.ledger.lock().expect("ledger lock").records().to_vec()
    }

    pub fn health(&self) -> HealthReport {
        let backends: Vec<BackendHealth> = self
            .layer1
            .iter()
            .chain(std::iter::once(&self.layer2))
            .filter_map(|c| self.health.lock().expect("health lock").get(c.model_id()).cloned())
            .collect();
        let failing = backends
            .iter()
            .any(|b| matches!(b.last_status, Some(CallStatus::Error | CallStatus::Timeout)));
        HealthReport {
            status: if failing { "degraded" } else { "ok" }.into(),
            estimator_id: self.estimator_id.clone(),
            policy: self.policy,
            backends,
        }
    }

    /// Writes `{summary, records}` to the configured ledger path, if any.
    pub fn flush_ledger(&self) -> Result<(), GatewayError> {
        let Some(path) = &self.ledger_path else {
            return Ok(());
        };
        self.write_ledger(path)
    }

    pub fn write_ledger(&self, path: &Path) -> Result<(), GatewayError> {
        let (summary, records) = {
            let ledger = self.ledger.lock().expect("ledger lock");
            (ledger.summarize().ok(), ledger.records().to_vec())
        };
        let doc = serde_json::json!({ "summary": summary, "records": records });
        let bytes = serde_json::to_vec_pretty(&doc).map_err(|e| GatewayError::Internal(e.to_string()))?;
        write_atomic(path, &bytes)?;
        Ok(())
    }
}

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use cascade_router::decision::RoutingPolicy;
use cascade_router::estimator::{train_boosted, BoostedParams};
use cascade_router::gateway::{default_preamble, BackendConfig, GatewayConfig, MockReply, MockScript, Tier};
use cascade_router::trace::{generate_synthetic, labeled_examples, split_train_test, SyntheticTraceParams};
use cascade_router::{
    aggregate_l1_answer, build_feature_vector, decide, EnsembleResponse, FailureEstimator, FeatureVector, ModelOutput,
    TaskKind, Verdict,
};

/// Boosted estimator trained on the training split of small default traces.
pub fn small_estimator() -> &'static FailureEstimator {
    static EST: OnceLock<FailureEstimator> = OnceLock::new();
    EST.get_or_init(|| {
        let traces = generate_synthetic(&SyntheticTraceParams {
            n: 2000,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        let (train, _) = split_train_test(&traces);
        let params = BoostedParams {
            rounds: 50,
            ..Default::default()
        };
        train_boosted(&labeled_examples(&train).unwrap(), &params).unwrap()
    })
}

pub const L1_MODELS: [&str; 3] = ["l1-a", "l1-b", "l1-c"];
pub const L2_MODEL: &str = "l2-oracle";

pub fn backend(model_id: &str, tier: Tier, script: MockScript, timeout: f64) -> BackendConfig {
    BackendConfig {
        model_id: model_id.into(),
        endpoint: String::new(),
        tier,
        timeout,
        unit_cost: if tier == Tier::Layer2 { 8.0 } else { 0.2 },
        preamble: default_preamble(),
        api_key_env: None,
        mock: Some(script),
    }
}

/// All-mock config with one script per Layer-1 model and one for the Oracle.
pub fn mock_config(l1: Vec<MockScript>, l2: MockScript, policy: RoutingPolicy) -> GatewayConfig {
    let mut backends: Vec<BackendConfig> = l1
        .into_iter()
        .zip(L1_MODELS)
        .map(|(s, m)| backend(m, Tier::Layer1, s, 5.0))
        .collect();
    backends.push(backend(L2_MODEL, Tier::Layer2, l2, 5.0));
    GatewayConfig {
        listen: "127.0.0.1:0".into(),
        estimator_path: PathBuf::from("unused.json"),
        policy,
        backends,
        default_task_kind: TaskKind::Convergent,
        count_l1_in_total: false,
        router_overhead_latency: 0.82,
        audit_log: None,
        ledger_path: None,
    }
}

pub fn reply(text: &str) -> MockReply {
    MockReply::new(text)
}

/// Offline pipeline on the same texts: domain → features → estimator →
/// decision. Returns (features, p_fail, verdict, answer) with the Oracle
/// text standing in for the answer on escalate.
pub fn offline(
    texts: &[(&str, &str, u64)],
    oracle_text: &str,
    est: &FailureEstimator,
    policy: &RoutingPolicy,
) -> (FeatureVector, f64, Verdict, String) {
    let outputs = texts
        .iter()
        .map(|(m, t, tokens)| ModelOutput::from_text(*m, *t, TaskKind::Convergent, *tokens, 0.0))
        .collect();
    let ensemble = EnsembleResponse::new("offline", outputs).unwrap();
    let features = build_feature_vector(&ensemble);
    let p = est.predict_p_fail(&features);
    let answer = aggregate_l1_answer(&ensemble, TaskKind::Convergent).ok();
    let d = decide(p, policy, answer).unwrap();
    let text = match d.verdict {
        Verdict::Stop => d.chosen_answer.unwrap().answer,
        Verdict::Escalate => oracle_text.to_string(),
    };
    (features, p, d.verdict, text)
}

pub async fn post_route(client: &reqwest::Client, url: &str, body: serde_json::Value) -> (u16, serde_json::Value) {
    let resp = client.post(format!("{url}/v1/route")).json(&body).send().await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap())
}

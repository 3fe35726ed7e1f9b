mod common;

use std::time::Instant;

use cascade_router::decision::RoutingPolicy;
use cascade_router::gateway::{
    start_with_estimator, CallStatus, GatewayError, MockHandle, MockReply, MockScript, RouteResponse, Tier,
};
use cascade_router::ledger::LedgerSummary;
use cascade_router::Verdict;
use common::*;
use serde_json::json;

const AGREE: &str = "Sixteen times four is 64, plus 60 loose gives 124.\n#### 124\nConfidence: 95%";
const ORACLE: &str = "Rows give 64 jars and 60 more are loose.\n#### 124\nConfidence: 99%";

fn unanimous() -> Vec<MockScript> {
    (0..3).map(|_| MockScript::always(AGREE)).collect()
}

fn split_texts() -> [&'static str; 3] {
    [
        "maybe 12 then\n#### 12\nConfidence: 30%",
        "I think the total is 97 after carrying everything over twice\n#### 97\nConfidence: 25%",
        "#### 5\nConfidence: 20%",
    ]
}

fn split() -> Vec<MockScript> {
    split_texts().iter().map(|t| MockScript::always(*t)).collect()
}

fn policy() -> RoutingPolicy {
    RoutingPolicy::default()
}

#[tokio::test]
async fn unanimous_ensemble_stops_without_calling_the_oracle() {
    let est = small_estimator().clone();
    let texts: Vec<_> = L1_MODELS.iter().map(|m| (*m, AGREE, AGREE.split_whitespace().count() as u64)).collect();
    let (_, p, verdict, _) = offline(&texts, ORACLE, &est, &policy());
    assert_eq!(verdict, Verdict::Stop, "fixture must sit below the threshold (p={p})");

    let gw = start_with_estimator(mock_config(unanimous(), MockScript::always(ORACLE), policy()), est)
        .await
        .unwrap();
    let client = reqwest::Client::new();
    let (status, body) = post_route(&client, &gw.url(), json!({"prompt": "jars?", "task_kind": "convergent"})).await;
    assert_eq!(status, 200, "{body}");
    let r: RouteResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.verdict, Verdict::Stop);
    assert_eq!(r.answer, "124");
    assert_eq!(r.p_fail.to_bits(), p.to_bits());
    assert!(r.layer2.is_none());
    assert_eq!(gw.mocks()[3].calls(), 0);
    assert_eq!(r.cost.l2, 0.0);
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn disagreement_escalates_and_returns_the_oracle_text() {
    let est = small_estimator().clone();
    let texts: Vec<_> = L1_MODELS
        .iter()
        .zip(split_texts())
        .map(|(m, t)| (*m, t, t.split_whitespace().count() as u64))
        .collect();
    let (_, p, verdict, _) = offline(&texts, ORACLE, &est, &policy());
    assert_eq!(verdict, Verdict::Escalate, "fixture must sit above the threshold (p={p})");

    let gw = start_with_estimator(mock_config(split(), MockScript::always(ORACLE), policy()), est)
        .await
        .unwrap();
    let client = reqwest::Client::new();
    let (status, body) = post_route(&client, &gw.url(), json!({"prompt": "jars?"})).await;
    assert_eq!(status, 200, "{body}");
    let r: RouteResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.verdict, Verdict::Escalate);
    assert_eq!(r.answer, ORACLE);
    assert_eq!(r.answer_source, L2_MODEL);
    assert_eq!(gw.mocks()[3].calls(), 1);
    assert!(r.cost.l2 > 0.0);
    assert!(!r.degraded);

    // per-request override: threshold 1.0 always stops
    let (_, body) = post_route(&client, &gw.url(), json!({"prompt": "jars?", "threshold_override": 1.0})).await;
    let r: RouteResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.verdict, Verdict::Stop);
    assert_eq!(r.threshold, 1.0);
    assert_eq!(gw.mocks()[3].calls(), 1);
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn fan_out_is_concurrent() {
    let scripts = unanimous().into_iter().map(|s| s.with_latency_ms(150)).collect();
    let gw = start_with_estimator(
        mock_config(scripts, MockScript::always(ORACLE), policy()),
        small_estimator().clone(),
    )
    .await
    .unwrap();
    let (status, body) = post_route(&reqwest::Client::new(), &gw.url(), json!({"prompt": "q"})).await;
    assert_eq!(status, 200);
    let r: RouteResponse = serde_json::from_value(body).unwrap();
    let sum: f64 = r.layer1.iter().map(|c| c.latency).sum();
    assert!(r.layer1.iter().all(|c| c.latency >= 0.15));
    assert!(r.fan_out_latency >= 0.15);
    assert!(r.fan_out_latency < sum, "wall {} vs sum {sum}", r.fan_out_latency);
    assert!(r.fan_out_latency < 0.40, "wall {}", r.fan_out_latency);
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn timed_out_backend_is_recorded_not_fatal() {
    let mut config = mock_config(unanimous(), MockScript::always(ORACLE), policy());
    config.backends[1].mock = Some(MockScript::always(AGREE).with_latency_ms(2000));
    config.backends[1].timeout = 0.2;
    let gw = start_with_estimator(config, small_estimator().clone()).await.unwrap();
    let started = Instant::now();
    let (status, body) = post_route(&reqwest::Client::new(), &gw.url(), json!({"prompt": "q"})).await;
    assert!(started.elapsed().as_secs_f64() < 1.5);
    assert_eq!(status, 200, "{body}");
    let r: RouteResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.l1_outputs.len(), 2);
    assert_eq!(r.layer1.len(), 3);
    assert_eq!(r.layer1[1].status, CallStatus::Timeout);
    assert_eq!(r.layer1[1].model_id, L1_MODELS[1]);
    assert!(r.layer1[1].output_tokens.is_none());
    let health: serde_json::Value = reqwest::get(format!("{}/v1/health", gw.url()))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(health["status"], "degraded");
    assert_eq!(health["backends"][1]["last_status"], "timeout");
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn all_layer1_failures_are_a_gateway_error() {
    let failing = MockScript {
        fail_all: true,
        ..MockScript::always(AGREE)
    };
    let mut config = mock_config(vec![failing.clone(), failing.clone(), failing], MockScript::always(ORACLE), policy());
    for b in config.backends.iter_mut().filter(|b| b.tier == Tier::Layer1) {
        b.timeout = 1.0;
    }
    let gw = start_with_estimator(config, small_estimator().clone()).await.unwrap();
    let (status, body) = post_route(&reqwest::Client::new(), &gw.url(), json!({"prompt": "q"})).await;
    assert_eq!(status, 502);
    assert_eq!(body["error"]["code"], "all_backends_failed");
    assert_eq!(gw.mocks()[3].calls(), 0);
    gw.shutdown().await.unwrap();

    // timeouts too
    let slow = MockScript::always(AGREE).with_latency_ms(1000);
    let mut config = mock_config(vec![slow.clone(), slow.clone(), slow], MockScript::always(ORACLE), policy());
    for b in config.backends.iter_mut().filter(|b| b.tier == Tier::Layer1) {
        b.timeout = 0.1;
    }
    let gw = start_with_estimator(config, small_estimator().clone()).await.unwrap();
    let (status, body) = post_route(&reqwest::Client::new(), &gw.url(), json!({"prompt": "q"})).await;
    assert_eq!(status, 502);
    assert!(body["error"]["message"].as_str().unwrap().contains("timed out"));
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn oracle_failure_degrades_to_the_layer1_answer() {
    let failing_oracle = MockScript {
        fail_all: true,
        ..MockScript::always(ORACLE)
    };
    let gw = start_with_estimator(mock_config(split(), failing_oracle, policy()), small_estimator().clone())
        .await
        .unwrap();
    let (status, body) = post_route(&reqwest::Client::new(), &gw.url(), json!({"prompt": "q"})).await;
    assert_eq!(status, 200, "{body}");
    let r: RouteResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.verdict, Verdict::Escalate);
    assert!(r.degraded);
    assert_eq!(r.answer, r.l1_answer.as_ref().unwrap().answer);
    assert_eq!(r.layer2.as_ref().unwrap().status, CallStatus::Error);
    assert_eq!(r.cost.l2, 0.0);
    let stats: LedgerSummary = reqwest::get(format!("{}/v1/stats", gw.url()))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(stats.degraded, 1);
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn bad_requests_get_structured_400s() {
    let gw = start_with_estimator(
        mock_config(unanimous(), MockScript::always(ORACLE), policy()),
        small_estimator().clone(),
    )
    .await
    .unwrap();
    let client = reqwest::Client::new();
    let url = format!("{}/v1/route", gw.url());
    for body in [
        "not json".to_string(),
        json!({"task_kind": "convergent"}).to_string(),
        json!({"prompt": "q", "task_kind": "poetry"}).to_string(),
        json!({"prompt": "q", "surprise": 1}).to_string(),
        json!({"prompt": "q", "threshold_override": 1.5}).to_string(),
    ] {
        let resp = client
            .post(&url)
            .header("content-type", "application/json")
            .body(body.clone())
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status().as_u16(), 400, "{body}");
        let err: serde_json::Value = resp.json().await.unwrap();
        assert_eq!(err["error"]["code"], "bad_request", "{body}");
        assert!(err["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    // nothing reached the backends
    assert!(gw.mocks().iter().all(|m| m.calls() == 0));
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn health_reports_estimator_and_backends() {
    let est = small_estimator().clone();
    let gw = start_with_estimator(mock_config(unanimous(), MockScript::always(ORACLE), policy()), est.clone())
        .await
        .unwrap();
    let resp = reqwest::get(format!("{}/v1/health", gw.url())).await.unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let h: serde_json::Value = resp.json().await.unwrap();
    assert_eq!(h["status"], "ok");
    assert_eq!(h["estimator_id"], est.fingerprint());
    assert_eq!(h["backends"].as_array().unwrap().len(), 4);
    assert_eq!(h["backends"][3]["tier"], "layer2");

    // stats before any traffic
    let s: serde_json::Value = reqwest::get(format!("{}/v1/stats", gw.url()))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(s["n_queries"], 0);
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn concurrent_requests_audit_and_ledger_flush() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = mock_config(
        unanimous().into_iter().map(|s| s.with_latency_ms(50)).collect(),
        MockScript::always(ORACLE),
        policy(),
    );
    config.audit_log = Some(dir.path().join("audit.jsonl"));
    config.ledger_path = Some(dir.path().join("ledger.json"));
    let gw = start_with_estimator(config, small_estimator().clone()).await.unwrap();
    let client = reqwest::Client::new();
    let url = gw.url();
    let started = Instant::now();
    let handles: Vec<_> = (0..20)
        .map(|i| {
            let (client, url) = (client.clone(), url.clone());
            // half forced to escalate
            let threshold = if i % 2 == 0 { 0.0 } else { 1.0 };
            tokio::spawn(async move {
                post_route(
                    &client,
                    &url,
                    json!({"prompt": format!("q{i}"), "query_id": format!("id-{i}"), "threshold_override": threshold}),
                )
                .await
            })
        })
        .collect();
    let mut responses = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, 200, "{body}");
        responses.push(serde_json::from_value::<RouteResponse>(body).unwrap());
    }
    // 20 sequential requests would take at least 1 s
    assert!(started.elapsed().as_secs_f64() < 1.0, "{:?}", started.elapsed());
    let escalations = responses.iter().filter(|r| r.verdict == Verdict::Escalate).count();
    assert_eq!(escalations, 10);
    assert_eq!(gw.mocks()[3].calls(), 10);

    let summary = gw.gateway.summary().unwrap();
    assert_eq!(summary.n_queries, 20);
    assert_eq!(summary.escalation_rate, 0.5);
    let gateway = gw.gateway.clone();
    gw.shutdown().await.unwrap();

    // every response is reconstructible from its audit line
    let audit = std::fs::read_to_string(dir.path().join("audit.jsonl")).unwrap();
    let lines: Vec<RouteResponse> = audit.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 20);
    for r in &responses {
        let line = lines.iter().find(|l| l.query_id == r.query_id).unwrap();
        assert_eq!(line, r);
        assert_eq!(line.p_fail.to_bits(), r.p_fail.to_bits());
    }

    let ledger: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ledger.json")).unwrap()).unwrap();
    assert_eq!(ledger["records"].as_array().unwrap().len(), 20);
    assert_eq!(ledger["summary"]["n_queries"], 20);
    assert_eq!(gateway.records().len(), 20);
}

#[tokio::test]
async fn backends_receive_the_confidence_instruction() {
    let gw = start_with_estimator(
        mock_config(unanimous(), MockScript::always(ORACLE), policy()),
        small_estimator().clone(),
    )
    .await
    .unwrap();
    post_route(&reqwest::Client::new(), &gw.url(), json!({"prompt": "how many jars?"})).await;
    let req = &gw.mocks()[0].requests()[0];
    assert_eq!(req["model"], L1_MODELS[0]);
    assert_eq!(req["messages"][0]["role"], "system");
    assert!(req["messages"][0]["content"]
        .as_str()
        .unwrap()
        .contains("End with a line \"Confidence: N%\""));
    assert_eq!(req["messages"][1]["content"], "how many jars?");
    // every layer-1 backend saw the same prompt
    for m in &gw.mocks()[..3] {
        assert_eq!(m.requests()[0]["messages"], req["messages"]);
    }
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn invalid_config_fails_at_startup() {
    let mut config = mock_config(unanimous(), MockScript::always(ORACLE), policy());
    config.backends.retain(|b| b.tier == Tier::Layer1);
    let err = start_with_estimator(config, small_estimator().clone()).await.err().unwrap();
    assert!(matches!(err, GatewayError::Config(_)), "{err}");

    let mut config = mock_config(unanimous(), MockScript::always(ORACLE), policy());
    config.backends[0].timeout = -1.0;
    config.policy.threshold_t = 2.0;
    let Err(GatewayError::Config(problems)) = start_with_estimator(config, small_estimator().clone()).await else {
        panic!("expected config error");
    };
    assert_eq!(problems.len(), 2, "{problems:?}");

    let mut config = mock_config(unanimous(), MockScript::always(ORACLE), policy());
    config.backends[0].api_key_env = Some("CASCADE_ROUTER_TEST_KEY_THAT_IS_NOT_SET".into());
    assert!(start_with_estimator(config, small_estimator().clone()).await.is_err());
}

#[tokio::test]
async fn start_loads_the_estimator_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("est.json");
    std::fs::write(&path, small_estimator().to_json()).unwrap();
    let mut config = mock_config(unanimous(), MockScript::always(ORACLE), policy());
    config.estimator_path = path;
    let cfg_path = dir.path().join("gateway.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let loaded = cascade_router::gateway::GatewayConfig::load(&cfg_path).unwrap();
    let gw = cascade_router::gateway::start(loaded).await.unwrap();
    let h: serde_json::Value = reqwest::get(format!("{}/v1/health", gw.url()))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(h["estimator_id"], small_estimator().fingerprint());
    gw.shutdown().await.unwrap();

    config.estimator_path = dir.path().join("missing.json");
    assert!(matches!(
        cascade_router::gateway::start(config).await,
        Err(GatewayError::Estimator(_))
    ));
}

mod mock_backend {
    use super::*;

    async fn call(client: &reqwest::Client, m: &MockHandle) -> (u16, serde_json::Value) {
        let body = json!({"model": "m", "messages": [{"role": "user", "content": "hi"}]});
        let resp = client
            .post(format!("{}/v1/chat/completions", m.url()))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap())
    }

    #[tokio::test]
    async fn single_reply_repeats() {
        let m = MockHandle::spawn(MockScript::always("only answer")).await.unwrap();
        let client = reqwest::Client::new();
        for _ in 0..3 {
            let (status, body) = call(&client, &m).await;
            assert_eq!(status, 200);
            assert_eq!(body["choices"][0]["message"]["content"], "only answer");
            assert_eq!(body["usage"]["completion_tokens"], 2);
        }
        assert_eq!(m.calls(), 3);
    }

    #[tokio::test]
    async fn scripted_latency_is_honoured() {
        let m = MockHandle::spawn(MockScript::always("x").with_latency_ms(100)).await.unwrap();
        let t0 = Instant::now();
        call(&reqwest::Client::new(), &m).await;
        assert!(t0.elapsed().as_secs_f64() >= 0.1);
    }

    #[tokio::test]
    async fn scripted_failure_on_second_call() {
        let m = MockHandle::spawn(MockScript {
            replies: vec![MockReply::new("one").tokens(7), MockReply::new("two")],
            fail_calls: vec![2],
            ..Default::default()
        })
        .await
        .unwrap();
        let client = reqwest::Client::new();
        let mut got = Vec::new();
        for _ in 0..4 {
            got.push(call(&client, &m).await.0);
        }
        assert_eq!(got, vec![200, 500, 200, 200]);
    }

    #[tokio::test]
    async fn prompt_keyed_replies_take_precedence() {
        let mut script = MockScript::always("fallback");
        script.by_prompt.insert("hi".into(), MockReply::new("keyed"));
        let m = MockHandle::spawn(script).await.unwrap();
        let (_, body) = call(&reqwest::Client::new(), &m).await;
        assert_eq!(body["choices"][0]["message"]["content"], "keyed");
    }
}

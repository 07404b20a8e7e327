use std::sync::Arc;

use adaptex::clock::ManualClock;
use adaptex::pipeline::FlushPolicy;
use adaptex::sampler::SamplerSettings;
use adaptex_cli::http::router;
use adaptex_cli::service::{DataDir, Service, ServiceOptions};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn service(dir: &std::path::Path, clock: Arc<ManualClock>) -> Arc<Service> {
    Service::open_with_clock(
        DataDir::new(dir),
        ServiceOptions {
            sampler: SamplerSettings::default(),
            flush: FlushPolicy {
                max_examples: 5,
                max_wait: 60_000,
            },
            seed: 1,
            fsync: false,
        },
        clock,
    )
    .unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8_lossy(&bytes).into_owned())
}

fn config() -> Value {
    json!({
        "bandit_id": "promo",
        "algorithm": "ThompsonBernoulli",
        "arm_space": {"Explicit": {"arm_ids": ["a", "b"]}},
        "context_schema": [{"name": "device", "kind": {"Categorical": {"cardinality": 2}}}],
        "reward_spec": "Binary",
        "attribution_window": 10
    })
}

#[tokio::test]
async fn sample_reward_train_freeze() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(1_000));
    let svc = service(dir.path(), clock.clone());
    let app = router(svc.clone());

    assert_eq!(call(&app, "GET", "/healthz", None).await.0, StatusCode::OK);
    let (s, body) = call(&app, "POST", "/v1/bandits", Some(config())).await;
    assert_eq!(s, StatusCode::CREATED, "{body}");
    assert_eq!(call(&app, "POST", "/v1/bandits", Some(config())).await.0, StatusCode::OK);

    let mut request_ids = Vec::new();
    for i in 0..10 {
        let req = json!({"session_id": format!("s{i}"), "context": {"device": (i % 2) as f64}});
        let (s, body) = call(&app, "POST", "/v1/bandits/promo/sample", Some(req.clone())).await;
        assert_eq!(s, StatusCode::OK, "{body}");
        let d: Value = serde_json::from_str(&body).unwrap();
        let (_, again) = call(&app, "POST", "/v1/bandits/promo/sample", Some(req)).await;
        assert_eq!(serde_json::from_str::<Value>(&again).unwrap(), d, "sticky session");
        request_ids.push(d["request_id"].as_str().unwrap().to_string());
    }
    for r in &request_ids {
        let (s, body) = call(&app, "POST", "/v1/bandits/promo/rewards", Some(json!({"request_id": r, "values": [1.0]}))).await;
        assert_eq!(s, StatusCode::ACCEPTED, "{body}");
    }
    let (s, _) = call(&app, "POST", "/v1/bandits/promo/rewards", Some(json!({"request_id": "x", "values": [0.5]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    clock.advance(1_000);
    assert_eq!(svc.drain().unwrap(), 2);
    let (_, body) = call(&app, "GET", "/v1/bandits/promo", None).await;
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["params_version"], 2);
    assert_eq!(v["config"]["bandit_id"], "promo");

    let (s, body) = call(&app, "POST", "/v1/bandits/promo/freeze", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["already_frozen"], false);
    let (_, body) = call(&app, "POST", "/v1/bandits/promo/freeze", None).await;
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["already_frozen"], true);

    let (_, metrics) = call(&app, "GET", "/metrics", None).await;
    for key in ["applied_batches 2", "poisoned_examples 0", "dropped_frozen 0", "cas_conflicts 0", "sampler_impressions 10"] {
        assert!(metrics.lines().any(|l| l == key), "{key} in {metrics}");
    }
}

#[tokio::test]
async fn errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(service(dir.path(), Arc::new(ManualClock::new(0))));
    let mut bad = config();
    bad["arm_space"] = json!({"Explicit": {"arm_ids": ["only"]}});
    let (s, body) = call(&app, "POST", "/v1/bandits", Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(serde_json::from_str::<Value>(&body).unwrap()["violations"].as_array().is_some_and(|v| !v.is_empty()));
    assert_eq!(call(&app, "POST", "/v1/bandits", Some(json!({"nope": 1}))).await.0, StatusCode::BAD_REQUEST);

    assert_eq!(call(&app, "GET", "/v1/bandits/ghost", None).await.0, StatusCode::NOT_FOUND);
    let req = json!({"session_id": "s", "context": {}});
    assert_eq!(call(&app, "POST", "/v1/bandits/ghost/sample", Some(req)).await.0, StatusCode::NOT_FOUND);

    call(&app, "POST", "/v1/bandits", Some(config())).await;
    let req = json!({"session_id": "s", "context": {"device": 7.0}});
    assert_eq!(call(&app, "POST", "/v1/bandits/promo/sample", Some(req)).await.0, StatusCode::BAD_REQUEST);
    let mut changed = config();
    changed["algorithm"] = json!("Exp3");
    assert_eq!(call(&app, "POST", "/v1/bandits", Some(changed)).await.0, StatusCode::CONFLICT);
}

#[test]
fn restart_does_not_rewrite_the_batch_log() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(1_000));
    let cfg: adaptex::config::BanditConfig = serde_json::from_value(config()).unwrap();
    {
        let svc = service(dir.path(), clock.clone());
        svc.sampler().admin_create(cfg.clone()).unwrap();
        for i in 0..12 {
            let raw = adaptex::context::RawContext::from([("device".to_string(), 0.0)]);
            let d = svc.sampler().sample("promo", &format!("u{i}"), &raw).unwrap();
            svc.events()
                .append_reward(adaptex::events::RewardEvent {
                    bandit_id: "promo".into(),
                    request_id: d.request_id,
                    values: vec![1.0],
                    click_position: None,
                    timestamp: svc.now_ms(),
                })
                .unwrap();
        }
        clock.advance(20_000);
        svc.drain().unwrap();
    }
    let logs = dir.path().join("logs");
    let before = adaptex::pipeline::BatchLog::read(&logs, "promo").unwrap();
    assert_eq!(before.len(), 2);
    let svc = service(dir.path(), clock.clone());
    clock.advance(1_000);
    svc.drain().unwrap();
    assert_eq!(adaptex::pipeline::BatchLog::read(&logs, "promo").unwrap(), before);
    assert_eq!(svc.trainer().metrics().counters().skipped_replays, 2);
    let report = adaptex::pipeline::replay_dir(&cfg, FlushPolicy { max_examples: 5, max_wait: 60_000 }, &logs, false).unwrap();
    assert!(report.identical);
}

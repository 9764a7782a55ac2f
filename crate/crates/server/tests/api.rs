use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use digit_core::datalake::SeriesKey;
use digit_core::fixtures;
use digit_core::mlops::RetrainSettings;
use digit_core::predictor::Hyper;
use digit_core::simulator::DemandProfile;
use digit_core::system::{DigitalTwinSystem, SystemConfig};
use digit_server::{router, Engine, EngineConfig, EngineHandle};

const WARMUP_WINDOWS: u64 = 80;

fn config() -> SystemConfig {
    SystemConfig {
        keys: vec![SeriesKey::flow("s-2")],
        retrain: RetrainSettings { hyper: Hyper { hidden_dim: 4, epochs: 3, ..Hyper::default() }, ..RetrainSettings::default() },
        bootstrap_after_windows: Some(72),
        ..SystemConfig::default()
    }
}

fn engine_with(demand: DemandProfile) -> EngineHandle {
    let system =
        DigitalTwinSystem::in_memory(Arc::new(fixtures::grid_network()), Arc::new(demand), config()).expect("system");
    let (handle, _join) = Engine::spawn(system, EngineConfig::default());
    handle
}

async fn warm() -> (EngineHandle, Router) {
    let engine = engine_with(fixtures::grid_demand());
    assert_eq!(engine.step(WARMUP_WINDOWS).await.unwrap(), WARMUP_WINDOWS);
    let app = router(engine.clone());
    (engine, app)
}

fn validate(schema: &str, body: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{schema}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(body).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{} violates {}: {errors:#?}", body, path.display());
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let body = serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("not JSON: {}", String::from_utf8_lossy(&bytes)));
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    send(app, req).await
}

fn expect_error(got: (StatusCode, Value), status: StatusCode, code: &str) {
    assert_eq!(got.0, status, "{}", got.1);
    assert_eq!(got.1["code"], code);
    validate("error", &got.1);
}

async fn wait_done(app: &Router, id: &str) -> Value {
    for _ in 0..600 {
        let (status, body) = get(app, &format!("/api/v1/scenarios/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        if body["status"] != "Running" {
            validate("scenario", &body);
            return body;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("scenario {id} did not finish");
}

fn plan_for_a(first_green: f64) -> Value {
    json!({"type": "signal_plan", "plan": {
        "node": "A", "cycle_s": 60, "min_green_s": 10, "max_green_s": 120,
        "phases": [{"serves": ["W1A", "BA"], "green_s": first_green}, {"serves": ["CA"], "green_s": 60.0 - first_green}]
    }})
}

#[tokio::test]
async fn state_is_stale_before_the_first_sync() {
    let app = router(engine_with(fixtures::grid_demand()));
    expect_error(get(&app, "/api/v1/state").await, StatusCode::SERVICE_UNAVAILABLE, "Stale");
    let (status, health) = get(&app, "/health").await;
    assert_eq!(status, StatusCode::OK);
    validate("health", &health);
}

#[tokio::test]
async fn read_endpoints_validate_and_change_nothing() {
    let (engine, app) = warm().await;
    let fingerprint = || {
        engine.call(|e| {
            let s = &e.system;
            (
                format!("{:?}", s.twin),
                s.clock(),
                s.lake.len(),
                s.audit.events().len(),
                s.models.registry.manifests(),
                e.scenarios().count(),
            )
        })
    };
    let before = fingerprint().await.unwrap();
    for (uri, schema) in [
        ("/health", "health"),
        ("/api/v1/state", "state"),
        ("/api/v1/metrics/realtime?window=600", "realtime"),
        ("/api/v1/predictions?sensor=s-2&h=3", "prediction"),
        ("/api/v1/scenarios", "scenario_list"),
        ("/api/v1/models", "models"),
    ] {
        let (status, body) = get(&app, uri).await;
        assert_eq!(status, StatusCode::OK, "{uri}: {body}");
        validate(schema, &body);
    }
    assert_eq!(fingerprint().await.unwrap(), before);
}

#[tokio::test]
async fn unknown_paths_and_methods() {
    let (_engine, app) = warm().await;
    expect_error(get(&app, "/api/v1/nope").await, StatusCode::NOT_FOUND, "NotFound");
    expect_error(get(&app, "/api/v2/state").await, StatusCode::NOT_FOUND, "NotFound");
    expect_error(get(&app, "/api/v1/scenarios/sc-99").await, StatusCode::NOT_FOUND, "NotFound");
    expect_error(post(&app, "/api/v1/state", json!({})).await, StatusCode::BAD_REQUEST, "BadRequest");
    expect_error(get(&app, "/api/v1/state?x=1").await, StatusCode::BAD_REQUEST, "BadRequest");
}

#[tokio::test]
async fn realtime_matches_the_lake() {
    let (engine, app) = warm().await;
    let (status, body) = get(&app, "/api/v1/metrics/realtime?window=900").await;
    assert_eq!(status, StatusCode::OK);
    let (latest, expected, metrics) = engine
        .call(|e| {
            let s = &e.system;
            let latest = s.lake.latest_window().unwrap();
            let recs: Vec<Value> = s
                .sensor_ids()
                .flat_map(|id| s.lake.query_range(id, latest - 600, latest + 300))
                .map(|r| serde_json::to_value(r).unwrap())
                .collect();
            (latest, recs, serde_json::to_value(s.world.sim.metrics(900.0).unwrap()).unwrap())
        })
        .await
        .unwrap();
    assert_eq!(body["records"].as_array().unwrap(), &expected);
    assert_eq!(expected.len(), 3 * 4, "three windows ending at {latest} for four sensors");
    assert_eq!(body["metrics"], metrics);

    expect_error(get(&app, "/api/v1/metrics/realtime?window=0").await, StatusCode::BAD_REQUEST, "BadRequest");
    expect_error(get(&app, "/api/v1/metrics/realtime?window=abc").await, StatusCode::BAD_REQUEST, "BadRequest");
    expect_error(get(&app, "/api/v1/metrics/realtime?window=999999999").await, StatusCode::BAD_REQUEST, "BadRequest");
}

#[tokio::test]
async fn zero_traffic_gives_zero_metrics() {
    let engine = engine_with(DemandProfile { od_pairs: Vec::new(), ..fixtures::grid_demand() });
    engine.step(2).await.unwrap();
    let (status, body) = get(&router(engine), "/api/v1/metrics/realtime").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    validate("realtime", &body);
    assert_eq!(body["metrics"]["completed_trips"], 0);
    assert!(body["metrics"]["throughput_vpm"].as_object().unwrap().values().all(|v| v == 0.0));
    assert!(body["records"].as_array().unwrap().iter().all(|r| r["flow"] == 0));
}

#[tokio::test]
async fn predictions_equal_the_library_forecast() {
    let (engine, app) = warm().await;
    let (status, body) = get(&app, "/api/v1/predictions?sensor=s-2&h=2").await;
    assert_eq!(status, StatusCode::OK);
    validate("prediction", &body);
    let (forecast, path) = engine.call(|e| e.system.forecast("s-2", 2)).await.unwrap().unwrap();
    assert_eq!(body["forecast"], serde_json::to_value(&forecast).unwrap());
    assert_eq!(body["path"], serde_json::to_value(&path).unwrap());
    assert_eq!(body["model"]["status"], "Active");

    let (_, one) = get(&app, "/api/v1/predictions?sensor=s-2").await;
    assert_eq!(one["forecast"]["horizon"], 1);

    expect_error(get(&app, "/api/v1/predictions?sensor=s-9").await, StatusCode::NOT_FOUND, "NotFound");
    // s-1 is sensed but has no model.
    expect_error(get(&app, "/api/v1/predictions?sensor=s-1").await, StatusCode::NOT_FOUND, "NotFound");
    expect_error(get(&app, "/api/v1/predictions?sensor=s-2&h=0").await, StatusCode::BAD_REQUEST, "BadRequest");
    expect_error(get(&app, "/api/v1/predictions?h=1").await, StatusCode::BAD_REQUEST, "BadRequest");
}

#[tokio::test]
async fn baseline_scenario_finishes_with_zero_deltas() {
    let (_engine, app) = warm().await;
    let (status, created) = post(&app, "/api/v1/scenarios", json!({"changes": [], "horizon": 3})).await;
    assert_eq!(status, StatusCode::CREATED);
    validate("scenario_created", &created);
    let done = wait_done(&app, created["id"].as_str().unwrap()).await;
    assert_eq!(done["status"], "Done");
    let deltas = &done["result"]["deltas"];
    assert_eq!(deltas["avg_travel_time_s"], 0.0);
    assert!(deltas["throughput_vpm"].as_object().unwrap().values().all(|v| v == 0.0));
    let (_, list) = get(&app, "/api/v1/scenarios").await;
    assert_eq!(list["scenarios"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn violating_plan_is_rejected_at_submission() {
    let (_engine, app) = warm().await;
    let got = post(&app, "/api/v1/scenarios", json!({"changes": [plan_for_a(5.0)], "horizon": 2})).await;
    expect_error(got.clone(), StatusCode::UNPROCESSABLE_ENTITY, "ConstraintViolation");
    assert!(!got.1["detail"].is_null());
    expect_error(post(&app, "/api/v1/scenarios", json!({"changes": "x"})).await, StatusCode::BAD_REQUEST, "BadRequest");
    expect_error(
        post(&app, "/api/v1/scenarios", json!({"changes": [], "colour": 1})).await,
        StatusCode::BAD_REQUEST,
        "BadRequest",
    );
    let (_, list) = get(&app, "/api/v1/scenarios").await;
    assert!(list["scenarios"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn interventions_apply_once_from_done_scenarios() {
    let (engine, app) = warm().await;
    let (_, created) = post(&app, "/api/v1/scenarios", json!({"changes": [plan_for_a(35.0)], "horizon": 2})).await;
    let id = created["id"].as_str().unwrap().to_string();
    assert_eq!(wait_done(&app, &id).await["status"], "Done");

    let audit_before = engine.call(|e| e.system.audit.events().len()).await.unwrap();
    let (status, ack) = post(&app, "/api/v1/interventions", json!({"scenario_id": id, "change_index": 0})).await;
    assert_eq!(status, StatusCode::OK, "{ack}");
    validate("acknowledgment", &ack);
    assert!(ack["effective_tick"].as_u64().unwrap() > 0);
    let (_, again) = post(&app, "/api/v1/interventions", json!({"scenario_id": id, "change_index": 0})).await;
    assert_eq!(again, ack);
    assert_eq!(engine.call(|e| e.system.audit.events().len()).await.unwrap(), audit_before + 1);

    let (_, state) = get(&app, "/api/v1/state").await;
    assert_eq!(state["intersections"]["A"], "UnderIntervention");

    expect_error(
        post(&app, "/api/v1/interventions", json!({"scenario_id": id, "change_index": 4})).await,
        StatusCode::BAD_REQUEST,
        "BadRequest",
    );
    expect_error(
        post(&app, "/api/v1/interventions", json!({"scenario_id": "sc-77", "change_index": 0})).await,
        StatusCode::NOT_FOUND,
        "NotFound",
    );
}

#[tokio::test]
async fn interventions_from_unfinished_scenarios_are_rejected() {
    let (engine, app) = warm().await;
    // Hold the loop thread so the worker's completion cannot land.
    let (release, gate) = std::sync::mpsc::channel::<()>();
    let (id_tx, id_rx) = tokio::sync::oneshot::channel();
    let blocker = engine.clone();
    let held = tokio::task::spawn_blocking(move || {
        blocker
            .call_blocking(move |e| {
                let scenario = digit_core::twin::Scenario::new("", Vec::new(), 2);
                let _ = id_tx.send(e.submit(scenario).unwrap());
                let id = e.scenarios().next().unwrap().id.clone();
                let refused = e.intervene(&id, 0).unwrap_err();
                gate.recv().unwrap();
                refused
            })
            .unwrap()
    });
    let id = id_rx.await.unwrap();
    release.send(()).unwrap();
    let refused = held.await.unwrap();
    assert_eq!(refused.code, digit_server::ErrorCode::BadRequest, "{refused}");
    assert!(refused.message.contains("Running"), "{}", refused.message);
    wait_done(&app, &id).await;
}

#[tokio::test]
async fn models_show_the_promoted_version() {
    let (engine, app) = warm().await;
    let (status, before) = get(&app, "/api/v1/models").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(before["manifests"][0]["active"], 1);
    engine
        .call(|e| {
            let key = SeriesKey::flow("s-2");
            let reg = &e.system.models.registry;
            let model = reg.active(&key).unwrap();
            let v = reg.register(&key, (*model).clone(), None, e.system.clock()).unwrap();
            reg.promote(&key, v.v).unwrap();
        })
        .await
        .unwrap();
    let (_, after) = get(&app, "/api/v1/models").await;
    validate("models", &after);
    let manifest = &after["manifests"][0];
    assert_eq!(manifest["active"], 2);
    let statuses: Vec<&str> = manifest["versions"].as_array().unwrap().iter().map(|v| v["status"].as_str().unwrap()).collect();
    assert_eq!(statuses, ["Archived", "Active"]);
}

async fn next_line(body: &mut Body, buf: &mut Vec<u8>) -> Value {
    loop {
        if let Some(pos) = buf.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = buf.drain(..=pos).collect();
            return serde_json::from_slice(&line).unwrap();
        }
        let frame = tokio::time::timeout(Duration::from_secs(20), body.frame())
            .await
            .expect("event within the timeout")
            .expect("stream open")
            .unwrap();
        if let Ok(data) = frame.into_data() {
            buf.extend_from_slice(&data);
        }
    }
}

#[tokio::test]
async fn live_stream_delivers_state_updates_as_ndjson() {
    let (engine, app) = warm().await;
    let resp = app.clone().oneshot(Request::get("/api/v1/live?types=state_update").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "application/x-ndjson");
    let mut body = resp.into_body();
    engine.step(1).await.unwrap();
    let mut buf = Vec::new();
    let ev = next_line(&mut body, &mut buf).await;
    validate("event", &ev);
    assert_eq!(ev["type"], "state_update");
    let now = engine.call(|e| e.system.twin.state().now).await.unwrap();
    assert_eq!(ev["data"]["now"], now);

    let all = app.clone().oneshot(Request::get("/api/v1/live").body(Body::empty()).unwrap()).await.unwrap();
    let mut body = all.into_body();
    engine.step(1).await.unwrap();
    let mut buf = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..5 {
        let ev = next_line(&mut body, &mut buf).await;
        validate("event", &ev);
        seen.insert(ev["type"].as_str().unwrap().to_string());
    }
    assert!(seen.contains("new_aggregate") && seen.contains("state_update"), "{seen:?}");

    engine.shutdown();
    let end = tokio::time::timeout(Duration::from_secs(5), async {
        while let Some(Ok(_)) = body.frame().await {}
    })
    .await;
    assert!(end.is_ok(), "stream ends on shutdown");
}

#[tokio::test]
async fn malformed_subscriptions_are_rejected() {
    let (_engine, app) = warm().await;
    let got = get(&app, "/api/v1/live?types=state_update,weather").await;
    expect_error(got.clone(), StatusCode::BAD_REQUEST, "BadRequest");
    assert!(got.1["message"].as_str().unwrap().contains("weather"));
    expect_error(get(&app, "/api/v1/live?topic=drift").await, StatusCode::BAD_REQUEST, "BadRequest");
}

use std::collections::{BTreeMap, BTreeSet};

use axum::body::Body;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use digit_core::mlops::ModelVersion;
use digit_core::predictor::{EvalMetrics, Forecast};
use digit_core::sensing::{AggregatedRecord, WINDOW_S};
use digit_core::network::RoadNetwork;
use digit_core::simulator::{SimError, SimMetrics};
use digit_core::system::SystemEvent;
use digit_core::twin::{Acknowledgment, Change, Scenario, ScenarioBase, ScenarioStatus, TwinState};

use crate::engine::{EngineHandle, ScenarioEntry};
use crate::error::{ApiError, ErrorCode};

/// State older than this many windows is reported as `Stale`.
pub const STALE_AFTER_WINDOWS: i64 = 3;
/// Upper bound on `h` for `/predictions`.
pub const MAX_PREDICTION_HORIZON: u32 = 288;
/// Outcomes scored for the `recent_metrics` field of `/predictions`.
pub const RECENT_OUTCOMES: usize = 288;

pub const EVENT_TYPES: [&str; 5] = ["state_update", "new_aggregate", "drift", "promotion", "scenario_done"];

pub fn router(engine: EngineHandle) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/api/v1/state", get(state))
        .route("/api/v1/metrics/realtime", get(realtime))
        .route("/api/v1/predictions", get(predictions))
        .route("/api/v1/scenarios", post(create_scenario).get(list_scenarios))
        .route("/api/v1/scenarios/{id}", get(get_scenario))
        .route("/api/v1/interventions", post(intervene))
        .route("/api/v1/models", get(models))
        .route("/api/v1/live", get(live))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async { ApiError::bad_request("method not allowed on this endpoint") })
        .with_state(engine)
}

type Params = Result<Query<BTreeMap<String, String>>, QueryRejection>;

fn params(q: Params, allowed: &[&str]) -> Result<BTreeMap<String, String>, ApiError> {
    let Query(map) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
    if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ApiError::bad_request(format!("unknown query parameter `{k}`")));
    }
    Ok(map)
}

fn number<T: std::str::FromStr>(map: &BTreeMap<String, String>, name: &str, default: T) -> Result<T, ApiError> {
    match map.get(name) {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| ApiError::bad_request(format!("`{name}` must be a non-negative integer, got `{s}`"))),
    }
}

fn body<T>(b: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    b.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    t: f64,
    windows: u64,
    halted: Option<String>,
}

async fn health(State(engine): State<EngineHandle>) -> Result<Json<Health>, ApiError> {
    engine
        .call(|e| Health {
            status: if e.halted().is_some() { "halted" } else { "ok" },
            t: e.system.clock(),
            windows: e.windows(),
            halted: e.halted().map(str::to_string),
        })
        .await
        .map(Json)
}

async fn state(State(engine): State<EngineHandle>, q: Params) -> Result<Json<TwinState>, ApiError> {
    params(q, &[])?;
    let s = engine.call(|e| e.system.twin.state().clone()).await?;
    if s.last_sync.is_none() {
        return Err(ApiError::new(ErrorCode::Stale, "the twin has not synced yet"));
    }
    if s.staleness_s > (STALE_AFTER_WINDOWS * WINDOW_S) as f64 {
        return Err(ApiError::new(ErrorCode::Stale, format!("last sync {} s ago", s.staleness_s))
            .with_detail(json!({"last_sync": s.last_sync, "staleness_s": s.staleness_s})));
    }
    Ok(Json(s))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Realtime {
    pub t: f64,
    pub metrics: SimMetrics,
    pub records: Vec<AggregatedRecord>,
}

async fn realtime(State(engine): State<EngineHandle>, q: Params) -> Result<Json<Realtime>, ApiError> {
    let map = params(q, &["window"])?;
    let window: u64 = number(&map, "window", WINDOW_S as u64)?;
    if window == 0 {
        return Err(ApiError::bad_request("`window` must be positive"));
    }
    engine
        .call(move |e| {
            let sys = &e.system;
            let metrics = match sys.world.sim.metrics(window as f64) {
                Ok(m) => m,
                Err(SimError::EmptyWindow) => idle_metrics(sys.world.sim.network(), window as f64),
                Err(err) => return Err(ApiError::bad_request(err.to_string())),
            };
            let mut records = Vec::new();
            if let Some(latest) = sys.lake.latest_window() {
                let to = latest + WINDOW_S;
                for sensor in sys.sensor_ids() {
                    records.extend(sys.lake.query_range(sensor, to - window as i64, to).into_iter().cloned());
                }
            }
            Ok(Realtime { t: sys.clock(), metrics, records })
        })
        .await?
        .map(Json)
}

/// A window with no vehicles reads as zeros rather than an error.
fn idle_metrics(net: &RoadNetwork, window_s: f64) -> SimMetrics {
    SimMetrics {
        window_s,
        avg_travel_time: None,
        completed_trips: 0,
        throughput_vpm: net.nodes().iter().map(|n| (n.clone(), 0.0)).collect(),
        mean_occupancy: net.segments().iter().map(|s| (s.id.clone(), 0.0)).collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub forecast: Forecast,
    /// Every step up to `h`; the last entry is `forecast.value`.
    pub path: Vec<f64>,
    pub model: ModelVersion,
    /// Live forecasts of the active version over the last day; `None` before any are scored.
    pub recent_metrics: Option<EvalMetrics>,
}

async fn predictions(State(engine): State<EngineHandle>, q: Params) -> Result<Json<Prediction>, ApiError> {
    let map = params(q, &["sensor", "h"])?;
    let sensor = map.get("sensor").cloned().ok_or_else(|| ApiError::bad_request("`sensor` is required"))?;
    let h: u32 = number(&map, "h", 1)?;
    if h == 0 || h > MAX_PREDICTION_HORIZON {
        return Err(ApiError::bad_request(format!("`h` must be in 1..={MAX_PREDICTION_HORIZON}")));
    }
    engine
        .call(move |e| {
            let sys = &e.system;
            if !sys.sensor_ids().any(|s| s.as_str() == sensor) {
                return Err(ApiError::not_found(format!("unknown sensor `{sensor}`")));
            }
            let (forecast, path) = sys.forecast(&sensor, h)?;
            let model = sys
                .models
                .registry
                .active_version(&forecast.key)
                .ok_or_else(|| ApiError::not_found(format!("no active model for `{}`", forecast.key)))?;
            let tag = format!("v{}", model.v);
            let mut scored: Vec<(f64, f64)> = sys
                .outcomes()
                .filter(|o| o.key == forecast.key && o.version == tag)
                .map(|o| (o.actual, o.predicted))
                .collect();
            let keep = scored.len().saturating_sub(RECENT_OUTCOMES);
            scored.drain(..keep);
            let (actual, predicted): (Vec<f64>, Vec<f64>) = scored.into_iter().unzip();
            let recent_metrics = EvalMetrics::compute(&actual, &predicted).ok();
            Ok(Prediction { forecast, path, model, recent_metrics })
        })
        .await?
        .map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRequest {
    #[serde(default)]
    pub changes: Vec<Change>,
    #[serde(default)]
    pub horizon: Option<u32>,
    #[serde(default)]
    pub base: ScenarioBase,
    #[serde(default)]
    pub requested_by: String,
}

async fn create_scenario(
    State(engine): State<EngineHandle>,
    req: Result<Json<ScenarioRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let req = body(req)?;
    let mut scenario = Scenario::new("", req.changes, req.horizon.unwrap_or(15));
    scenario.base = req.base;
    scenario.requested_by = req.requested_by;
    let id = engine.call(move |e| e.submit(scenario)).await??;
    Ok((StatusCode::CREATED, Json(json!({"id": id}))).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub id: String,
    pub status: ScenarioStatus,
    pub horizon: u32,
    pub changes: usize,
}

async fn list_scenarios(State(engine): State<EngineHandle>, q: Params) -> Result<Json<Value>, ApiError> {
    params(q, &[])?;
    let list: Vec<ScenarioSummary> = engine
        .call(|e| {
            e.scenarios()
                .map(|s| ScenarioSummary {
                    id: s.id.clone(),
                    status: s.status,
                    horizon: s.scenario.horizon,
                    changes: s.scenario.changes.len(),
                })
                .collect()
        })
        .await?;
    Ok(Json(json!({"scenarios": list})))
}

async fn get_scenario(State(engine): State<EngineHandle>, Path(id): Path<String>) -> Result<Json<ScenarioEntry>, ApiError> {
    engine
        .call(move |e| e.scenario(&id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown scenario `{id}`"))))
        .await?
        .map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionRequest {
    pub scenario_id: String,
    pub change_index: usize,
}

async fn intervene(
    State(engine): State<EngineHandle>,
    req: Result<Json<InterventionRequest>, JsonRejection>,
) -> Result<Json<Acknowledgment>, ApiError> {
    let req = body(req)?;
    engine.call(move |e| e.intervene(&req.scenario_id, req.change_index)).await?.map(Json)
}

async fn models(State(engine): State<EngineHandle>, q: Params) -> Result<Json<Value>, ApiError> {
    params(q, &[])?;
    let manifests = engine.call(|e| e.system.models.registry.manifests()).await?;
    Ok(Json(json!({"manifests": manifests})))
}

fn event_type(ev: &SystemEvent) -> &'static str {
    match ev {
        SystemEvent::StateUpdate(_) => "state_update",
        SystemEvent::NewAggregate(_) => "new_aggregate",
        SystemEvent::Drift(_) => "drift",
        SystemEvent::Promotion(_) => "promotion",
        SystemEvent::ScenarioDone { .. } => "scenario_done",
    }
}

/// Newline-delimited JSON events, optionally filtered with
/// `?types=state_update,drift`.
async fn live(State(engine): State<EngineHandle>, q: Params) -> Result<Response, ApiError> {
    let map = params(q, &["types"])?;
    let wanted: BTreeSet<String> = match map.get("types") {
        None => EVENT_TYPES.iter().map(|s| s.to_string()).collect(),
        Some(list) => {
            let set: BTreeSet<String> = list.split(',').map(|s| s.trim().to_string()).collect();
            if let Some(bad) = set.iter().find(|t| !EVENT_TYPES.contains(&t.as_str())) {
                return Err(ApiError::bad_request(format!("unknown event type `{bad}`"))
                    .with_detail(json!({"allowed": EVENT_TYPES})));
            }
            set
        }
    };
    let rx = engine.subscribe();
    let events = stream::unfold((rx, wanted, engine), |(mut rx, wanted, engine)| async move {
        loop {
            let next = tokio::select! {
                r = rx.recv() => r,
                _ = engine.stopped() => return None,
            };
            match next {
                Ok(ev) if wanted.contains(event_type(&ev)) => {
                    let mut line = serde_json::to_string(&ev).expect("events serialize");
                    line.push('\n');
                    return Some((Ok::<_, std::convert::Infallible>(line), (rx, wanted, engine)));
                }
                Ok(_) => continue,
                Err(RecvError::Lagged(n)) => {
                    log::warn!("live subscriber skipped {n} events");
                    continue;
                }
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(events)).into_response())
}

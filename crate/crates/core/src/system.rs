//! The closed loop: physical world → lake → twin sync → forecasting → drift
//! monitoring → retrain/promote, plus the actuation path back.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audit::{AuditError, AuditKind, AuditLog};
use crate::datalake::{clean, DataLake, LakeError, SeriesKey, INPUT_STEPS};
use crate::mlops::{
    DataRange, DriftConfig, DriftReport, MlopsError, ModelManager, Registry, RetrainJob, RetrainOutcome,
    RetrainSettings, TrainedCandidate,
};
use crate::network::{RoadNetwork, SensorId};
use crate::pipeline::{PhysicalWorld, PipelineError, WorldConfig};
use crate::predictor::{Forecast, PredictError};
use crate::sensing::{AggregatedRecord, WINDOW_S};
use crate::simulator::DemandProfile;
use crate::twin::{Acknowledgment, Intervention, Twin, TwinConfig, TwinError, TwinState};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Lake(#[from] LakeError),
    #[error(transparent)]
    Mlops(#[from] MlopsError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error("unknown sensor `{0}`")]
    UnknownSensor(String),
    #[error("not enough history to forecast `{0}`")]
    NoHistory(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// Train on the loop's own thread; deterministic.
    #[default]
    Inline,
    /// Train on a worker thread while the loop keeps serving.
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub world: WorldConfig,
    pub drift: DriftConfig,
    pub retrain: RetrainSettings,
    pub retrain_mode: RetrainMode,
    pub twin: TwinConfig,
    /// Monitored series; empty means flow of every sensor.
    pub keys: Vec<SeriesKey>,
    /// Train the first model automatically once this many windows exist.
    pub bootstrap_after_windows: Option<usize>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            drift: DriftConfig::default(),
            retrain: RetrainSettings::default(),
            retrain_mode: RetrainMode::Inline,
            twin: TwinConfig::default(),
            keys: Vec::new(),
            bootstrap_after_windows: None,
        }
    }
}

/// What the loop publishes for live subscribers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
pub enum SystemEvent {
    StateUpdate(TwinState),
    NewAggregate(AggregatedRecord),
    Drift(DriftReport),
    Promotion(RetrainOutcome),
    ScenarioDone { id: String },
}

/// One scored forecast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub key: SeriesKey,
    pub window_start: i64,
    pub actual: f64,
    pub predicted: f64,
    pub version: String,
}

#[derive(Clone, Debug)]
struct PendingPrediction {
    window_start: i64,
    value: f64,
    version: String,
}

#[derive(Clone, Debug)]
struct DeferredRetrain {
    from: i64,
    report: DriftReport,
}

enum Running {
    Inline(Box<TrainedCandidate>),
    Thread(JoinHandle<Result<TrainedCandidate, MlopsError>>),
}

const OUTCOME_HISTORY: usize = 60 * 288;

pub struct DigitalTwinSystem {
    pub world: PhysicalWorld,
    pub lake: DataLake,
    pub models: Arc<ModelManager>,
    pub twin: Twin,
    pub audit: Arc<AuditLog>,
    config: SystemConfig,
    keys: Vec<SeriesKey>,
    pending: BTreeMap<SeriesKey, PendingPrediction>,
    latest_forecast: BTreeMap<SeriesKey, Forecast>,
    deferred: BTreeMap<SeriesKey, DeferredRetrain>,
    running: BTreeMap<SeriesKey, Running>,
    outcomes: VecDeque<Outcome>,
    events: Vec<SystemEvent>,
    windows_seen: u64,
    last_scheduled: BTreeMap<SeriesKey, u64>,
}

impl std::fmt::Debug for DigitalTwinSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DigitalTwinSystem")
            .field("clock", &self.world.clock())
            .field("keys", &self.keys)
            .field("windows_seen", &self.windows_seen)
            .finish()
    }
}

impl DigitalTwinSystem {
    pub fn new(
        net: Arc<RoadNetwork>,
        demand: Arc<DemandProfile>,
        config: SystemConfig,
        lake: DataLake,
        registry: Arc<Registry>,
        audit: Arc<AuditLog>,
    ) -> Result<Self, SystemError> {
        let world = PhysicalWorld::new(Arc::clone(&net), Arc::clone(&demand), &config.world)?;
        let models = Arc::new(ModelManager::new(registry, config.drift.clone())?);
        let twin = Twin::new(Arc::clone(&net), demand, config.twin.clone())?;
        let keys = if config.keys.is_empty() {
            net.sensors().keys().map(|s| SeriesKey::flow(s.as_str())).collect()
        } else {
            config.keys.clone()
        };
        Ok(Self {
            world,
            lake,
            models,
            twin,
            audit,
            config,
            keys,
            pending: BTreeMap::new(),
            latest_forecast: BTreeMap::new(),
            deferred: BTreeMap::new(),
            running: BTreeMap::new(),
            outcomes: VecDeque::new(),
            events: Vec::new(),
            windows_seen: 0,
            last_scheduled: BTreeMap::new(),
        })
    }

    /// In-memory system on the given network and demand.
    pub fn in_memory(net: Arc<RoadNetwork>, demand: Arc<DemandProfile>, config: SystemConfig) -> Result<Self, SystemError> {
        Self::new(
            net,
            demand,
            config,
            DataLake::in_memory(),
            Arc::new(Registry::in_memory()),
            Arc::new(AuditLog::in_memory()),
        )
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn keys(&self) -> &[SeriesKey] {
        &self.keys
    }

    pub fn clock(&self) -> f64 {
        self.world.clock()
    }

    pub fn outcomes(&self) -> impl Iterator<Item = &Outcome> {
        self.outcomes.iter()
    }

    pub fn latest_forecast(&self, key: &SeriesKey) -> Option<&Forecast> {
        self.latest_forecast.get(key)
    }

    pub fn retrain_in_flight(&self, key: &SeriesKey) -> bool {
        self.running.contains_key(key) || self.deferred.contains_key(key)
    }

    pub fn drain_events(&mut self) -> Vec<SystemEvent> {
        std::mem::take(&mut self.events)
    }

    /// Advances the physical world by one window and runs every loop stage on
    /// whatever the link delivered.
    pub fn step_window(&mut self) -> Result<Vec<AggregatedRecord>, SystemError> {
        let delivered = self.world.run_windows(1)?;
        self.ingest(&delivered)?;
        Ok(delivered)
    }

    /// Runs `n` windows.
    pub fn run_windows(&mut self, n: usize) -> Result<(), SystemError> {
        for _ in 0..n {
            self.step_window()?;
        }
        Ok(())
    }

    fn ingest(&mut self, delivered: &[AggregatedRecord]) -> Result<(), SystemError> {
        let mut by_window: BTreeMap<i64, Vec<AggregatedRecord>> = BTreeMap::new();
        for r in delivered {
            self.lake.ingest(r.clone())?;
            self.events.push(SystemEvent::NewAggregate(r.clone()));
            by_window.entry(r.window_start).or_default().push(r.clone());
        }
        self.lake.flush()?;
        for (ws, recs) in by_window {
            match self.twin.sync(&recs) {
                Ok(_) => {}
                Err(TwinError::StaleInput { .. }) => log::warn!("late records for window {ws} skipped by twin sync"),
                Err(e) => return Err(e.into()),
            }
            self.windows_seen += 1;
            self.score(&recs)?;
        }
        self.twin.advance(self.world.clock());
        self.events.push(SystemEvent::StateUpdate(self.twin.state().clone()));
        self.maybe_bootstrap()?;
        self.schedule_due()?;
        self.launch_ready()?;
        self.collect_finished()?;
        self.forecast_next()?;
        Ok(())
    }

    fn score(&mut self, recs: &[AggregatedRecord]) -> Result<(), SystemError> {
        for key in self.keys.clone() {
            let Some(rec) = recs.iter().find(|r| r.sensor == key.sensor) else { continue };
            let Some(p) = self.pending.get(&key) else { continue };
            if p.window_start != rec.window_start || rec.missing {
                continue;
            }
            let p = self.pending.remove(&key).expect("checked");
            let actual = key.variable.read(rec);
            let report = match self.models.record_outcome(&key, rec.window_start, actual, p.value) {
                Ok(r) => r,
                Err(MlopsError::NoActiveModel(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            self.outcomes.push_back(Outcome {
                key: key.clone(),
                window_start: rec.window_start,
                actual,
                predicted: p.value,
                version: p.version,
            });
            if self.outcomes.len() > OUTCOME_HISTORY {
                self.outcomes.pop_front();
            }
            if report.triggered && !self.retrain_in_flight(&key) {
                self.audit.append(self.world.clock(), AuditKind::Drift, json!(report))?;
                self.events.push(SystemEvent::Drift(report.clone()));
                self.models.note_retrain_scheduled(&key);
                self.deferred.insert(key.clone(), DeferredRetrain { from: report.window_from, report });
            }
        }
        Ok(())
    }

    fn data_end(&self) -> Option<i64> {
        self.lake.latest_window().map(|w| w + WINDOW_S)
    }

    /// Range used by operator and scheduled retrains: all data, capped.
    pub fn full_range(&self) -> Option<DataRange> {
        let to = self.data_end()?;
        let earliest = self.lake.earliest_window()?;
        let cap = self.config.drift.history_cap_windows as i64 * WINDOW_S;
        Some(DataRange { from: earliest.max(to - cap), to })
    }

    fn maybe_bootstrap(&mut self) -> Result<(), SystemError> {
        let Some(after) = self.config.bootstrap_after_windows else { return Ok(()) };
        if self.windows_seen < after as u64 {
            return Ok(());
        }
        for key in self.keys.clone() {
            if self.models.registry.active(&key).is_none() && !self.retrain_in_flight(&key) {
                if let Some(range) = self.full_range() {
                    self.launch(&key, range, None)?;
                }
            }
        }
        Ok(())
    }

    fn schedule_due(&mut self) -> Result<(), SystemError> {
        let Some(every) = self.config.drift.schedule_every else { return Ok(()) };
        for key in self.keys.clone() {
            if self.models.registry.active(&key).is_none() || self.retrain_in_flight(&key) {
                continue;
            }
            let last = *self.last_scheduled.entry(key.clone()).or_insert(self.windows_seen);
            if self.windows_seen >= last + every {
                self.last_scheduled.insert(key.clone(), self.windows_seen);
                if let Some(range) = self.full_range() {
                    self.launch(&key, range, None)?;
                }
            }
        }
        Ok(())
    }

    fn launch_ready(&mut self) -> Result<(), SystemError> {
        let Some(end) = self.data_end() else { return Ok(()) };
        let need = self.config.drift.drift_retrain_min_windows as i64 * WINDOW_S;
        let ready: Vec<SeriesKey> = self
            .deferred
            .iter()
            .filter(|(k, d)| end - d.from >= need && !self.running.contains_key(*k))
            .map(|(k, _)| k.clone())
            .collect();
        for key in ready {
            let d = self.deferred.remove(&key).expect("listed");
            self.launch(&key, DataRange { from: d.from, to: end }, Some(d.report))?;
        }
        Ok(())
    }

    fn launch(&mut self, key: &SeriesKey, range: DataRange, report: Option<DriftReport>) -> Result<(), SystemError> {
        let job = match RetrainJob::prepare(&self.models.registry, &self.lake, key, range, &self.config.retrain, report) {
            Ok(j) => j,
            Err(e @ (MlopsError::InsufficientData(_) | MlopsError::Predict(_))) => {
                log::warn!("retrain of `{key}` not started: {e}");
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        let running = match self.config.retrain_mode {
            RetrainMode::Inline => match job.run() {
                Ok(c) => Running::Inline(Box::new(c)),
                Err(e) => {
                    log::warn!("retrain of `{key}` failed: {e}");
                    return Ok(());
                }
            },
            RetrainMode::Background => Running::Thread(std::thread::spawn(move || job.run())),
        };
        self.running.insert(key.clone(), running);
        Ok(())
    }

    fn collect_finished(&mut self) -> Result<(), SystemError> {
        let done: Vec<SeriesKey> = self
            .running
            .iter()
            .filter(|(_, r)| match r {
                Running::Inline(_) => true,
                Running::Thread(h) => h.is_finished(),
            })
            .map(|(k, _)| k.clone())
            .collect();
        for key in done {
            let candidate = match self.running.remove(&key).expect("listed") {
                Running::Inline(c) => Ok(*c),
                Running::Thread(h) => h.join().unwrap_or_else(|_| Err(MlopsError::Storage("retrain worker panicked".into()))),
            };
            match candidate {
                Ok(c) => self.finish(c)?,
                Err(e) => log::warn!("retrain of `{key}` failed: {e}"),
            }
        }
        Ok(())
    }

    fn finish(&mut self, c: TrainedCandidate) -> Result<(), SystemError> {
        let outcome = c.complete(&self.models.registry, self.world.clock())?;
        self.models.note_retrain(&outcome);
        self.audit.append(self.world.clock(), AuditKind::Promote, json!(outcome))?;
        if outcome.promoted {
            // The pending forecast came from the replaced model.
            self.pending.remove(&outcome.key);
        }
        self.events.push(SystemEvent::Promotion(outcome));
        Ok(())
    }

    /// Waits for background retrains to finish and applies their outcome.
    pub fn join_retrains(&mut self) -> Result<(), SystemError> {
        for (key, r) in std::mem::take(&mut self.running) {
            let c = match r {
                Running::Inline(c) => Ok(*c),
                Running::Thread(h) => h.join().unwrap_or_else(|_| Err(MlopsError::Storage("retrain worker panicked".into()))),
            };
            match c {
                Ok(c) => self.finish(c)?,
                Err(e) => log::warn!("retrain of `{key}` failed: {e}"),
            }
        }
        Ok(())
    }

    /// Operator-requested retrain over the capped full history.
    pub fn request_retrain(&mut self, key: &SeriesKey) -> Result<(), SystemError> {
        let range = self
            .full_range()
            .ok_or_else(|| MlopsError::InsufficientData("lake is empty".into()))?;
        self.launch(key, range, None)?;
        self.models.note_retrain_scheduled(key);
        self.collect_finished()
    }

    /// Last `INPUT_STEPS` cleaned values of `key` ending at the newest window.
    pub fn recent_inputs(&self, key: &SeriesKey) -> Result<(i64, Vec<f64>), SystemError> {
        let end = self.data_end().ok_or_else(|| SystemError::NoHistory(key.to_string()))?;
        let from = end - INPUT_STEPS as i64 * WINDOW_S;
        let series = clean(&self.lake.series(key, from, end));
        let values: Option<Vec<f64>> = series.values.iter().copied().collect();
        match values {
            Some(v) if v.len() == INPUT_STEPS => Ok((end - WINDOW_S, v)),
            _ => Err(SystemError::NoHistory(key.to_string())),
        }
    }

    /// `h`-step forecast for one sensor's flow from the newest data.
    pub fn forecast(&self, sensor: &str, h: u32) -> Result<(Forecast, Vec<f64>), SystemError> {
        let key = self
            .keys
            .iter()
            .find(|k| k.sensor.as_str() == sensor)
            .cloned()
            .ok_or_else(|| SystemError::UnknownSensor(sensor.into()))?;
        let model = self
            .models
            .registry
            .active(&key)
            .ok_or_else(|| MlopsError::NoActiveModel(key.to_string()))?;
        let (issued_at, inputs) = self.recent_inputs(&key)?;
        let path = model.predict_ahead(&key, &inputs, h)?;
        let value = *path.last().ok_or_else(|| SystemError::NoHistory("zero horizon".into()))?;
        Ok((Forecast { key, horizon: h, value, issued_at }, path))
    }

    /// Per-sensor forecasts for the next `h` windows, for scenario overlays.
    pub fn forecast_overlay(&self, h: u32) -> Vec<Forecast> {
        let mut out = Vec::new();
        for key in &self.keys {
            let Ok((f, path)) = self.forecast(key.sensor.as_str(), h) else { continue };
            out.extend(path.into_iter().enumerate().map(|(k, value)| Forecast {
                key: f.key.clone(),
                horizon: k as u32 + 1,
                value,
                issued_at: f.issued_at,
            }));
        }
        out
    }

    fn forecast_next(&mut self) -> Result<(), SystemError> {
        for key in self.keys.clone() {
            let Some(model) = self.models.registry.active(&key) else { continue };
            let Ok((issued_at, inputs)) = self.recent_inputs(&key) else { continue };
            let value = model.predict_raw(&key, &inputs)?;
            self.pending.insert(
                key.clone(),
                PendingPrediction { window_start: issued_at + WINDOW_S, value, version: model.version.clone() },
            );
            self.latest_forecast.insert(key.clone(), Forecast { key, horizon: 1, value, issued_at });
        }
        Ok(())
    }

    /// Actuates an intervention on the physical world.
    pub fn act(&mut self, iv: &Intervention) -> Result<Acknowledgment, SystemError> {
        let audit = Arc::clone(&self.audit);
        Ok(self.twin.act(iv, &mut self.world.sim, Some(&audit))?)
    }

    pub fn sensor_ids(&self) -> impl Iterator<Item = &SensorId> {
        self.twin.network().sensors().keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::predictor::Hyper;

    fn small_config() -> SystemConfig {
        SystemConfig {
            keys: vec![SeriesKey::flow("s-2")],
            retrain: RetrainSettings {
                hyper: Hyper { hidden_dim: 4, epochs: 3, ..Hyper::default() },
                ..RetrainSettings::default()
            },
            bootstrap_after_windows: Some(72),
            ..SystemConfig::default()
        }
    }

    fn grid_system(config: SystemConfig) -> DigitalTwinSystem {
        DigitalTwinSystem::in_memory(Arc::new(fixtures::grid_network()), Arc::new(fixtures::grid_demand()), config).unwrap()
    }

    #[test]
    fn window_feeds_lake_twin_and_events() {
        let mut s = grid_system(small_config());
        s.step_window().unwrap();
        assert_eq!(s.lake.len(), 4);
        assert_eq!(s.twin.state().last_sync, Some(0));
        let events = s.drain_events();
        assert_eq!(events.iter().filter(|e| matches!(e, SystemEvent::NewAggregate(_))).count(), 4);
        assert!(matches!(events.last(), Some(SystemEvent::StateUpdate(_))));
    }

    #[test]
    fn bootstrap_then_forecasts_are_scored() {
        let mut s = grid_system(small_config());
        s.run_windows(72).unwrap();
        let key = SeriesKey::flow("s-2");
        assert_eq!(s.models.registry.active_version(&key).map(|v| v.v), Some(1));
        assert!(s.latest_forecast(&key).is_some());
        s.run_windows(3).unwrap();
        let scored: Vec<_> = s.outcomes().collect();
        assert_eq!(scored.len(), 3);
        assert!(scored.iter().all(|o| o.version == "v1"));
        assert_eq!(s.audit.count(AuditKind::Promote), 1);
    }

    #[test]
    fn forecast_matches_predictor_on_latest_window() {
        let mut s = grid_system(small_config());
        s.run_windows(80).unwrap();
        let key = SeriesKey::flow("s-2");
        let (f, path) = s.forecast("s-2", 1).unwrap();
        let (_, inputs) = s.recent_inputs(&key).unwrap();
        let m = s.models.registry.active(&key).unwrap();
        assert_eq!(f.value, m.predict_raw(&key, &inputs).unwrap());
        assert_eq!(path.len(), 1);
        assert!(matches!(s.forecast("nope", 1), Err(SystemError::UnknownSensor(_))));
    }

    #[test]
    fn background_retrain_completes() {
        let mut cfg = small_config();
        cfg.retrain_mode = RetrainMode::Background;
        let mut s = grid_system(cfg);
        s.run_windows(72).unwrap();
        s.join_retrains().unwrap();
        assert!(s.models.registry.active(&SeriesKey::flow("s-2")).is_some());
        assert!(s.drain_events().iter().any(|e| matches!(e, SystemEvent::Promotion(_))));
    }
}

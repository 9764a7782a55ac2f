//! The loop thread. It owns the [`DigitalTwinSystem`], advances it one
//! window at a time and runs every request as a closure between windows,
//! so handlers see consistent state and all mutations are serialized.

use std::collections::BTreeMap;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot, watch};

use digit_core::audit::AuditKind;
use digit_core::system::{DigitalTwinSystem, SystemEvent};
use digit_core::twin::{Acknowledgment, Scenario, ScenarioBase, ScenarioResult, ScenarioStatus};

use crate::error::ApiError;

type Job = Box<dyn FnOnce(&mut Engine) + Send>;

enum Command {
    Run(Job),
    Shutdown,
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    /// Pause between windows; `None` advances only on [`EngineHandle::step`].
    pub window_interval: Option<Duration>,
    /// Stop advancing after this many windows.
    pub max_windows: Option<u64>,
    pub event_capacity: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { window_interval: None, max_windows: None, event_capacity: 1024 }
    }
}

/// A submitted scenario and, once finished, its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub id: String,
    pub status: ScenarioStatus,
    pub scenario: Scenario,
    pub result: Option<ScenarioResult>,
    pub error: Option<String>,
}

pub struct Engine {
    pub system: DigitalTwinSystem,
    scenarios: BTreeMap<String, ScenarioEntry>,
    acks: BTreeMap<(String, usize), Acknowledgment>,
    next_scenario: u64,
    windows: u64,
    halted: Option<String>,
    config: EngineConfig,
    events: broadcast::Sender<SystemEvent>,
    inbox: mpsc::Sender<Command>,
}

impl Engine {
    /// Starts the loop thread. Joining the handle returns the system after
    /// [`EngineHandle::shutdown`].
    pub fn spawn(system: DigitalTwinSystem, config: EngineConfig) -> (EngineHandle, JoinHandle<DigitalTwinSystem>) {
        let (tx, rx) = mpsc::channel();
        let (events, _) = broadcast::channel(config.event_capacity.max(1));
        let (stop, _) = watch::channel(false);
        let handle = EngineHandle { tx: tx.clone(), events: events.clone(), stop: std::sync::Arc::new(stop) };
        let mut engine = Engine {
            system,
            scenarios: BTreeMap::new(),
            acks: BTreeMap::new(),
            next_scenario: 1,
            windows: 0,
            halted: None,
            config,
            events,
            inbox: tx,
        };
        let join = thread::Builder::new()
            .name("digit-engine".into())
            .spawn(move || {
                engine.run(rx);
                engine.finish()
            })
            .expect("engine thread starts");
        (handle, join)
    }

    fn run(&mut self, rx: mpsc::Receiver<Command>) {
        let mut next = self.config.window_interval.map(|d| Instant::now() + d);
        loop {
            let advancing = self.may_advance();
            let cmd = match (advancing, next) {
                (true, Some(deadline)) => {
                    let wait = deadline.saturating_duration_since(Instant::now());
                    match rx.recv_timeout(wait) {
                        Ok(c) => Some(c),
                        Err(RecvTimeoutError::Timeout) => None,
                        Err(RecvTimeoutError::Disconnected) => return,
                    }
                }
                _ => match rx.recv() {
                    Ok(c) => Some(c),
                    Err(_) => return,
                },
            };
            match cmd {
                Some(Command::Run(job)) => job(self),
                Some(Command::Shutdown) => return,
                None => {
                    self.advance();
                    next = self.config.window_interval.map(|d| Instant::now() + d);
                }
            }
        }
    }

    fn may_advance(&self) -> bool {
        self.halted.is_none() && self.config.max_windows.is_none_or(|m| self.windows < m)
    }

    fn finish(mut self) -> DigitalTwinSystem {
        if let Err(e) = self.system.join_retrains() {
            log::error!("retrain at shutdown: {e}");
        }
        if let Err(e) = self.system.lake.flush() {
            log::error!("lake flush at shutdown: {e}");
        }
        self.system
    }

    /// Runs one window and publishes its events. Returns false once the
    /// loop has halted on an error or reached `max_windows`.
    pub fn advance(&mut self) -> bool {
        if !self.may_advance() {
            return false;
        }
        if let Err(e) = self.system.step_window() {
            log::error!("loop halted at t={}: {e}", self.system.clock());
            self.halted = Some(e.to_string());
            return false;
        }
        self.windows += 1;
        for ev in self.system.drain_events() {
            self.publish(ev);
        }
        true
    }

    fn publish(&self, ev: SystemEvent) {
        // No subscribers is fine.
        let _ = self.events.send(ev);
    }

    pub fn windows(&self) -> u64 {
        self.windows
    }

    pub fn halted(&self) -> Option<&str> {
        self.halted.as_deref()
    }

    pub fn scenario(&self, id: &str) -> Option<&ScenarioEntry> {
        self.scenarios.get(id)
    }

    pub fn scenarios(&self) -> impl Iterator<Item = &ScenarioEntry> {
        self.scenarios.values()
    }

    /// Validates and queues a scenario; it runs on a worker thread against
    /// a copy of the twin while the loop keeps going.
    pub fn submit(&mut self, mut scenario: Scenario) -> Result<String, ApiError> {
        let id = format!("sc-{}", self.next_scenario);
        scenario.id = id.clone();
        self.system.twin.validate_scenario(&scenario)?;
        self.next_scenario += 1;
        let twin = self.system.twin.clone();
        let truth = (scenario.base == ScenarioBase::GroundTruth).then(|| self.system.world.sim.snapshot());
        let forecast = self.system.forecast_overlay(scenario.horizon);
        scenario.status = ScenarioStatus::Running;
        self.scenarios.insert(
            id.clone(),
            ScenarioEntry { id: id.clone(), status: ScenarioStatus::Running, scenario: scenario.clone(), result: None, error: None },
        );
        let inbox = self.inbox.clone();
        thread::spawn(move || {
            let outcome = twin.run_scenario(&scenario, truth.as_ref(), forecast).map_err(|e| e.to_string());
            let id = scenario.id.clone();
            let _ = inbox.send(Command::Run(Box::new(move |engine: &mut Engine| engine.complete(&id, outcome))));
        });
        Ok(id)
    }

    fn complete(&mut self, id: &str, outcome: Result<ScenarioResult, String>) {
        let Some(entry) = self.scenarios.get_mut(id) else { return };
        let status = if outcome.is_ok() { ScenarioStatus::Done } else { ScenarioStatus::Failed };
        entry.status = status;
        entry.scenario.status = status;
        let detail = match &outcome {
            Ok(r) => serde_json::json!({"id": id, "status": status, "deltas": r.deltas}),
            Err(e) => serde_json::json!({"id": id, "status": status, "error": e}),
        };
        match outcome {
            Ok(r) => entry.result = Some(r),
            Err(e) => entry.error = Some(e),
        }
        if let Err(e) = self.system.audit.append(self.system.clock(), AuditKind::Scenario, detail) {
            log::error!("audit: {e}");
        }
        self.publish(SystemEvent::ScenarioDone { id: id.into() });
    }

    /// Actuates change `change_index` of a finished scenario. Repeating the
    /// same request returns the first acknowledgment.
    pub fn intervene(&mut self, scenario_id: &str, change_index: usize) -> Result<Acknowledgment, ApiError> {
        let key = (scenario_id.to_string(), change_index);
        if let Some(ack) = self.acks.get(&key) {
            return Ok(ack.clone());
        }
        let entry = self
            .scenarios
            .get(scenario_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown scenario `{scenario_id}`")))?;
        if entry.status != ScenarioStatus::Done {
            return Err(ApiError::bad_request(format!("scenario `{scenario_id}` is {:?}, not Done", entry.status)));
        }
        let change = entry.scenario.changes.get(change_index).cloned().ok_or_else(|| {
            ApiError::bad_request(format!(
                "change_index {change_index} out of range; scenario has {} changes",
                entry.scenario.changes.len()
            ))
        })?;
        let kind = change.try_into().map_err(|e: digit_core::twin::TwinError| ApiError::bad_request(e.to_string()))?;
        let iv = digit_core::twin::Intervention { kind, origin_scenario: Some(scenario_id.into()), applied_at: None };
        let ack = self.system.act(&iv)?;
        self.acks.insert(key, ack.clone());
        Ok(ack)
    }
}

/// Cheap to clone; every handler holds one.
#[derive(Clone)]
pub struct EngineHandle {
    tx: mpsc::Sender<Command>,
    events: broadcast::Sender<SystemEvent>,
    stop: std::sync::Arc<watch::Sender<bool>>,
}

impl EngineHandle {
    /// Runs `f` on the loop thread and returns its result.
    pub async fn call<R, F>(&self, f: F) -> Result<R, ApiError>
    where
        R: Send + 'static,
        F: FnOnce(&mut Engine) -> R + Send + 'static,
    {
        self.send(f)?.await.map_err(|_| ApiError::internal("engine stopped"))
    }

    /// Blocking form of [`EngineHandle::call`] for non-async callers.
    pub fn call_blocking<R, F>(&self, f: F) -> Result<R, ApiError>
    where
        R: Send + 'static,
        F: FnOnce(&mut Engine) -> R + Send + 'static,
    {
        self.send(f)?.blocking_recv().map_err(|_| ApiError::internal("engine stopped"))
    }

    fn send<R, F>(&self, f: F) -> Result<oneshot::Receiver<R>, ApiError>
    where
        R: Send + 'static,
        F: FnOnce(&mut Engine) -> R + Send + 'static,
    {
        let (reply, rx) = oneshot::channel();
        let job: Job = Box::new(move |engine| {
            let _ = reply.send(f(engine));
        });
        self.tx.send(Command::Run(job)).map_err(|_| ApiError::internal("engine stopped"))?;
        Ok(rx)
    }

    /// Advances `n` windows; returns how many ran.
    pub async fn step(&self, n: u64) -> Result<u64, ApiError> {
        self.call(move |e| (0..n).take_while(|_| e.advance()).count() as u64).await
    }

    pub fn subscribe(&self) -> broadcast::Receiver<SystemEvent> {
        self.events.subscribe()
    }

    /// Resolves once [`EngineHandle::shutdown`] has been called.
    pub async fn stopped(&self) {
        let mut rx = self.stop.subscribe();
        let _ = rx.wait_for(|s| *s).await;
    }

    pub fn shutdown(&self) {
        self.stop.send_replace(true);
        let _ = self.tx.send(Command::Shutdown);
    }
}

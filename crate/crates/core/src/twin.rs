//! Twin manager: keeps a sensed picture of the network, runs what-if forks
//! and actuates validated interventions.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audit::{AuditKind, AuditLog};
use crate::network::{NodeId, RoadNetwork, RoadSegment, Route, SegmentId, SignalPlan, Violation};
use crate::parallel;
use crate::predictor::Forecast;
use crate::sensing::{AggregatedRecord, Aggregator, CongestionLevel, SensorConfig, Sensors, WINDOW_S};
use crate::simulator::{new_simulation, DemandProfile, Incident, SimError, SimMetrics, SimSnapshot, Simulation};

/// Per-window decay of the occupancy estimate on unsensed segments.
pub const OCCUPANCY_DECAY: f64 = 0.9;
/// Reconstruction needs a sync newer than this many seconds.
pub const MAX_RECONSTRUCT_STALENESS_S: f64 = 2.0 * WINDOW_S as f64;
pub const DEFAULT_HORIZON: u32 = 15;

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("window {window} is older than the last sync ({last_sync})")]
    StaleInput { window: i64, last_sync: i64 },
    #[error("records must cover exactly one window: {0}")]
    BadInput(String),
    #[error("reconstruction unavailable: {0}")]
    ReconstructionUnavailable(String),
    #[error("constraint violation: {}", .0.iter().map(|v| v.message.as_str()).collect::<Vec<_>>().join("; "))]
    ConstraintViolation(Vec<Violation>),
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("command delivery failed: {0}")]
    DeliveryFailure(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntersectionState {
    FreeFlow,
    Congested,
    UnderIntervention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemState {
    Normal,
    IncidentResponse,
    WeatherAffected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentEstimate {
    pub occupancy: f64,
    pub level: CongestionLevel,
    /// Whether the last sync carried a reading for this segment.
    pub sensed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinState {
    pub segments: BTreeMap<SegmentId, SegmentEstimate>,
    pub intersections: BTreeMap<NodeId, IntersectionState>,
    pub system: SystemState,
    /// Window start of the last synced window.
    pub last_sync: Option<i64>,
    /// Seconds between `now` and `last_sync`.
    pub staleness_s: f64,
    pub now: f64,
}

/// One what-if modification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Change {
    Incident {
        segment: SegmentId,
        /// Seconds after the fork starts.
        #[serde(default)]
        start_offset_s: f64,
        duration_s: f64,
        capacity_factor: f64,
    },
    SignalPlan {
        plan: SignalPlan,
    },
    Reroute {
        origin: NodeId,
        dest: NodeId,
        route: Route,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioBase {
    /// Fork from a reconstruction of sensed state.
    #[default]
    Reconstructed,
    /// Fork from a privileged snapshot supplied by the caller.
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    #[serde(default)]
    pub base: ScenarioBase,
    /// Empty means a baseline-only run.
    #[serde(default)]
    pub changes: Vec<Change>,
    #[serde(default = "default_horizon")]
    pub horizon: u32,
    #[serde(default)]
    pub requested_by: String,
    #[serde(default = "pending")]
    pub status: ScenarioStatus,
}

fn default_horizon() -> u32 {
    DEFAULT_HORIZON
}

fn pending() -> ScenarioStatus {
    ScenarioStatus::Pending
}

impl Scenario {
    pub fn new(id: impl Into<String>, changes: Vec<Change>, horizon: u32) -> Self {
        Self {
            id: id.into(),
            base: ScenarioBase::Reconstructed,
            changes,
            horizon,
            requested_by: String::new(),
            status: ScenarioStatus::Pending,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDeltas {
    /// Intervention minus baseline, seconds per trip over the horizon.
    pub avg_travel_time_s: f64,
    /// Intervention minus baseline mean throughput, vehicles per minute.
    pub throughput_vpm: BTreeMap<NodeId, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario_id: String,
    pub started_at: f64,
    pub window_starts: Vec<i64>,
    pub baseline: Vec<SimMetrics>,
    pub intervention: Vec<SimMetrics>,
    pub baseline_sensors: Vec<Vec<AggregatedRecord>>,
    pub intervention_sensors: Vec<Vec<AggregatedRecord>>,
    pub deltas: ScenarioDeltas,
    pub forecast: Vec<Forecast>,
}

impl ScenarioResult {
    /// Flow of `sensor` in window `k` of one arm.
    pub fn sensor_flow(&self, intervention: bool, k: usize, sensor: &str) -> Option<u64> {
        let arm = if intervention { &self.intervention_sensors } else { &self.baseline_sensors };
        arm.get(k)?.iter().find(|r| r.sensor.as_str() == sensor).map(|r| r.flow)
    }
}

/// A change that can be actuated on the physical network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InterventionKind {
    SignalPlan { plan: SignalPlan },
    Reroute { origin: NodeId, dest: NodeId, route: Route },
}

impl TryFrom<Change> for InterventionKind {
    type Error = TwinError;

    fn try_from(c: Change) -> Result<Self, TwinError> {
        match c {
            Change::SignalPlan { plan } => Ok(InterventionKind::SignalPlan { plan }),
            Change::Reroute { origin, dest, route } => Ok(InterventionKind::Reroute { origin, dest, route }),
            Change::Incident { .. } => Err(TwinError::InvalidScenario("incidents cannot be actuated".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub kind: InterventionKind,
    pub origin_scenario: Option<String>,
    pub applied_at: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acknowledgment {
    /// Simulation time the command takes effect.
    pub effective_t: f64,
    pub effective_tick: u64,
    pub intersections: Vec<NodeId>,
}

/// The physical system's command channel.
pub trait CommandSink {
    fn clock(&self) -> f64;
    fn tick_s(&self) -> f64 {
        1.0
    }
    /// Returns the time the plan takes effect.
    fn apply_signal_plan(&mut self, plan: &SignalPlan) -> Result<f64, String>;
    fn set_rerouting(&mut self, origin: &NodeId, dest: &NodeId, route: &Route) -> Result<f64, String>;
}

impl CommandSink for Simulation {
    fn clock(&self) -> f64 {
        Simulation::clock(self)
    }

    fn apply_signal_plan(&mut self, plan: &SignalPlan) -> Result<f64, String> {
        Simulation::apply_signal_plan(self, plan.clone()).map_err(|e| e.to_string())
    }

    fn set_rerouting(&mut self, origin: &NodeId, dest: &NodeId, route: &Route) -> Result<f64, String> {
        Simulation::set_rerouting(self, origin, dest, route).map_err(|e| e.to_string())?;
        Ok(Simulation::clock(self))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinConfig {
    pub max_horizon_windows: u32,
    pub tick_s: f64,
    /// Seed shared by both arms of every scenario.
    pub scenario_seed: u64,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            max_horizon_windows: 72,
            tick_s: 1.0,
            scenario_seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Twin {
    net: Arc<RoadNetwork>,
    demand: Arc<DemandProfile>,
    config: TwinConfig,
    state: TwinState,
    plans: BTreeMap<NodeId, SignalPlan>,
    reroutes: BTreeMap<(NodeId, NodeId), Route>,
    /// Free-flow route and base rate of every OD pair.
    base_routes: Vec<(NodeId, NodeId, f64, Route)>,
    interventions: Vec<(NodeId, f64)>,
    incident_declared: bool,
    weather_declared: bool,
    latest: Vec<AggregatedRecord>,
}

impl Twin {
    pub fn new(net: Arc<RoadNetwork>, demand: Arc<DemandProfile>, config: TwinConfig) -> Result<Self, TwinError> {
        let base_routes = new_simulation(Arc::clone(&net), Arc::clone(&demand), 0)?
            .od_routes()
            .into_iter()
            .map(|(o, d, rate, r)| (o.clone(), d.clone(), rate, r.clone()))
            .collect();
        let segments = net
            .segments()
            .iter()
            .map(|s| {
                (
                    s.id.clone(),
                    SegmentEstimate { occupancy: 0.0, level: CongestionLevel::Clear, sensed: false },
                )
            })
            .collect();
        let intersections = net.signals().keys().map(|n| (n.clone(), IntersectionState::FreeFlow)).collect();
        let plans = net.signals().clone();
        Ok(Self {
            net,
            demand,
            config,
            state: TwinState {
                segments,
                intersections,
                system: SystemState::Normal,
                last_sync: None,
                staleness_s: 0.0,
                now: 0.0,
            },
            plans,
            reroutes: BTreeMap::new(),
            base_routes,
            interventions: Vec::new(),
            incident_declared: false,
            weather_declared: false,
            latest: Vec::new(),
        })
    }

    pub fn network(&self) -> &Arc<RoadNetwork> {
        &self.net
    }

    pub fn config(&self) -> &TwinConfig {
        &self.config
    }

    pub fn state(&self) -> &TwinState {
        &self.state
    }

    /// Records of the most recent sync.
    pub fn latest_records(&self) -> &[AggregatedRecord] {
        &self.latest
    }

    pub fn plans(&self) -> &BTreeMap<NodeId, SignalPlan> {
        &self.plans
    }

    pub fn declare_incident(&mut self, active: bool) {
        self.incident_declared = active;
        self.refresh();
    }

    pub fn declare_weather(&mut self, active: bool) {
        self.weather_declared = active;
        self.refresh();
    }

    /// Moves the twin's notion of "now" forward.
    pub fn advance(&mut self, now: f64) {
        if now > self.state.now {
            self.state.now = now;
        }
        self.refresh();
    }

    /// Folds one window of sensor aggregates into the state.
    pub fn sync(&mut self, records: &[AggregatedRecord]) -> Result<&TwinState, TwinError> {
        let ws = records
            .first()
            .map(|r| r.window_start)
            .ok_or_else(|| TwinError::BadInput("no records".into()))?;
        if records.iter().any(|r| r.window_start != ws) {
            return Err(TwinError::BadInput("records span several windows".into()));
        }
        if let Some(last) = self.state.last_sync {
            if ws < last {
                return Err(TwinError::StaleInput { window: ws, last_sync: last });
            }
        }
        let elapsed = self.state.last_sync.map(|l| ((ws - l) / WINDOW_S) as i32).unwrap_or(1);
        let mut readings: BTreeMap<&SegmentId, (f64, u32)> = BTreeMap::new();
        for r in records.iter().filter(|r| !r.missing) {
            if let Some(seg) = self.net.sensors().get(&r.sensor) {
                let e = readings.entry(seg).or_insert((0.0, 0));
                e.0 += r.mean_occupancy;
                e.1 += 1;
            }
        }
        let watched: BTreeSet<&SegmentId> = self.net.sensors().values().collect();
        let mid = (ws + WINDOW_S / 2) as f64;
        // Calibrate the demand model against what the sensors counted.
        let (observed, expected) = records
            .iter()
            .filter(|r| !r.missing)
            .filter_map(|r| self.net.sensors().get(&r.sensor).map(|seg| (r, seg)))
            .filter_map(|(r, seg)| self.net.segment(seg).map(|s| (r.flow as f64, self.routed_rate(s, mid) * WINDOW_S as f64)))
            .fold((0.0, 0.0), |(o, e), (x, y)| (o + x, e + y));
        let scale = if expected > 0.0 { observed / expected } else { 1.0 };
        let priors: BTreeMap<SegmentId, f64> = self
            .net
            .segments()
            .iter()
            .filter(|s| !watched.contains(&s.id))
            .map(|s| (s.id.clone(), self.demand_prior(s, mid, scale)))
            .collect();
        for (seg, est) in self.state.segments.iter_mut() {
            match (readings.get(seg), priors.get(seg)) {
                (Some(&(sum, n)), _) => {
                    est.occupancy = (sum / f64::from(n)).clamp(0.0, 1.0);
                    est.sensed = true;
                }
                (None, Some(&prior)) => {
                    est.occupancy = prior;
                    est.sensed = false;
                }
                (None, None) => {
                    est.occupancy *= OCCUPANCY_DECAY.powi(elapsed);
                    est.sensed = false;
                }
            }
            est.level = CongestionLevel::from_occupancy(est.occupancy);
        }
        self.state.last_sync = Some(ws);
        self.state.now = self.state.now.max((ws + WINDOW_S) as f64);
        self.latest = records.to_vec();
        self.refresh();
        Ok(&self.state)
    }

    /// OD routes in force, with their base rates.
    fn routes_in_force(&self) -> impl Iterator<Item = (f64, &Route)> {
        self.base_routes
            .iter()
            .map(|(o, d, rate, r)| (*rate, self.reroutes.get(&(o.clone(), d.clone())).unwrap_or(r)))
    }

    /// Demand-model inflow of a segment at time `t`, vehicles per second.
    fn routed_rate(&self, seg: &RoadSegment, t: f64) -> f64 {
        let mult = self.demand.multiplier(t);
        self.routes_in_force()
            .filter(|(_, r)| r.segments.contains(&seg.id))
            .map(|(rate, _)| rate * mult)
            .sum()
    }

    /// Expected occupancy of a segment no sensor watches: calibrated demand
    /// routed over it at free-flow speed, plus the mean deterministic queue
    /// behind its signal while the approach is undersaturated.
    fn demand_prior(&self, seg: &RoadSegment, t: f64, scale: f64) -> f64 {
        let q = self.routed_rate(seg, t) * scale;
        let mut vehicles = q * seg.free_flow_time();
        if let Some(plan) = self.plans.get(&seg.to_node) {
            let c = plan.cycle_length;
            let green = plan.green_share(&seg.id);
            let red = c * (1.0 - green);
            let y = q / seg.saturation_flow;
            vehicles += if y < 1.0 {
                q * red * red / (2.0 * c * (1.0 - y))
            } else {
                seg.jam_capacity()
            };
        }
        (vehicles / seg.jam_capacity()).clamp(0.0, 1.0)
    }

    fn refresh(&mut self) {
        let now = self.state.now;
        self.interventions.retain(|(_, until)| *until > now);
        for (node, st) in self.state.intersections.iter_mut() {
            let under = self.interventions.iter().any(|(n, _)| n == node);
            *st = if under {
                IntersectionState::UnderIntervention
            } else {
                let idx = self.net.node_idx(node).expect("signal node exists");
                let heavy = self.net.incoming(idx).iter().any(|&s| {
                    self.state.segments[&self.net.segments()[s].id].level == CongestionLevel::Heavy
                });
                if heavy {
                    IntersectionState::Congested
                } else {
                    IntersectionState::FreeFlow
                }
            };
        }
        self.state.system = if self.incident_declared || !self.interventions.is_empty() {
            SystemState::IncidentResponse
        } else if self.weather_declared {
            SystemState::WeatherAffected
        } else {
            SystemState::Normal
        };
        self.state.staleness_s = self.state.last_sync.map(|l| (now - l as f64).max(0.0)).unwrap_or(0.0);
    }

    /// Builds a simulation state consistent with the sensed picture.
    pub fn reconstruct(&self, seed: u64) -> Result<SimSnapshot, TwinError> {
        let Some(last) = self.state.last_sync else {
            return Err(TwinError::ReconstructionUnavailable("no sync yet".into()));
        };
        if self.state.staleness_s >= MAX_RECONSTRUCT_STALENESS_S {
            return Err(TwinError::ReconstructionUnavailable(format!(
                "state is {} s stale",
                self.state.staleness_s
            )));
        }
        let t = self.state.now.max((last + WINDOW_S) as f64);
        let mut sim = new_simulation(Arc::clone(&self.net), Arc::clone(&self.demand), seed)?;
        sim.set_clock(t);
        for plan in self.plans.values() {
            let start = (t / plan.cycle_length).floor() * plan.cycle_length;
            sim.install_signal_plan(plan.clone(), start)?;
        }
        for ((o, d), r) in &self.reroutes {
            sim.set_rerouting(o, d, r)?;
        }
        let mult = self.demand.multiplier(t);
        let routes: Vec<(f64, Route)> = sim
            .od_routes()
            .into_iter()
            .map(|(_, _, rate, r)| (rate * mult, r.clone()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265_636f_6e73);
        for seg in self.net.segments() {
            let est = &self.state.segments[&seg.id];
            let n = ((est.occupancy * seg.jam_capacity()).round() as usize).min(seg.storage());
            if n == 0 {
                continue;
            }
            // Remaining paths of every OD route through this segment.
            let suffixes: Vec<(f64, Route)> = routes
                .iter()
                .filter_map(|(w, r)| {
                    let k = r.segments.iter().position(|s| *s == seg.id)?;
                    Some((*w, Route::new(r.segments[k..].to_vec())))
                })
                .collect();
            let fallback = Route::new(vec![seg.id.clone()]);
            let total: f64 = suffixes.iter().map(|(w, _)| w).sum();
            for _ in 0..n {
                let route = if total > 0.0 {
                    let mut x = rng.random_range(0.0..total);
                    let mut pick = &suffixes[suffixes.len() - 1].1;
                    for (w, r) in &suffixes {
                        if x < *w {
                            pick = r;
                            break;
                        }
                        x -= w;
                    }
                    pick
                } else {
                    &fallback
                };
                sim.place_queued(route, t)?;
            }
        }
        Ok(sim.snapshot())
    }

    fn validate_change(&self, c: &Change) -> Result<(), TwinError> {
        match c {
            Change::SignalPlan { plan } => {
                let v = self.net.validate_plan(plan);
                if !v.is_empty() {
                    return Err(TwinError::ConstraintViolation(v));
                }
                if !self.net.signals().contains_key(&plan.intersection) {
                    return Err(TwinError::InvalidScenario(format!("`{}` is not signalized", plan.intersection)));
                }
            }
            Change::Reroute { origin, dest, route } => {
                self.net
                    .validate_od_route(origin, dest, route)
                    .map_err(|e| TwinError::InvalidRoute(e.to_string()))?;
            }
            Change::Incident { segment, start_offset_s, duration_s, capacity_factor } => {
                if self.net.segment(segment).is_none() {
                    return Err(TwinError::InvalidScenario(format!("unknown segment `{segment}`")));
                }
                if !(*duration_s > 0.0) || !(*start_offset_s >= 0.0) || !(0.0..=1.0).contains(capacity_factor) {
                    return Err(TwinError::InvalidScenario("incident needs duration > 0, offset >= 0, factor in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    /// Checks every change and the horizon without running anything.
    pub fn validate_scenario(&self, s: &Scenario) -> Result<(), TwinError> {
        if s.horizon == 0 || s.horizon > self.config.max_horizon_windows {
            return Err(TwinError::InvalidScenario(format!(
                "horizon {} outside 1..={}",
                s.horizon, self.config.max_horizon_windows
            )));
        }
        s.changes.iter().try_for_each(|c| self.validate_change(c))
    }

    /// Runs a paired baseline/intervention experiment on two forks.
    pub fn run_scenario(
        &self,
        s: &Scenario,
        ground_truth: Option<&SimSnapshot>,
        forecast: Vec<Forecast>,
    ) -> Result<ScenarioResult, TwinError> {
        self.validate_scenario(s)?;
        let seed = self.config.scenario_seed;
        let base = match (s.base, ground_truth) {
            (ScenarioBase::GroundTruth, Some(snap)) => snap.clone(),
            (ScenarioBase::GroundTruth, None) => {
                return Err(TwinError::ReconstructionUnavailable("no ground-truth snapshot supplied".into()))
            }
            (ScenarioBase::Reconstructed, _) => self.reconstruct(seed)?,
        };
        let start = base.clock();
        let mut arms = vec![base.fork(), base.fork()];
        for arm in &mut arms {
            arm.reseed(seed);
        }
        for c in &s.changes {
            let sim = &mut arms[1];
            match c {
                Change::Incident { segment, start_offset_s, duration_s, capacity_factor } => {
                    sim.inject_incident(Incident {
                        segment: segment.clone(),
                        start: start + start_offset_s,
                        duration: *duration_s,
                        capacity_factor: *capacity_factor,
                    })?;
                }
                Change::SignalPlan { plan } => sim.install_signal_plan(plan.clone(), start)?,
                Change::Reroute { origin, dest, route } => sim.set_rerouting(origin, dest, route)?,
            }
        }
        let tick = self.config.tick_s;
        let horizon = s.horizon as usize;
        let net = Arc::clone(&self.net);
        let outputs = parallel::map_owned(arms, move |mut sim| -> Result<ArmOutput, TwinError> {
            let mut sensors = Sensors::new(&net, SensorConfig::default()).expect("default sensor config");
            let mut agg = Aggregator::new(sensors.ids().cloned(), tick, start);
            let mut out = ArmOutput::default();
            let ticks = (WINDOW_S as f64 / tick).round() as usize;
            for k in 0..horizon {
                for _ in 0..ticks {
                    let rep = sim.step(tick)?;
                    agg.push(sensors.observe(&rep));
                }
                out.metrics.push(sim.metrics(WINDOW_S as f64)?);
                let recs = agg.close_until(sim.clock());
                out.window_starts.push(recs.first().map(|r| r.window_start).unwrap_or(start as i64 + (k as i64) * WINDOW_S));
                out.sensors.push(recs);
            }
            Ok(out)
        });
        let mut outputs = outputs.into_iter().collect::<Result<Vec<_>, _>>()?;
        let intervention = outputs.pop().expect("two arms");
        let baseline = outputs.pop().expect("two arms");
        let deltas = ScenarioDeltas {
            avg_travel_time_s: mean_travel_time(&intervention.metrics) - mean_travel_time(&baseline.metrics),
            throughput_vpm: mean_throughput(&intervention.metrics)
                .into_iter()
                .zip(mean_throughput(&baseline.metrics))
                .map(|((n, a), (_, b))| (n, a - b))
                .collect(),
        };
        Ok(ScenarioResult {
            scenario_id: s.id.clone(),
            started_at: start,
            window_starts: baseline.window_starts,
            baseline: baseline.metrics,
            intervention: intervention.metrics,
            baseline_sensors: baseline.sensors,
            intervention_sensors: intervention.sensors,
            deltas,
            forecast,
        })
    }

    fn revalidate(&self, kind: &InterventionKind) -> Result<(), TwinError> {
        match kind {
            InterventionKind::SignalPlan { plan } => self.validate_change(&Change::SignalPlan { plan: plan.clone() }),
            InterventionKind::Reroute { origin, dest, route } => self.validate_change(&Change::Reroute {
                origin: origin.clone(),
                dest: dest.clone(),
                route: route.clone(),
            }),
        }
    }

    /// Sends a validated intervention to the physical system.
    pub fn act(
        &mut self,
        iv: &Intervention,
        sink: &mut dyn CommandSink,
        audit: Option<&AuditLog>,
    ) -> Result<Acknowledgment, TwinError> {
        let now = sink.clock();
        let log = |outcome: &str, extra: serde_json::Value| {
            if let Some(a) = audit {
                let detail = json!({
                    "outcome": outcome,
                    "intervention": iv,
                    "info": extra,
                });
                if let Err(e) = a.append(now, AuditKind::Act, detail) {
                    log::warn!("audit write failed: {e}");
                }
            }
        };
        if let Err(e) = self.revalidate(&iv.kind) {
            log("rejected", json!(e.to_string()));
            return Err(e);
        }
        let delivered = match &iv.kind {
            InterventionKind::SignalPlan { plan } => sink.apply_signal_plan(plan),
            InterventionKind::Reroute { origin, dest, route } => sink.set_rerouting(origin, dest, route),
        };
        let effective = match delivered {
            Ok(t) => t,
            Err(msg) => {
                log("delivery_failure", json!(msg));
                return Err(TwinError::DeliveryFailure(msg));
            }
        };
        let nodes: Vec<NodeId> = match &iv.kind {
            InterventionKind::SignalPlan { plan } => {
                self.interventions.push((plan.intersection.clone(), effective + plan.cycle_length));
                self.plans.insert(plan.intersection.clone(), plan.clone());
                vec![plan.intersection.clone()]
            }
            InterventionKind::Reroute { origin, dest, route } => {
                self.reroutes.insert((origin.clone(), dest.clone()), route.clone());
                let mut seen = BTreeSet::new();
                for s in &route.segments {
                    let to = &self.net.segment(s).expect("validated route").to_node;
                    if let Some(p) = self.net.signals().get(to) {
                        if seen.insert(to.clone()) {
                            self.interventions.push((to.clone(), effective + p.cycle_length));
                        }
                    }
                }
                seen.into_iter().collect()
            }
        };
        self.state.now = self.state.now.max(now);
        self.refresh();
        let tick = (effective / sink.tick_s()).round() as u64;
        log("applied", json!({"effective_t": effective}));
        Ok(Acknowledgment { effective_t: effective, effective_tick: tick, intersections: nodes })
    }
}

#[derive(Default)]
struct ArmOutput {
    metrics: Vec<SimMetrics>,
    sensors: Vec<Vec<AggregatedRecord>>,
    window_starts: Vec<i64>,
}

fn mean_travel_time(ms: &[SimMetrics]) -> f64 {
    let (sum, n) = ms.iter().fold((0.0, 0u64), |(s, n), m| match m.avg_travel_time {
        Some(a) => (s + a * m.completed_trips as f64, n + m.completed_trips),
        None => (s, n),
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn mean_throughput(ms: &[SimMetrics]) -> BTreeMap<NodeId, f64> {
    let mut out: BTreeMap<NodeId, f64> = BTreeMap::new();
    for m in ms {
        for (n, v) in &m.throughput_vpm {
            *out.entry(n.clone()).or_default() += v / ms.len() as f64;
        }
    }
    out
}

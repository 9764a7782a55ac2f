//! Discrete-time point-queue traffic simulator.
//!
//! Each segment holds two FIFO lists: vehicles still travelling at free-flow
//! speed, and vehicles queued at the downstream node. A queue drains at the
//! segment's saturation flow while its signal phase is green and the next
//! segment has storage left. Fractional discharge carries over between
//! ticks so saturation flows below one vehicle per tick work.
//!
//! All state lives in [`SimState`], which is cloned wholesale for snapshots,
//! so a fork replays its parent bit for bit until the two receive different
//! commands.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    shortest_route, NetworkError, NodeId, RoadNetwork, Route, SegmentId, SignalPlan, Violation,
};

/// Seconds per demand-profile sample.
pub const PROFILE_STEP_S: f64 = 300.0;
/// Samples in one day of demand profile.
pub const PROFILE_SAMPLES: usize = 288;
pub const SECONDS_PER_DAY: f64 = 86_400.0;

const CREDIT_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown segment `{0}`")]
    UnknownSegment(SegmentId),
    #[error("no signal at intersection `{0}`")]
    UnknownIntersection(NodeId),
    #[error("signal plan violates constraints: {}", format_violations(.0))]
    ConstraintViolation(Vec<Violation>),
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("invalid incident: {0}")]
    InvalidIncident(String),
    #[error("dt must be positive, got {0}")]
    InvalidStep(f64),
    #[error("metrics window {window} s exceeds available history {available} s")]
    WindowTooLong { window: f64, available: f64 },
    #[error("no traffic in the metrics window")]
    EmptyWindow,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.message.as_str()).collect::<Vec<_>>().join("; ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VehicleState {
    Idle,
    Moving,
    Queuing,
    Rerouted,
}

/// Demand between one origin and destination at multiplier 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdDemand {
    pub origin: NodeId,
    pub dest: NodeId,
    #[serde(rename = "rate_vps")]
    pub base_rate: f64,
}

/// Multiplicative demand change from `start_s` onwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandShift {
    pub start_s: f64,
    pub factor: f64,
}

/// OD demand rates modulated by a daily multiplier curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    pub od_pairs: Vec<OdDemand>,
    /// One multiplier per 5-minute slot of the day, interpolated linearly.
    #[serde(default = "double_peak_multipliers")]
    pub multipliers: Vec<f64>,
    #[serde(default)]
    pub shift: Option<DemandShift>,
}

/// Double-peak weekday curve with maxima at 08:00 and 18:00, scaled to a
/// peak of 1.
pub fn double_peak_multipliers() -> Vec<f64> {
    let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
    let bump = |h: f64, centre: f64, width: f64| (-(h - centre).powi(2) / (2.0 * width * width)).exp();
    let raw: Vec<f64> = (0..PROFILE_SAMPLES)
        .map(|k| {
            let h = k as f64 * PROFILE_STEP_S / 3600.0;
            let daytime = logistic((h - 6.0) / 0.8) * logistic((22.0 - h) / 0.8);
            0.25 + 0.3 * daytime + 0.55 * (bump(h, 8.0, 1.4) + bump(h, 18.0, 1.4))
        })
        .collect();
    let peak = raw.iter().cloned().fold(f64::MIN, f64::max);
    raw.into_iter().map(|m| m / peak).collect()
}

impl DemandProfile {
    pub fn new(od_pairs: Vec<OdDemand>) -> Self {
        Self {
            od_pairs,
            multipliers: double_peak_multipliers(),
            shift: None,
        }
    }

    /// Same OD pairs with all rates set to zero.
    pub fn zero(od_pairs: Vec<OdDemand>) -> Self {
        let mut d = Self::new(od_pairs);
        d.multipliers = vec![0.0; PROFILE_SAMPLES];
        d
    }

    /// Flat profile: every OD pair at its base rate all day.
    pub fn constant(od_pairs: Vec<OdDemand>) -> Self {
        let mut d = Self::new(od_pairs);
        d.multipliers = vec![1.0; PROFILE_SAMPLES];
        d
    }

    pub fn with_shift(mut self, start_s: f64, factor: f64) -> Self {
        self.shift = Some(DemandShift { start_s, factor });
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.multipliers.is_empty() {
            return Err("demand profile has no multiplier samples".into());
        }
        if let Some(m) = self.multipliers.iter().find(|m| !(**m >= 0.0 && m.is_finite())) {
            return Err(format!("multiplier {m} is negative or not finite"));
        }
        if let Some(od) = self.od_pairs.iter().find(|o| !(o.base_rate >= 0.0 && o.base_rate.is_finite())) {
            return Err(format!("rate {} for {} -> {} is invalid", od.base_rate, od.origin, od.dest));
        }
        if let Some(s) = self.shift {
            if !(s.factor >= 0.0 && s.factor.is_finite()) {
                return Err(format!("demand shift factor {} is invalid", s.factor));
            }
        }
        Ok(())
    }

    /// Demand multiplier at absolute simulation time `t`.
    pub fn multiplier(&self, t: f64) -> f64 {
        let n = self.multipliers.len();
        let day_len = n as f64 * PROFILE_STEP_S;
        let pos = t.rem_euclid(day_len) / PROFILE_STEP_S;
        let k = pos.floor() as usize % n;
        let frac = pos - pos.floor();
        let a = self.multipliers[k];
        let b = self.multipliers[(k + 1) % n];
        let m = a + (b - a) * frac;
        match self.shift {
            Some(s) if t >= s.start_s => m * s.factor,
            _ => m,
        }
    }
}

/// Temporary capacity loss on one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub segment: SegmentId,
    pub start: f64,
    pub duration: f64,
    pub capacity_factor: f64,
}

impl Incident {
    pub fn is_active(&self, t: f64) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

/// A vehicle as stored inside the simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: u64,
    /// Index into the simulation's route table.
    pub route: u32,
    pub route_index: usize,
    pub state: VehicleState,
    pub entered_at: f64,
    pub segment_entered_at: f64,
    pub segment_eta: f64,
    rerouted: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct SegmentState {
    moving: VecDeque<Vehicle>,
    queue: VecDeque<Vehicle>,
    /// Vehicles waiting at the upstream node to be loaded onto this segment.
    held: VecDeque<Vehicle>,
    credit: f64,
}

impl SegmentState {
    fn occupants(&self) -> usize {
        self.moving.len() + self.queue.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalState {
    pub plan: SignalPlan,
    pub cycle_start: f64,
    pub pending: Option<SignalPlan>,
    /// Time at which the most recent actuated plan was installed.
    pub last_applied_at: Option<f64>,
    served: Vec<Vec<usize>>,
}

impl SignalState {
    fn new(net: &RoadNetwork, plan: SignalPlan, cycle_start: f64) -> Self {
        let served = served_indices(net, &plan);
        Self {
            plan,
            cycle_start,
            pending: None,
            last_applied_at: None,
            served,
        }
    }

    fn install(&mut self, net: &RoadNetwork, plan: SignalPlan) {
        self.served = served_indices(net, &plan);
        self.plan = plan;
    }

    fn is_green(&self, seg: usize, offset: f64) -> bool {
        self.served[self.plan.phase_at(offset)].contains(&seg)
    }
}

fn served_indices(net: &RoadNetwork, plan: &SignalPlan) -> Vec<Vec<usize>> {
    plan.phases
        .iter()
        .map(|p| {
            p.served_segments
                .iter()
                .filter_map(|s| net.segment_idx(s))
                .collect()
        })
        .collect()
}

/// One line of the exit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub veh: u64,
    pub entered_s: f64,
    pub exited_s: f64,
    pub route: Vec<SegmentId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RawExit {
    veh: u64,
    entered_s: f64,
    exited_s: f64,
    route: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TickStats {
    t: f64,
    node_discharges: Vec<u32>,
    segment_counts: Vec<u32>,
    trips: u32,
    travel_time_sum: f64,
}

/// Per-segment observations for one tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentTick {
    pub segment: SegmentId,
    /// Vehicles discharged past the downstream end this tick.
    pub discharged: u32,
    /// Sum of traversal speeds of the discharged vehicles, m/s.
    pub speed_sum: f64,
    pub vehicles: u32,
    pub occupancy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub t: f64,
    pub arrivals: u32,
    pub loaded: u32,
    /// Discharges from a queue, including exits.
    pub movements: u32,
    pub exits: u32,
    pub injected_total: u64,
    pub exited_total: u64,
    pub in_network: u64,
    pub states: BTreeMap<String, u64>,
    pub segments: Vec<SegmentTick>,
}

/// Aggregate travel measures over a trailing window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub window_s: f64,
    /// Seconds per completed trip; `None` when no trip completed.
    pub avg_travel_time: Option<f64>,
    pub completed_trips: u64,
    /// Vehicles per minute leaving each node's incoming queues.
    pub throughput_vpm: BTreeMap<NodeId, f64>,
    pub mean_occupancy: BTreeMap<SegmentId, f64>,
}

/// Tunables that are not part of the network or demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// How much per-tick history [`Simulation::metrics`] can look back over.
    pub metrics_retention_s: f64,
    pub record_exits: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            metrics_retention_s: 6.0 * 3600.0,
            record_exits: true,
        }
    }
}

/// All mutable simulation state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    clock: f64,
    rng: ChaCha8Rng,
    next_vehicle: u64,
    routes: Vec<Route>,
    route_segments: Vec<Vec<usize>>,
    od_routes: Vec<u32>,
    od_rerouted: Vec<bool>,
    segments: Vec<SegmentState>,
    signals: Vec<Option<SignalState>>,
    incidents: Vec<(usize, Incident)>,
    injected: u64,
    exited: u64,
    exit_log: Vec<RawExit>,
    history: VecDeque<TickStats>,
    /// Earliest time covered by `history`.
    history_from: f64,
    config: SimConfig,
}

/// Frozen copy of a simulation, forkable any number of times.
#[derive(Clone, Debug)]
pub struct SimSnapshot {
    net: Arc<RoadNetwork>,
    demand: Arc<DemandProfile>,
    state: SimState,
}

impl SimSnapshot {
    pub fn clock(&self) -> f64 {
        self.state.clock
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Starts an independent simulation from this snapshot.
    pub fn fork(&self) -> Simulation {
        Simulation {
            net: Arc::clone(&self.net),
            demand: Arc::clone(&self.demand),
            state: self.state.clone(),
        }
    }
}

impl PartialEq for SimSnapshot {
    fn eq(&self, other: &Self) -> bool {
        self.state == other.state && *self.net == *other.net && *self.demand == *other.demand
    }
}

/// Read-only view of a vehicle with its route resolved.
#[derive(Clone, Debug)]
pub struct VehicleView<'a> {
    pub vehicle: &'a Vehicle,
    pub route: &'a Route,
    pub segment: &'a SegmentId,
}

#[derive(Clone, Debug)]
pub struct Simulation {
    net: Arc<RoadNetwork>,
    demand: Arc<DemandProfile>,
    state: SimState,
}

/// Creates a simulation at clock 0 with no vehicles.
pub fn new_simulation(
    net: Arc<RoadNetwork>,
    demand: Arc<DemandProfile>,
    seed: u64,
) -> Result<Simulation, SimError> {
    Simulation::with_config(net, demand, seed, SimConfig::default())
}

impl Simulation {
    pub fn with_config(
        net: Arc<RoadNetwork>,
        demand: Arc<DemandProfile>,
        seed: u64,
        config: SimConfig,
    ) -> Result<Simulation, SimError> {
        demand
            .validate()
            .map_err(|m| SimError::InvalidRoute(format!("demand: {m}")))?;
        let weights = net.free_flow_weights();
        let mut routes = Vec::new();
        let mut route_segments = Vec::new();
        let mut od_routes = Vec::with_capacity(demand.od_pairs.len());
        for od in &demand.od_pairs {
            let route = shortest_route(&net, &weights, &od.origin, &od.dest)?;
            let id = match routes.iter().position(|r| r == &route) {
                Some(i) => i,
                None => {
                    route_segments.push(resolve(&net, &route));
                    routes.push(route);
                    routes.len() - 1
                }
            };
            od_routes.push(id as u32);
        }
        let signals = net
            .nodes()
            .iter()
            .map(|n| {
                net.signals()
                    .get(n)
                    .map(|p| SignalState::new(&net, p.clone(), 0.0))
            })
            .collect();
        let state = SimState {
            clock: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_vehicle: 0,
            routes,
            route_segments,
            od_rerouted: vec![false; od_routes.len()],
            od_routes,
            segments: vec![SegmentState::default(); net.segments().len()],
            signals,
            incidents: Vec::new(),
            injected: 0,
            exited: 0,
            exit_log: Vec::new(),
            history: VecDeque::new(),
            history_from: 0.0,
            config,
        };
        Ok(Simulation { net, demand, state })
    }

    pub fn network(&self) -> &Arc<RoadNetwork> {
        &self.net
    }

    pub fn demand(&self) -> &Arc<DemandProfile> {
        &self.demand
    }

    pub fn clock(&self) -> f64 {
        self.state.clock
    }

    pub fn injected(&self) -> u64 {
        self.state.injected
    }

    pub fn exited(&self) -> u64 {
        self.state.exited
    }

    pub fn in_network(&self) -> u64 {
        self.state
            .segments
            .iter()
            .map(|s| (s.held.len() + s.occupants()) as u64)
            .sum()
    }

    /// Vehicles currently on segment `seg` (moving plus queued).
    pub fn segment_count(&self, seg: usize) -> usize {
        self.state.segments[seg].occupants()
    }

    pub fn snapshot(&self) -> SimSnapshot {
        SimSnapshot {
            net: Arc::clone(&self.net),
            demand: Arc::clone(&self.demand),
            state: self.state.clone(),
        }
    }

    /// Replaces the arrival stream's random generator.
    pub fn reseed(&mut self, seed: u64) {
        self.state.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn signal_state(&self, node: &NodeId) -> Option<&SignalState> {
        let i = self.net.node_idx(node)?;
        self.state.signals[i].as_ref()
    }

    pub fn incidents(&self) -> impl Iterator<Item = &Incident> {
        self.state.incidents.iter().map(|(_, i)| i)
    }

    /// Current route of each OD pair, in demand order.
    pub fn od_routes(&self) -> Vec<(&NodeId, &NodeId, f64, &Route)> {
        self.demand
            .od_pairs
            .iter()
            .zip(&self.state.od_routes)
            .map(|(od, &r)| (&od.origin, &od.dest, od.base_rate, &self.state.routes[r as usize]))
            .collect()
    }

    pub fn vehicles(&self) -> impl Iterator<Item = VehicleView<'_>> {
        self.state.segments.iter().enumerate().flat_map(move |(k, s)| {
            s.held
                .iter()
                .chain(&s.moving)
                .chain(&s.queue)
                .map(move |v| VehicleView {
                    vehicle: v,
                    route: &self.state.routes[v.route as usize],
                    segment: &self.net.segments()[k].id,
                })
        })
    }

    pub fn exit_log(&self) -> Vec<ExitRecord> {
        self.state
            .exit_log
            .iter()
            .map(|e| self.resolve_exit(e))
            .collect()
    }

    /// Returns and clears the exit log.
    pub fn drain_exit_log(&mut self) -> Vec<ExitRecord> {
        let raw = std::mem::take(&mut self.state.exit_log);
        raw.iter().map(|e| self.resolve_exit(e)).collect()
    }

    fn resolve_exit(&self, e: &RawExit) -> ExitRecord {
        ExitRecord {
            veh: e.veh,
            entered_s: e.entered_s,
            exited_s: e.exited_s,
            route: self.state.routes[e.route as usize].segments.clone(),
        }
    }

    fn intern_route(&mut self, route: &Route) -> u32 {
        if let Some(i) = self.state.routes.iter().position(|r| r == route) {
            return i as u32;
        }
        self.state.route_segments.push(resolve(&self.net, route));
        self.state.routes.push(route.clone());
        (self.state.routes.len() - 1) as u32
    }

    fn new_vehicle(&mut self, route: u32, entered_at: f64, rerouted: bool) -> Vehicle {
        let id = self.state.next_vehicle;
        self.state.next_vehicle += 1;
        Vehicle {
            id,
            route,
            route_index: 0,
            state: VehicleState::Idle,
            entered_at,
            segment_entered_at: entered_at,
            segment_eta: entered_at,
            rerouted,
        }
    }

    /// Adds one vehicle at the current clock and loads it if there is room.
    pub fn inject_vehicle(&mut self, route: &Route) -> Result<u64, SimError> {
        self.net
            .validate_route(route)
            .map_err(|e| SimError::InvalidRoute(e.to_string()))?;
        let r = self.intern_route(route);
        let t = self.state.clock;
        let v = self.new_vehicle(r, t, false);
        let id = v.id;
        let first = self.state.route_segments[r as usize][0];
        self.state.segments[first].held.push_back(v);
        self.state.injected += 1;
        self.load(first, t);
        Ok(id)
    }

    /// Places a vehicle directly into the downstream queue of the first
    /// segment of `route`. Used to build reconstructed states; fails when the
    /// segment is full.
    pub fn place_queued(&mut self, route: &Route, entered_at: f64) -> Result<u64, SimError> {
        self.net
            .validate_route(route)
            .map_err(|e| SimError::InvalidRoute(e.to_string()))?;
        let r = self.intern_route(route);
        let first = self.state.route_segments[r as usize][0];
        if self.state.segments[first].occupants() >= self.net.segments()[first].storage() {
            return Err(SimError::InvalidRoute(format!(
                "segment `{}` is full",
                self.net.segments()[first].id
            )));
        }
        let mut v = self.new_vehicle(r, entered_at, false);
        v.state = VehicleState::Queuing;
        v.segment_eta = self.state.clock;
        let id = v.id;
        self.state.segments[first].queue.push_back(v);
        self.state.injected += 1;
        Ok(id)
    }

    /// Moves the clock without simulating, for building reconstructed states.
    /// Signal cycles are realigned so each plan's cycle started at a whole
    /// multiple of its length.
    pub fn set_clock(&mut self, t: f64) {
        self.state.clock = t;
        self.state.history.clear();
        self.state.history_from = t;
        for s in self.state.signals.iter_mut().flatten() {
            let c = s.plan.cycle_length;
            s.cycle_start = (t / c).floor() * c;
        }
    }

    /// Installs a plan immediately with its cycle starting at `cycle_start`.
    pub fn install_signal_plan(&mut self, plan: SignalPlan, cycle_start: f64) -> Result<(), SimError> {
        let violations = self.net.validate_plan(&plan);
        if !violations.is_empty() {
            return Err(SimError::ConstraintViolation(violations));
        }
        let i = self
            .net
            .node_idx(&plan.intersection)
            .filter(|&i| self.state.signals[i].is_some())
            .ok_or_else(|| SimError::UnknownIntersection(plan.intersection.clone()))?;
        let mut st = SignalState::new(&self.net, plan, cycle_start);
        st.last_applied_at = self.state.signals[i].as_ref().and_then(|s| s.last_applied_at);
        self.state.signals[i] = Some(st);
        Ok(())
    }

    pub fn inject_incident(&mut self, inc: Incident) -> Result<(), SimError> {
        let seg = self
            .net
            .segment_idx(&inc.segment)
            .ok_or_else(|| SimError::UnknownSegment(inc.segment.clone()))?;
        if !(inc.duration > 0.0) {
            return Err(SimError::InvalidIncident(format!(
                "duration must be > 0, got {}",
                inc.duration
            )));
        }
        if !(0.0..=1.0).contains(&inc.capacity_factor) {
            return Err(SimError::InvalidIncident(format!(
                "capacity factor {} outside [0, 1]",
                inc.capacity_factor
            )));
        }
        self.state.incidents.push((seg, inc));
        Ok(())
    }

    /// Queues `plan` for the start of the intersection's next cycle and
    /// returns the time it takes effect.
    pub fn apply_signal_plan(&mut self, plan: SignalPlan) -> Result<f64, SimError> {
        let i = self
            .net
            .node_idx(&plan.intersection)
            .filter(|&i| self.state.signals[i].is_some())
            .ok_or_else(|| SimError::UnknownIntersection(plan.intersection.clone()))?;
        let violations = self.net.validate_plan(&plan);
        if !violations.is_empty() {
            return Err(SimError::ConstraintViolation(violations));
        }
        let st = self.state.signals[i].as_mut().expect("checked above");
        st.pending = Some(plan);
        Ok(st.cycle_start + st.plan.cycle_length)
    }

    /// Routes future vehicles of the OD pair over `route`.
    pub fn set_rerouting(&mut self, origin: &NodeId, dest: &NodeId, route: &Route) -> Result<(), SimError> {
        self.net
            .validate_od_route(origin, dest, route)
            .map_err(|e| SimError::InvalidRoute(e.to_string()))?;
        let r = self.intern_route(route);
        for k in 0..self.demand.od_pairs.len() {
            let od = &self.demand.od_pairs[k];
            if &od.origin == origin && &od.dest == dest && self.state.od_routes[k] != r {
                self.state.od_routes[k] = r;
                self.state.od_rerouted[k] = true;
            }
        }
        Ok(())
    }

    fn capacity_factor(&self, seg: usize, t: f64) -> f64 {
        self.state
            .incidents
            .iter()
            .filter(|(s, inc)| *s == seg && inc.is_active(t))
            .map(|(_, inc)| inc.capacity_factor)
            .fold(1.0, f64::min)
    }

    fn load(&mut self, seg: usize, t: f64) -> u32 {
        let storage = self.net.segments()[seg].storage();
        let fft = self.net.segments()[seg].free_flow_time();
        let st = &mut self.state.segments[seg];
        let mut loaded = 0;
        while st.occupants() < storage {
            let Some(mut v) = st.held.pop_front() else { break };
            v.state = if v.rerouted {
                VehicleState::Rerouted
            } else {
                VehicleState::Moving
            };
            v.segment_entered_at = t;
            v.segment_eta = t + fft;
            st.moving.push_back(v);
            loaded += 1;
        }
        loaded
    }

    /// Advances the clock by `dt` seconds.
    pub fn step(&mut self, dt: f64) -> Result<TickReport, SimError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::InvalidStep(dt));
        }
        let net = Arc::clone(&self.net);
        let t0 = self.state.clock;
        let t1 = t0 + dt;
        let nseg = net.segments().len();

        for sig in self.state.signals.iter_mut().flatten() {
            while t0 >= sig.cycle_start + sig.plan.cycle_length {
                sig.cycle_start += sig.plan.cycle_length;
                if let Some(p) = sig.pending.take() {
                    sig.install(&net, p);
                    sig.last_applied_at = Some(sig.cycle_start);
                }
            }
        }

        for st in &mut self.state.segments {
            for v in st.moving.iter_mut() {
                if v.state == VehicleState::Rerouted {
                    v.state = VehicleState::Moving;
                }
            }
            while st.moving.front().is_some_and(|v| v.segment_eta <= t1) {
                let mut v = st.moving.pop_front().expect("front checked");
                v.state = VehicleState::Queuing;
                st.queue.push_back(v);
            }
        }

        let mut discharged = vec![0u32; nseg];
        let mut speed_sum = vec![0.0f64; nseg];
        let mut node_discharges = vec![0u32; net.nodes().len()];
        let mut exits = 0u32;
        let mut trip_time = 0.0;
        for s in 0..nseg {
            let seg = &net.segments()[s];
            let to = net.node_idx(&seg.to_node).expect("validated network");
            let green = match &self.state.signals[to] {
                Some(sig) => sig.is_green(s, t0 - sig.cycle_start),
                None => true,
            };
            if !green {
                self.state.segments[s].credit = 0.0;
                continue;
            }
            let rate = seg.saturation_flow * self.capacity_factor(s, t0);
            let st = &mut self.state.segments[s];
            if st.queue.is_empty() {
                // Idle approaches do not bank discharge capacity.
                st.credit = 0.0;
                continue;
            }
            st.credit += rate * dt;
            let mut budget = (st.credit + CREDIT_EPS).floor() as usize;
            let mut moved = 0usize;
            while budget > 0 {
                let Some(front) = self.state.segments[s].queue.front() else { break };
                let path = &self.state.route_segments[front.route as usize];
                let next = path.get(front.route_index + 1).copied();
                if let Some(n) = next {
                    if self.state.segments[n].occupants() >= net.segments()[n].storage() {
                        break;
                    }
                }
                let mut v = self.state.segments[s].queue.pop_front().expect("front checked");
                let on_segment = (t1 - v.segment_entered_at).max(dt);
                speed_sum[s] += seg.length / on_segment;
                discharged[s] += 1;
                node_discharges[to] += 1;
                match next {
                    Some(n) => {
                        v.route_index += 1;
                        v.state = VehicleState::Moving;
                        v.segment_entered_at = t1;
                        v.segment_eta = t1 + net.segments()[n].free_flow_time();
                        self.state.segments[n].moving.push_back(v);
                    }
                    None => {
                        exits += 1;
                        self.state.exited += 1;
                        trip_time += t1 - v.entered_at;
                        if self.state.config.record_exits {
                            self.state.exit_log.push(RawExit {
                                veh: v.id,
                                entered_s: v.entered_at,
                                exited_s: t1,
                                route: v.route,
                            });
                        }
                    }
                }
                budget -= 1;
                moved += 1;
            }
            let st = &mut self.state.segments[s];
            st.credit -= moved as f64;
            if st.queue.is_empty() || budget > 0 {
                st.credit = st.credit.clamp(0.0, 1.0);
            }
        }

        let mut arrivals = 0u32;
        for k in 0..self.demand.od_pairs.len() {
            let lambda = self.demand.od_pairs[k].base_rate * self.demand.multiplier(t0) * dt;
            if lambda <= 0.0 {
                continue;
            }
            let n = Poisson::new(lambda)
                .expect("positive finite rate")
                .sample(&mut self.state.rng) as u64;
            let r = self.state.od_routes[k];
            let rerouted = self.state.od_rerouted[k];
            let first = self.state.route_segments[r as usize][0];
            for _ in 0..n {
                let v = self.new_vehicle(r, t1, rerouted);
                self.state.segments[first].held.push_back(v);
            }
            self.state.injected += n;
            arrivals += n as u32;
        }
        let mut loaded = 0;
        for s in 0..nseg {
            if !self.state.segments[s].held.is_empty() {
                loaded += self.load(s, t1);
            }
        }

        self.state.clock = t1;
        let segment_counts: Vec<u32> = self
            .state
            .segments
            .iter()
            .map(|s| s.occupants() as u32)
            .collect();
        let movements = discharged.iter().sum();
        self.state.history.push_back(TickStats {
            t: t1,
            node_discharges,
            segment_counts: segment_counts.clone(),
            trips: exits,
            travel_time_sum: trip_time,
        });
        let horizon = t1 - self.state.config.metrics_retention_s;
        while self.state.history.front().is_some_and(|h| h.t <= horizon) {
            self.state.history.pop_front();
        }
        self.state.history_from = self.state.history_from.max(horizon);

        let mut states: BTreeMap<String, u64> = BTreeMap::new();
        for st in &self.state.segments {
            for v in st.held.iter().chain(&st.moving).chain(&st.queue) {
                *states.entry(format!("{:?}", v.state)).or_default() += 1;
            }
        }
        let segments = net
            .segments()
            .iter()
            .enumerate()
            .map(|(k, seg)| SegmentTick {
                segment: seg.id.clone(),
                discharged: discharged[k],
                speed_sum: speed_sum[k],
                vehicles: segment_counts[k],
                occupancy: f64::from(segment_counts[k]) / seg.jam_capacity(),
            })
            .collect();
        Ok(TickReport {
            t: t1,
            arrivals,
            loaded,
            movements,
            exits,
            injected_total: self.state.injected,
            exited_total: self.state.exited,
            in_network: self.in_network(),
            states,
            segments,
        })
    }

    /// Steps `n` ticks of `dt` and returns the last report.
    pub fn run(&mut self, n: usize, dt: f64) -> Result<Option<TickReport>, SimError> {
        let mut last = None;
        for _ in 0..n {
            last = Some(self.step(dt)?);
        }
        Ok(last)
    }

    /// Travel time, throughput and occupancy over the trailing `window` seconds.
    pub fn metrics(&self, window: f64) -> Result<SimMetrics, SimError> {
        let available = self.state.clock - self.state.history_from;
        if !(window > 0.0) || window > available + 1e-9 {
            return Err(SimError::WindowTooLong { window, available });
        }
        let from = self.state.clock - window;
        let ticks: Vec<&TickStats> = self.state.history.iter().filter(|h| h.t > from).collect();
        let net = &self.net;
        let mut node_total = vec![0u64; net.nodes().len()];
        let mut occ_sum = vec![0.0; net.segments().len()];
        let mut trips = 0u64;
        let mut travel = 0.0;
        for h in &ticks {
            for (k, &d) in h.node_discharges.iter().enumerate() {
                node_total[k] += u64::from(d);
            }
            for (k, &c) in h.segment_counts.iter().enumerate() {
                occ_sum[k] += f64::from(c) / net.segments()[k].jam_capacity();
            }
            trips += u64::from(h.trips);
            travel += h.travel_time_sum;
        }
        let any_traffic = trips > 0
            || node_total.iter().any(|&d| d > 0)
            || ticks.iter().any(|h| h.segment_counts.iter().any(|&c| c > 0));
        if !any_traffic {
            return Err(SimError::EmptyWindow);
        }
        let minutes = window / 60.0;
        let throughput_vpm = net
            .nodes()
            .iter()
            .enumerate()
            .filter(|(k, _)| !net.incoming(*k).is_empty())
            .map(|(k, n)| (n.clone(), node_total[k] as f64 / minutes))
            .collect();
        let nticks = ticks.len().max(1) as f64;
        let mean_occupancy = net
            .segments()
            .iter()
            .enumerate()
            .map(|(k, s)| (s.id.clone(), occ_sum[k] / nticks))
            .collect();
        Ok(SimMetrics {
            window_s: window,
            avg_travel_time: (trips > 0).then(|| travel / trips as f64),
            completed_trips: trips,
            throughput_vpm,
            mean_occupancy,
        })
    }

    /// Discharges out of `node`'s incoming queues over the trailing `window`
    /// seconds.
    pub fn node_discharges(&self, node: &NodeId, window: f64) -> u64 {
        let Some(k) = self.net.node_idx(node) else { return 0 };
        let from = self.state.clock - window;
        self.state
            .history
            .iter()
            .filter(|h| h.t > from)
            .map(|h| u64::from(h.node_discharges[k]))
            .sum()
    }
}

fn resolve(net: &RoadNetwork, route: &Route) -> Vec<usize> {
    route
        .segments
        .iter()
        .map(|s| net.segment_idx(s).expect("route validated against network"))
        .collect()
}

//! Static road network: segments, signalized intersections, sensors and routes.
//!
//! A network is loaded once from JSON, validated, and then only read. All
//! lookups used by the simulator go through dense indices built at load time.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default lower bound on a phase green, seconds.
pub const DEFAULT_MIN_GREEN_S: f64 = 10.0;
/// Default upper bound on a phase green, seconds.
pub const DEFAULT_MAX_GREEN_S: f64 = 120.0;

const CYCLE_TOLERANCE: f64 = 1e-9;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(
    /// Identifier of a node (intersection or boundary point).
    NodeId
);
string_id!(
    /// Identifier of a directed road segment.
    SegmentId
);
string_id!(
    /// Identifier of a virtual sensor.
    SensorId
);

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cannot read network file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed network file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid network element `{element}`: {message}")]
    Validation { element: String, message: String },
    #[error("no route from {origin} to {dest}")]
    NoRoute { origin: NodeId, dest: NodeId },
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("negative weight on segment `{0}`")]
    NegativeWeight(SegmentId),
}

/// A directed road segment between two nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: SegmentId,
    #[serde(rename = "from")]
    pub from_node: NodeId,
    #[serde(rename = "to")]
    pub to_node: NodeId,
    #[serde(rename = "length_m")]
    pub length: f64,
    pub lanes: u32,
    #[serde(rename = "vf_mps")]
    pub free_flow_speed: f64,
    /// Maximum discharge rate while green, vehicles per second.
    #[serde(rename = "sat_flow_vps")]
    pub saturation_flow: f64,
    /// Vehicles per meter per lane.
    #[serde(rename = "jam_density_vpm")]
    pub jam_density: f64,
}

impl RoadSegment {
    /// Free-flow traversal time in seconds.
    pub fn free_flow_time(&self) -> f64 {
        self.length / self.free_flow_speed
    }

    /// Maximum number of vehicles the segment can hold.
    pub fn jam_capacity(&self) -> f64 {
        self.jam_density * self.length * f64::from(self.lanes)
    }

    /// Whole-vehicle storage limit used by the simulator.
    pub fn storage(&self) -> usize {
        self.jam_capacity().floor().max(1.0) as usize
    }

    fn validate(&self) -> Result<(), String> {
        let positive = [
            ("length_m", self.length),
            ("vf_mps", self.free_flow_speed),
            ("sat_flow_vps", self.saturation_flow),
            ("jam_density_vpm", self.jam_density),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.lanes < 1 {
            return Err("lanes must be >= 1".into());
        }
        if self.from_node == self.to_node {
            return Err("from and to must differ".into());
        }
        Ok(())
    }
}

/// One signal phase: the incoming segments it serves and its green time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    #[serde(rename = "serves")]
    pub served_segments: BTreeSet<SegmentId>,
    #[serde(rename = "green_s")]
    pub green_time: f64,
}

fn default_min_green() -> f64 {
    DEFAULT_MIN_GREEN_S
}

fn default_max_green() -> f64 {
    DEFAULT_MAX_GREEN_S
}

/// Fixed-time signal plan for one intersection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    #[serde(rename = "node")]
    pub intersection: NodeId,
    #[serde(rename = "cycle_s")]
    pub cycle_length: f64,
    #[serde(rename = "min_green_s", default = "default_min_green")]
    pub min_green: f64,
    #[serde(rename = "max_green_s", default = "default_max_green")]
    pub max_green: f64,
    pub phases: Vec<Phase>,
}

impl SignalPlan {
    /// Index of the phase active at `offset` seconds into the cycle.
    pub fn phase_at(&self, offset: f64) -> usize {
        let mut acc = 0.0;
        for (k, phase) in self.phases.iter().enumerate() {
            acc += phase.green_time;
            if offset < acc {
                return k;
            }
        }
        self.phases.len().saturating_sub(1)
    }

    /// Share of the cycle during which `segment` is green.
    pub fn green_share(&self, segment: &SegmentId) -> f64 {
        let green: f64 = self
            .phases
            .iter()
            .filter(|p| p.served_segments.contains(segment))
            .map(|p| p.green_time)
            .sum();
        green / self.cycle_length
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    BelowMinGreen,
    AboveMaxGreen,
    CycleSumMismatch,
    InvalidBounds,
    NoPhases,
    UnservedSegment,
    UnknownSegment,
}

/// A single broken signal-plan constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub phase: Option<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Checks the timing constraints of a plan. An empty list means the plan is
/// acceptable on its own; [`RoadNetwork::validate_plan`] adds the checks that
/// need the network.
pub fn validate_signal_plan(plan: &SignalPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let bounds_ok = plan.min_green.is_finite()
        && plan.max_green.is_finite()
        && plan.min_green >= 0.0
        && plan.min_green <= plan.max_green;
    if !bounds_ok {
        out.push(Violation {
            phase: None,
            kind: ViolationKind::InvalidBounds,
            message: format!(
                "green bounds [{}, {}] are not a valid range",
                plan.min_green, plan.max_green
            ),
        });
    }
    if plan.phases.is_empty() {
        out.push(Violation {
            phase: None,
            kind: ViolationKind::NoPhases,
            message: "plan has no phases".into(),
        });
    }
    for (k, phase) in plan.phases.iter().enumerate() {
        let g = phase.green_time;
        if !(g >= plan.min_green) {
            out.push(Violation {
                phase: Some(k),
                kind: ViolationKind::BelowMinGreen,
                message: format!("phase {k} below min_green ({g} < {})", plan.min_green),
            });
        }
        if !(g <= plan.max_green) {
            out.push(Violation {
                phase: Some(k),
                kind: ViolationKind::AboveMaxGreen,
                message: format!("phase {k} above max_green ({g} > {})", plan.max_green),
            });
        }
    }
    let sum: f64 = plan.phases.iter().map(|p| p.green_time).sum();
    let cycle_ok = plan.cycle_length.is_finite()
        && plan.cycle_length > 0.0
        && (sum - plan.cycle_length).abs() <= CYCLE_TOLERANCE * plan.cycle_length.abs().max(1.0);
    if !cycle_ok {
        out.push(Violation {
            phase: None,
            kind: ViolationKind::CycleSumMismatch,
            message: format!("phase sum ≠ cycle ({sum} vs {})", plan.cycle_length),
        });
    }
    out
}

/// Ordered list of segments forming a connected path.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Route {
    pub segments: Vec<SegmentId>,
}

impl Route {
    pub fn new(segments: Vec<SegmentId>) -> Self {
        Self { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SensorEntry {
    id: SensorId,
    segment: SegmentId,
}

/// On-disk layout of a network file.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct NetworkFile {
    nodes: Vec<NodeId>,
    segments: Vec<RoadSegment>,
    #[serde(default)]
    signals: Vec<SignalPlan>,
    #[serde(default)]
    sensors: Vec<SensorEntry>,
}

/// A validated road network.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    nodes: Vec<NodeId>,
    segments: Vec<RoadSegment>,
    signals: BTreeMap<NodeId, SignalPlan>,
    sensors: BTreeMap<SensorId, SegmentId>,
    node_index: HashMap<NodeId, usize>,
    segment_index: HashMap<SegmentId, usize>,
    outgoing: Vec<Vec<usize>>,
    incoming: Vec<Vec<usize>>,
}

fn invalid(element: impl fmt::Display, message: impl Into<String>) -> NetworkError {
    NetworkError::Validation {
        element: element.to_string(),
        message: message.into(),
    }
}

/// Reads and validates a network JSON file.
pub fn load_network(path: impl AsRef<Path>) -> Result<RoadNetwork, NetworkError> {
    let text = std::fs::read_to_string(path)?;
    RoadNetwork::from_json(&text)
}

impl RoadNetwork {
    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let file: NetworkFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    /// Builds a network from parts, running every validation the loader runs.
    pub fn new(
        nodes: Vec<NodeId>,
        segments: Vec<RoadSegment>,
        signals: Vec<SignalPlan>,
        sensors: Vec<(SensorId, SegmentId)>,
    ) -> Result<Self, NetworkError> {
        Self::from_file(NetworkFile {
            nodes,
            segments,
            signals,
            sensors: sensors
                .into_iter()
                .map(|(id, segment)| SensorEntry { id, segment })
                .collect(),
        })
    }

    fn from_file(file: NetworkFile) -> Result<Self, NetworkError> {
        let mut node_index = HashMap::new();
        for (k, n) in file.nodes.iter().enumerate() {
            if node_index.insert(n.clone(), k).is_some() {
                return Err(invalid(n, "duplicate node id"));
            }
        }
        let mut segment_index = HashMap::new();
        let mut outgoing = vec![Vec::new(); file.nodes.len()];
        let mut incoming = vec![Vec::new(); file.nodes.len()];
        for (k, s) in file.segments.iter().enumerate() {
            s.validate().map_err(|m| invalid(&s.id, m))?;
            let from = *node_index
                .get(&s.from_node)
                .ok_or_else(|| invalid(&s.id, format!("unknown from node `{}`", s.from_node)))?;
            let to = *node_index
                .get(&s.to_node)
                .ok_or_else(|| invalid(&s.id, format!("unknown to node `{}`", s.to_node)))?;
            if segment_index.insert(s.id.clone(), k).is_some() {
                return Err(invalid(&s.id, "duplicate segment id"));
            }
            outgoing[from].push(k);
            incoming[to].push(k);
        }
        let mut net = RoadNetwork {
            nodes: file.nodes,
            segments: file.segments,
            signals: BTreeMap::new(),
            sensors: BTreeMap::new(),
            node_index,
            segment_index,
            outgoing,
            incoming,
        };
        for plan in file.signals {
            if net.signals.contains_key(&plan.intersection) {
                return Err(invalid(&plan.intersection, "duplicate signal plan"));
            }
            if let Some(v) = net.validate_plan(&plan).into_iter().next() {
                return Err(invalid(&plan.intersection, v.message));
            }
            net.signals.insert(plan.intersection.clone(), plan);
        }
        for entry in file.sensors {
            if !net.segment_index.contains_key(&entry.segment) {
                return Err(invalid(
                    &entry.id,
                    format!("sensor targets unknown segment `{}`", entry.segment),
                ));
            }
            if net.sensors.insert(entry.id.clone(), entry.segment).is_some() {
                return Err(invalid(&entry.id, "duplicate sensor id"));
            }
        }
        Ok(net)
    }

    /// Serializes back to the network file layout.
    pub fn to_json(&self) -> String {
        let file = NetworkFile {
            nodes: self.nodes.clone(),
            segments: self.segments.clone(),
            signals: self.signals.values().cloned().collect(),
            sensors: self
                .sensors
                .iter()
                .map(|(id, segment)| SensorEntry {
                    id: id.clone(),
                    segment: segment.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("network serializes")
    }

    /// Timing checks plus coverage of the intersection's incoming segments.
    pub fn validate_plan(&self, plan: &SignalPlan) -> Vec<Violation> {
        let mut out = validate_signal_plan(plan);
        let Some(&node) = self.node_index.get(&plan.intersection) else {
            out.push(Violation {
                phase: None,
                kind: ViolationKind::UnknownSegment,
                message: format!("unknown intersection `{}`", plan.intersection),
            });
            return out;
        };
        for (k, phase) in plan.phases.iter().enumerate() {
            for s in &phase.served_segments {
                let ok = self
                    .segment_index
                    .get(s)
                    .is_some_and(|&i| self.segments[i].to_node == plan.intersection);
                if !ok {
                    out.push(Violation {
                        phase: Some(k),
                        kind: ViolationKind::UnknownSegment,
                        message: format!("phase {k} serves `{s}`, which does not enter the intersection"),
                    });
                }
            }
        }
        for &seg in &self.incoming[node] {
            let id = &self.segments[seg].id;
            if !plan.phases.iter().any(|p| p.served_segments.contains(id)) {
                out.push(Violation {
                    phase: None,
                    kind: ViolationKind::UnservedSegment,
                    message: format!("incoming segment `{id}` is served by no phase"),
                });
            }
        }
        out
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn signals(&self) -> &BTreeMap<NodeId, SignalPlan> {
        &self.signals
    }

    pub fn sensors(&self) -> &BTreeMap<SensorId, SegmentId> {
        &self.sensors
    }

    pub fn segment(&self, id: &SegmentId) -> Option<&RoadSegment> {
        self.segment_index.get(id).map(|&i| &self.segments[i])
    }

    pub fn segment_idx(&self, id: &SegmentId) -> Option<usize> {
        self.segment_index.get(id).copied()
    }

    pub fn node_idx(&self, id: &NodeId) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn has_node(&self, id: &NodeId) -> bool {
        self.node_index.contains_key(id)
    }

    /// Segment indices leaving node `node`.
    pub fn outgoing(&self, node: usize) -> &[usize] {
        &self.outgoing[node]
    }

    /// Segment indices entering node `node`.
    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    /// Checks adjacency and that every segment exists.
    pub fn validate_route(&self, route: &Route) -> Result<(), NetworkError> {
        if route.is_empty() {
            return Err(NetworkError::InvalidRoute("route is empty".into()));
        }
        let mut prev: Option<&RoadSegment> = None;
        for id in &route.segments {
            let seg = self
                .segment(id)
                .ok_or_else(|| NetworkError::InvalidRoute(format!("unknown segment `{id}`")))?;
            if let Some(p) = prev {
                if p.to_node != seg.from_node {
                    return Err(NetworkError::InvalidRoute(format!(
                        "`{}` ends at {} but `{}` starts at {}",
                        p.id, p.to_node, seg.id, seg.from_node
                    )));
                }
            }
            prev = Some(seg);
        }
        Ok(())
    }

    /// Validates the route and checks that it runs from `origin` to `dest`.
    pub fn validate_od_route(
        &self,
        origin: &NodeId,
        dest: &NodeId,
        route: &Route,
    ) -> Result<(), NetworkError> {
        self.validate_route(route)?;
        let first = self.segment(&route.segments[0]).expect("validated");
        let last = self.segment(route.segments.last().unwrap()).expect("validated");
        if &first.from_node != origin || &last.to_node != dest {
            return Err(NetworkError::InvalidRoute(format!(
                "route runs {} -> {}, expected {origin} -> {dest}",
                first.from_node, last.to_node
            )));
        }
        Ok(())
    }

    /// Total of `weights` along a route; missing weights count as zero.
    pub fn route_cost(&self, route: &Route, weights: &HashMap<SegmentId, f64>) -> f64 {
        route
            .segments
            .iter()
            .map(|s| weights.get(s).copied().unwrap_or(0.0))
            .sum()
    }

    /// Free-flow travel time of each segment, the default routing weights.
    pub fn free_flow_weights(&self) -> HashMap<SegmentId, f64> {
        self.segments
            .iter()
            .map(|s| (s.id.clone(), s.free_flow_time()))
            .collect()
    }
}

#[derive(PartialEq)]
struct HeapItem {
    cost: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-weight route from `origin` to `dest`.
///
/// Among routes of equal cost the lexicographically smallest sequence of
/// segment ids wins. Segments with no entry in `weights` cost zero.
pub fn shortest_route(
    net: &RoadNetwork,
    weights: &HashMap<SegmentId, f64>,
    origin: &NodeId,
    dest: &NodeId,
) -> Result<Route, NetworkError> {
    let o = net
        .node_idx(origin)
        .ok_or_else(|| NetworkError::UnknownNode(origin.clone()))?;
    let d = net
        .node_idx(dest)
        .ok_or_else(|| NetworkError::UnknownNode(dest.clone()))?;
    let weight = |seg: usize| -> Result<f64, NetworkError> {
        let s = &net.segments[seg];
        let w = weights.get(&s.id).copied().unwrap_or(0.0);
        if !(w >= 0.0) {
            return Err(NetworkError::NegativeWeight(s.id.clone()));
        }
        Ok(w)
    };

    // Distances to `dest` over reversed edges.
    let n = net.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    dist[d] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapItem { cost: 0.0, node: d });
    while let Some(HeapItem { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        for &seg in &net.incoming[node] {
            let from = net.node_index[&net.segments[seg].from_node];
            let c = cost + weight(seg)?;
            if c < dist[from] {
                dist[from] = c;
                heap.push(HeapItem { cost: c, node: from });
            }
        }
    }
    if !dist[o].is_finite() {
        return Err(NetworkError::NoRoute {
            origin: origin.clone(),
            dest: dest.clone(),
        });
    }
    if o == d {
        return Err(NetworkError::InvalidRoute(
            "origin equals destination; a route needs at least one segment".into(),
        ));
    }

    // Walk tight edges in id order; backtracking only matters when
    // zero-weight cycles make several tight successors revisit nodes.
    let mut sorted_out: Vec<Vec<usize>> = net.outgoing.clone();
    for v in &mut sorted_out {
        v.sort_by(|&a, &b| net.segments[a].id.cmp(&net.segments[b].id));
    }
    let tight = |seg: usize| -> bool {
        let s = &net.segments[seg];
        let from = net.node_index[&s.from_node];
        let to = net.node_index[&s.to_node];
        let w = weights.get(&s.id).copied().unwrap_or(0.0);
        dist[to].is_finite() && (dist[from] - (w + dist[to])).abs() <= 1e-9 * dist[from].max(1.0)
    };
    let mut visited = vec![false; n];
    let mut path: Vec<usize> = Vec::new();
    let mut cursor: Vec<usize> = vec![0];
    visited[o] = true;
    let mut at = o;
    while at != d {
        let top = cursor.last_mut().expect("non-empty while searching");
        let options = &sorted_out[at];
        let mut advanced = false;
        while *top < options.len() {
            let seg = options[*top];
            *top += 1;
            let to = net.node_index[&net.segments[seg].to_node];
            if !visited[to] && tight(seg) {
                visited[to] = true;
                path.push(seg);
                cursor.push(0);
                at = to;
                advanced = true;
                break;
            }
        }
        if !advanced {
            cursor.pop();
            let Some(seg) = path.pop() else {
                return Err(NetworkError::NoRoute {
                    origin: origin.clone(),
                    dest: dest.clone(),
                });
            };
            visited[at] = false;
            at = net.node_index[&net.segments[seg].from_node];
        }
    }
    Ok(Route::new(
        path.into_iter().map(|s| net.segments[s].id.clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn seg(id: &str, from: &str, to: &str) -> RoadSegment {
        RoadSegment {
            id: id.into(),
            from_node: from.into(),
            to_node: to.into(),
            length: 100.0,
            lanes: 1,
            free_flow_speed: 10.0,
            saturation_flow: 0.5,
            jam_density: 0.15,
        }
    }

    fn plan(greens: &[f64], cycle: f64) -> SignalPlan {
        SignalPlan {
            intersection: "B".into(),
            cycle_length: cycle,
            min_green: 10.0,
            max_green: 60.0,
            phases: greens
                .iter()
                .map(|&g| Phase {
                    served_segments: BTreeSet::new(),
                    green_time: g,
                })
                .collect(),
        }
    }

    #[test]
    fn minimal_file_loads() {
        let text = r#"{"nodes":["A","B"],"segments":[{"id":"s1","from":"A","to":"B","length_m":300,"lanes":1,"vf_mps":10,"sat_flow_vps":1,"jam_density_vpm":0.15}]}"#;
        let net = RoadNetwork::from_json(text).unwrap();
        assert_eq!(net.segments().len(), 1);
        assert!(net.signals().is_empty());
    }

    #[test]
    fn phase_sum_short_by_one_names_intersection() {
        let text = r#"{"nodes":["A","B"],"segments":[{"id":"s1","from":"A","to":"B","length_m":300,"lanes":1,"vf_mps":10,"sat_flow_vps":1,"jam_density_vpm":0.15}],
          "signals":[{"node":"B","cycle_s":60,"phases":[{"serves":["s1"],"green_s":30},{"serves":["s1"],"green_s":29}]}]}"#;
        match RoadNetwork::from_json(text) {
            Err(NetworkError::Validation { element, message }) => {
                assert_eq!(element, "B");
                assert!(message.contains("phase sum"), "{message}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_dangling_files_rejected() {
        assert!(matches!(
            RoadNetwork::from_json("{not json"),
            Err(NetworkError::Parse(_))
        ));
        let dangling = r#"{"nodes":["A"],"segments":[{"id":"s1","from":"A","to":"Z","length_m":300,"lanes":1,"vf_mps":10,"sat_flow_vps":1,"jam_density_vpm":0.15}]}"#;
        match RoadNetwork::from_json(dangling) {
            Err(NetworkError::Validation { element, .. }) => assert_eq!(element, "s1"),
            other => panic!("{other:?}"),
        }
        let bad_sensor = r#"{"nodes":["A","B"],"segments":[],"sensors":[{"id":"x","segment":"nope"}]}"#;
        assert!(matches!(
            RoadNetwork::from_json(bad_sensor),
            Err(NetworkError::Validation { .. })
        ));
    }

    #[test]
    fn grid_fixture_counts() {
        // Hand count of the shipped grid: 8 internal links, 2 entries, 2 exits.
        let net = fixtures::grid_network();
        assert_eq!(net.segments().len(), 12);
        assert_eq!(net.signals().len(), 4);
        assert_eq!(net.nodes().len(), 8);
        let loaded = load_network(fixtures::grid_network_path()).unwrap();
        assert_eq!(loaded, net);
    }

    #[test]
    fn signal_plan_examples() {
        assert!(validate_signal_plan(&plan(&[30.0, 30.0], 60.0)).is_empty());

        let v = validate_signal_plan(&plan(&[5.0, 55.0], 60.0));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::BelowMinGreen);
        assert!(v[0].message.starts_with("phase 0 below min_green"));

        let v = validate_signal_plan(&plan(&[50.0, 20.0], 60.0));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::CycleSumMismatch);
        assert!(v[0].message.starts_with("phase sum ≠ cycle"));
    }

    #[test]
    fn single_and_parallel_segments() {
        let net = RoadNetwork::new(
            vec!["A".into(), "B".into()],
            vec![seg("s1", "A", "B"), seg("s2", "A", "B")],
            vec![],
            vec![],
        )
        .unwrap();
        let mut w = HashMap::new();
        w.insert(SegmentId::from("s1"), 7.0);
        w.insert(SegmentId::from("s2"), 5.0);
        let r = shortest_route(&net, &w, &"A".into(), &"B".into()).unwrap();
        assert_eq!(r.segments, vec![SegmentId::from("s2")]);

        w.insert(SegmentId::from("s1"), 5.0);
        let r = shortest_route(&net, &w, &"A".into(), &"B".into()).unwrap();
        assert_eq!(r.segments, vec![SegmentId::from("s1")], "tie goes to smaller id");

        let err = shortest_route(&net, &w, &"B".into(), &"A".into()).unwrap_err();
        assert!(matches!(err, NetworkError::NoRoute { .. }));
    }

    /// All simple paths from `o` to `d` by exhaustive DFS.
    fn all_simple_paths(net: &RoadNetwork, o: usize, d: usize) -> Vec<Vec<usize>> {
        fn rec(
            net: &RoadNetwork,
            at: usize,
            d: usize,
            seen: &mut Vec<bool>,
            path: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if at == d {
                out.push(path.clone());
                return;
            }
            for &s in net.outgoing(at) {
                let to = net.node_idx(&net.segments()[s].to_node).unwrap();
                if !seen[to] {
                    seen[to] = true;
                    path.push(s);
                    rec(net, to, d, seen, path, out);
                    path.pop();
                    seen[to] = false;
                }
            }
        }
        let mut seen = vec![false; net.nodes().len()];
        seen[o] = true;
        let mut out = Vec::new();
        rec(net, o, d, &mut seen, &mut Vec::new(), &mut out);
        out
    }

    fn brute_force_best(
        net: &RoadNetwork,
        w: &HashMap<SegmentId, f64>,
        o: &NodeId,
        d: &NodeId,
    ) -> Option<(f64, Vec<SegmentId>)> {
        let paths = all_simple_paths(net, net.node_idx(o).unwrap(), net.node_idx(d).unwrap());
        paths
            .into_iter()
            .map(|p| {
                let ids: Vec<SegmentId> = p.iter().map(|&s| net.segments()[s].id.clone()).collect();
                let cost: f64 = ids.iter().map(|s| w[s]).sum();
                (cost, ids)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
    }

    #[test]
    fn grid_corner_to_corner_matches_enumeration() {
        let net = fixtures::grid_network();
        let per_segment = 3.0;
        let w: HashMap<_, _> = net
            .segments()
            .iter()
            .map(|s| (s.id.clone(), per_segment))
            .collect();
        let (o, d) = (NodeId::from("W1"), NodeId::from("E2"));
        let route = shortest_route(&net, &w, &o, &d).unwrap();
        let cost = net.route_cost(&route, &w);
        let grid_dimension = 2.0;
        assert_eq!(cost, 2.0 * per_segment * grid_dimension);
        let (bf_cost, bf_ids) = brute_force_best(&net, &w, &o, &d).unwrap();
        assert_eq!(cost, bf_cost);
        assert_eq!(route.segments, bf_ids);
        net.validate_od_route(&o, &d, &route).unwrap();
    }

    fn bfs_hops(net: &RoadNetwork, o: usize, d: usize) -> Option<usize> {
        let mut dist = vec![usize::MAX; net.nodes().len()];
        dist[o] = 0;
        let mut q = VecDeque::from([o]);
        while let Some(v) = q.pop_front() {
            for &s in net.outgoing(v) {
                let to = net.node_idx(&net.segments()[s].to_node).unwrap();
                if dist[to] == usize::MAX {
                    dist[to] = dist[v] + 1;
                    q.push_back(to);
                }
            }
        }
        (dist[d] != usize::MAX).then_some(dist[d])
    }

    fn random_network(n: usize, edges: &[(usize, usize, u8)]) -> (RoadNetwork, HashMap<SegmentId, f64>) {
        let nodes: Vec<NodeId> = (0..n).map(|i| NodeId::new(format!("n{i}"))).collect();
        let mut segs = Vec::new();
        let mut w = HashMap::new();
        for (k, &(a, b, wt)) in edges.iter().enumerate() {
            let (a, b) = (a % n, b % n);
            if a == b {
                continue;
            }
            let id = format!("e{k:03}");
            segs.push(seg(&id, &format!("n{a}"), &format!("n{b}")));
            w.insert(SegmentId::new(id), f64::from(wt));
        }
        (RoadNetwork::new(nodes, segs, vec![], vec![]).unwrap(), w)
    }

    proptest! {
        #[test]
        fn uniform_weights_give_bfs_hops(
            n in 2usize..7,
            edges in proptest::collection::vec((0usize..7, 0usize..7, 1u8..2), 1..18),
        ) {
            let (net, _) = random_network(n, &edges);
            let uniform: HashMap<_, _> = net.segments().iter().map(|s| (s.id.clone(), 1.0)).collect();
            for o in 0..n {
                for d in 0..n {
                    if o == d { continue; }
                    let (on, dn) = (net.nodes()[o].clone(), net.nodes()[d].clone());
                    match (shortest_route(&net, &uniform, &on, &dn), bfs_hops(&net, o, d)) {
                        (Ok(r), Some(h)) => {
                            prop_assert_eq!(r.len(), h);
                            prop_assert!(net.validate_od_route(&on, &dn, &r).is_ok());
                        }
                        (Err(NetworkError::NoRoute { .. }), None) => {}
                        (r, h) => prop_assert!(false, "mismatch {:?} {:?}", r, h),
                    }
                }
            }
        }

        #[test]
        fn weighted_route_matches_brute_force(
            n in 2usize..6,
            edges in proptest::collection::vec((0usize..6, 0usize..6, 0u8..4), 1..14),
        ) {
            let (net, w) = random_network(n, &edges);
            let (on, dn) = (net.nodes()[0].clone(), net.nodes()[n - 1].clone());
            match (shortest_route(&net, &w, &on, &dn), brute_force_best(&net, &w, &on, &dn)) {
                (Ok(r), Some((c, ids))) => {
                    prop_assert_eq!(net.route_cost(&r, &w), c);
                    prop_assert_eq!(r.segments, ids);
                }
                (Err(NetworkError::NoRoute { .. }), None) => {}
                (r, b) => prop_assert!(false, "mismatch {:?} {:?}", r, b),
            }
        }

        #[test]
        fn validator_empty_iff_invariants_hold(
            greens in proptest::collection::vec(0.0f64..150.0, 1..5),
            cycle_delta in prop_oneof![Just(0.0), -5.0f64..5.0],
            min_green in 0.0f64..30.0,
            span in 0.0f64..120.0,
        ) {
            let cycle: f64 = greens.iter().sum::<f64>() + cycle_delta;
            let plan = SignalPlan {
                intersection: "B".into(),
                cycle_length: cycle,
                min_green,
                max_green: min_green + span,
                phases: greens.iter().map(|&g| Phase { served_segments: BTreeSet::new(), green_time: g }).collect(),
            };
            let sum: f64 = greens.iter().sum();
            let holds = cycle > 0.0
                && (sum - cycle).abs() <= 1e-9 * cycle.max(1.0)
                && greens.iter().all(|&g| g >= plan.min_green && g <= plan.max_green);
            prop_assert_eq!(validate_signal_plan(&plan).is_empty(), holds);
        }
    }
}

//! Reference networks and demand used by tests, benches and the CLI demo
//! configuration.

use std::path::PathBuf;

use crate::network::{NodeId, RoadNetwork};
use crate::simulator::{DemandProfile, OdDemand, SECONDS_PER_DAY};

const GRID_JSON: &str = include_str!("../fixtures/grid.json");
const SINGLE_JSON: &str = include_str!("../fixtures/single_segment.json");

/// Demand multiplier applied from day 10 in the regime-shift fixture.
pub const REGIME_SHIFT_FACTOR: f64 = 1.5;
pub const REGIME_SHIFT_DAY: f64 = 10.0;

/// 2x2 signalized grid with two western entries and two eastern exits.
pub fn grid_network() -> RoadNetwork {
    RoadNetwork::from_json(GRID_JSON).expect("grid fixture is valid")
}

pub fn grid_network_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/grid.json")
}

/// One 300 m segment A -> B, 10 m/s, 1 veh/s saturation flow, no signal.
pub fn single_segment_network() -> RoadNetwork {
    RoadNetwork::from_json(SINGLE_JSON).expect("single-segment fixture is valid")
}

pub fn single_segment_network_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/single_segment.json")
}

fn od(origin: &str, dest: &str, rate: f64) -> OdDemand {
    OdDemand {
        origin: NodeId::from(origin),
        dest: NodeId::from(dest),
        base_rate: rate,
    }
}

/// Peak-hour OD rates for the grid, vehicles per second.
pub fn grid_od_pairs() -> Vec<OdDemand> {
    vec![
        od("W1", "E1", 0.25),
        od("W1", "E2", 0.15),
        od("W2", "E1", 0.10),
        od("W2", "E2", 0.25),
    ]
}

/// Double-peak daily demand on the grid.
pub fn grid_demand() -> DemandProfile {
    DemandProfile::new(grid_od_pairs())
}

/// Grid demand scaled by [`REGIME_SHIFT_FACTOR`] from the start of day 10.
pub fn regime_shift_demand() -> DemandProfile {
    grid_demand().with_shift(REGIME_SHIFT_DAY * SECONDS_PER_DAY, REGIME_SHIFT_FACTOR)
}

/// Directory holding the fixture files, including the demo run configs.
pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

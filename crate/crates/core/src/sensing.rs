//! Virtual sensors on monitored segments and their 5-minute aggregates.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{RoadNetwork, SensorId};
use crate::simulator::TickReport;

/// Aggregation interval, seconds.
pub const WINDOW_S: i64 = 300;
pub const CLEAR_BELOW: f64 = 0.3;
pub const HEAVY_ABOVE: f64 = 0.7;
/// A window is flagged missing when more than this share of ticks is absent.
pub const MISSING_SHARE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SensingError {
    #[error("record at t={t} lies outside window [{start}, {end})")]
    WindowMismatch { t: f64, start: i64, end: i64 },
    #[error("record from sensor `{found}` passed to aggregation for `{expected}`")]
    SensorMismatch { expected: SensorId, found: SensorId },
    #[error("invalid sensing config: {0}")]
    Config(String),
    #[error("malformed wire record: {0}")]
    Wire(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CongestionLevel {
    Clear,
    Moderate,
    Heavy,
}

impl CongestionLevel {
    /// Occupancy thresholds; both 0.3 and 0.7 are Moderate.
    pub fn from_occupancy(occ: f64) -> Self {
        if occ < CLEAR_BELOW {
            CongestionLevel::Clear
        } else if occ <= HEAVY_ABOVE {
            CongestionLevel::Moderate
        } else {
            CongestionLevel::Heavy
        }
    }
}

impl fmt::Display for CongestionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One sensor's observation for one tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub sensor: SensorId,
    /// End of the observed tick, seconds.
    pub timestamp: f64,
    pub count: u32,
    pub mean_speed: f64,
    pub occupancy: f64,
}

/// A sensor's 5-minute aggregate; serializes to the wire format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedRecord {
    pub sensor: SensorId,
    #[serde(rename = "t")]
    pub window_start: i64,
    /// Vehicles per 5 minutes.
    pub flow: u64,
    #[serde(rename = "speed_mps")]
    pub mean_speed: f64,
    #[serde(rename = "occ")]
    pub mean_occupancy: f64,
    #[serde(rename = "level")]
    pub congestion_level: CongestionLevel,
    pub missing: bool,
}

impl AggregatedRecord {
    pub fn to_wire(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_wire(line: &str) -> Result<Self, SensingError> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Start of the aggregation window containing `t`.
pub fn window_of(t: f64) -> i64 {
    (t / WINDOW_S as f64).floor() as i64 * WINDOW_S
}

/// Folds one sensor's tick records for `[window_start, window_start + 300)`.
///
/// `tick_s` is the simulation step, used to decide how many records were
/// expected.
pub fn aggregate(
    sensor: &SensorId,
    records: &[SensorRecord],
    window_start: i64,
    tick_s: f64,
) -> Result<AggregatedRecord, SensingError> {
    let end = window_start + WINDOW_S;
    let mut flow = 0u64;
    let mut speed_weighted = 0.0;
    let mut occ_sum = 0.0;
    for r in records {
        if &r.sensor != sensor {
            return Err(SensingError::SensorMismatch {
                expected: sensor.clone(),
                found: r.sensor.clone(),
            });
        }
        if r.timestamp < window_start as f64 || r.timestamp >= end as f64 {
            return Err(SensingError::WindowMismatch {
                t: r.timestamp,
                start: window_start,
                end,
            });
        }
        flow += u64::from(r.count);
        speed_weighted += f64::from(r.count) * r.mean_speed;
        occ_sum += r.occupancy;
    }
    let mean_speed = if flow > 0 {
        speed_weighted / flow as f64
    } else {
        0.0
    };
    let mean_occupancy = if records.is_empty() {
        0.0
    } else {
        occ_sum / records.len() as f64
    };
    let expected = (WINDOW_S as f64 / tick_s).round().max(1.0);
    let absent = (expected - records.len() as f64).max(0.0);
    Ok(AggregatedRecord {
        sensor: sensor.clone(),
        window_start,
        flow,
        mean_speed,
        mean_occupancy,
        congestion_level: CongestionLevel::from_occupancy(mean_occupancy),
        missing: absent > MISSING_SHARE * expected,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Standard deviation of Gaussian noise added to speed, m/s.
    #[serde(default)]
    pub speed_noise_sigma: f64,
    /// Probability that a tick record is dropped.
    #[serde(default)]
    pub p_drop: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            speed_noise_sigma: 0.0,
            p_drop: 0.0,
            seed: 0,
        }
    }
}

/// The set of virtual sensors of a network.
#[derive(Clone, Debug)]
pub struct Sensors {
    sensors: Vec<(SensorId, usize)>,
    config: SensorConfig,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl Sensors {
    pub fn new(net: &RoadNetwork, config: SensorConfig) -> Result<Self, SensingError> {
        if !(0.0..=1.0).contains(&config.p_drop) {
            return Err(SensingError::Config(format!("p_drop {} outside [0, 1]", config.p_drop)));
        }
        let noise = if config.speed_noise_sigma > 0.0 {
            Some(
                Normal::new(0.0, config.speed_noise_sigma)
                    .map_err(|e| SensingError::Config(e.to_string()))?,
            )
        } else if config.speed_noise_sigma == 0.0 {
            None
        } else {
            return Err(SensingError::Config("noise sigma must be >= 0".into()));
        };
        let sensors = net
            .sensors()
            .iter()
            .map(|(id, seg)| (id.clone(), net.segment_idx(seg).expect("validated network")))
            .collect();
        Ok(Self {
            sensors,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            noise,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &SensorId> {
        self.sensors.iter().map(|(id, _)| id)
    }

    /// One record per sensor for the tick in `report`, minus dropouts.
    pub fn observe(&mut self, report: &TickReport) -> Vec<SensorRecord> {
        let mut out = Vec::with_capacity(self.sensors.len());
        for (id, seg) in &self.sensors {
            let s = &report.segments[*seg];
            if self.config.p_drop > 0.0 && self.rng.random::<f64>() < self.config.p_drop {
                continue;
            }
            let mut speed = if s.discharged > 0 {
                s.speed_sum / f64::from(s.discharged)
            } else {
                0.0
            };
            if let (Some(noise), true) = (&self.noise, s.discharged > 0) {
                speed = (speed + noise.sample(&mut self.rng)).max(0.0);
            }
            out.push(SensorRecord {
                sensor: id.clone(),
                timestamp: report.t,
                count: s.discharged,
                mean_speed: speed,
                occupancy: s.occupancy.clamp(0.0, 1.0),
            });
        }
        out
    }
}

/// Buffers tick records per sensor and emits each window once it closes.
#[derive(Clone, Debug)]
pub struct Aggregator {
    sensors: Vec<SensorId>,
    tick_s: f64,
    buffers: BTreeMap<SensorId, Vec<SensorRecord>>,
    next_window: i64,
}

impl Aggregator {
    pub fn new(sensors: impl IntoIterator<Item = SensorId>, tick_s: f64, start: f64) -> Self {
        let sensors: Vec<SensorId> = sensors.into_iter().collect();
        Self {
            buffers: sensors.iter().map(|s| (s.clone(), Vec::new())).collect(),
            sensors,
            tick_s,
            next_window: window_of(start),
        }
    }

    pub fn push(&mut self, records: impl IntoIterator<Item = SensorRecord>) {
        for r in records {
            if let Some(buf) = self.buffers.get_mut(&r.sensor) {
                buf.push(r);
            }
        }
    }

    /// Emits one record per sensor for every window ending at or before `now`.
    pub fn close_until(&mut self, now: f64) -> Vec<AggregatedRecord> {
        let mut out = Vec::new();
        while ((self.next_window + WINDOW_S) as f64) <= now {
            let ws = self.next_window;
            for id in &self.sensors {
                let buf = self.buffers.get_mut(id).expect("buffer per sensor");
                let split = buf.partition_point(|r| r.timestamp < (ws + WINDOW_S) as f64);
                let mut recs: Vec<SensorRecord> = buf.drain(..split).collect();
                recs.retain(|r| r.timestamp >= ws as f64);
                out.push(aggregate(id, &recs, ws, self.tick_s).expect("records filtered to window"));
            }
            self.next_window += WINDOW_S;
        }
        out
    }
}

/// Fixed-delay hop between aggregation and ingestion.
#[derive(Clone, Debug, Default)]
pub struct CommLink {
    delay_s: f64,
    in_flight: VecDeque<(f64, AggregatedRecord)>,
}

impl CommLink {
    pub fn new(delay_s: f64) -> Self {
        Self {
            delay_s: delay_s.max(0.0),
            in_flight: VecDeque::new(),
        }
    }

    pub fn send(&mut self, now: f64, rec: AggregatedRecord) {
        self.in_flight.push_back((now + self.delay_s, rec));
    }

    /// Records whose delivery time has passed, in send order.
    pub fn deliver(&mut self, now: f64) -> Vec<AggregatedRecord> {
        let mut out = Vec::new();
        while self.in_flight.front().is_some_and(|(at, _)| *at <= now) {
            out.push(self.in_flight.pop_front().expect("front checked").1);
        }
        out
    }
}

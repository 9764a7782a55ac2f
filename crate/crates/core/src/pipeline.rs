//! The physical side of the loop: simulator, virtual sensors, window
//! aggregation and the communication link that delivers records.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::RoadNetwork;
use crate::sensing::{AggregatedRecord, Aggregator, CommLink, SensingError, SensorConfig, Sensors, WINDOW_S};
use crate::simulator::{new_simulation, DemandProfile, SimError, Simulation, TickReport};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub tick_s: f64,
    pub seed: u64,
    pub sensors: SensorConfig,
    /// Delay between a window closing and its records reaching the lake.
    pub comm_delay_s: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            tick_s: 1.0,
            seed: 7,
            sensors: SensorConfig::default(),
            comm_delay_s: 0.0,
        }
    }
}

/// Simulation plus the sensing chain attached to it.
#[derive(Clone, Debug)]
pub struct PhysicalWorld {
    pub sim: Simulation,
    sensors: Sensors,
    aggregator: Aggregator,
    link: CommLink,
    tick_s: f64,
}

impl PhysicalWorld {
    pub fn new(net: Arc<RoadNetwork>, demand: Arc<DemandProfile>, config: &WorldConfig) -> Result<Self, PipelineError> {
        if !(config.tick_s > 0.0 && config.tick_s <= WINDOW_S as f64) {
            return Err(SimError::InvalidStep(config.tick_s).into());
        }
        let sensors = Sensors::new(&net, config.sensors.clone())?;
        let aggregator = Aggregator::new(sensors.ids().cloned(), config.tick_s, 0.0);
        let sim = new_simulation(net, demand, config.seed)?;
        Ok(Self {
            sim,
            sensors,
            aggregator,
            link: CommLink::new(config.comm_delay_s),
            tick_s: config.tick_s,
        })
    }

    pub fn clock(&self) -> f64 {
        self.sim.clock()
    }

    pub fn tick_s(&self) -> f64 {
        self.tick_s
    }

    /// One tick: simulate, observe, aggregate, and return whatever the link
    /// delivers at the new clock.
    pub fn step(&mut self) -> Result<(TickReport, Vec<AggregatedRecord>), PipelineError> {
        let report = self.sim.step(self.tick_s)?;
        let records = self.sensors.observe(&report);
        self.aggregator.push(records);
        let now = report.t;
        for rec in self.aggregator.close_until(now) {
            self.link.send(now, rec);
        }
        Ok((report, self.link.deliver(now)))
    }

    /// Steps until the clock reaches `t`, handing every delivered record to `sink`.
    pub fn run_until(&mut self, t: f64, mut sink: impl FnMut(AggregatedRecord)) -> Result<(), PipelineError> {
        while self.sim.clock() + 1e-9 < t {
            let (_, recs) = self.step()?;
            recs.into_iter().for_each(&mut sink);
        }
        Ok(())
    }

    /// Runs `n` whole windows and returns the delivered records.
    pub fn run_windows(&mut self, n: usize) -> Result<Vec<AggregatedRecord>, PipelineError> {
        let mut out = Vec::new();
        let end = self.sim.clock() + n as f64 * WINDOW_S as f64;
        self.run_until(end, |r| out.push(r))?;
        Ok(out)
    }
}

/// Runs `days` of simulated time and returns every aggregated record.
pub fn simulate_days(
    net: Arc<RoadNetwork>,
    demand: Arc<DemandProfile>,
    config: &WorldConfig,
    days: f64,
) -> Result<Vec<AggregatedRecord>, PipelineError> {
    let mut world = PhysicalWorld::new(net, demand, config)?;
    let mut out = Vec::new();
    world.run_until(days * SECONDS_PER_DAY, |r| out.push(r))?;
    Ok(out)
}

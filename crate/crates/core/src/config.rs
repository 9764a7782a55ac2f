//! `RunConfig`: the single JSON file the `digit` commands read.
//!
//! Relative paths resolve against the directory holding the config file.
//!
//! ```json
//! {
//!   "network": "grid.json",
//!   "demand": "grid_demand.json",
//!   "seed": 7,
//!   "sensors": {"speed_noise_sigma": 0.0, "p_drop": 0.0, "seed": 0},
//!   "drift": {"window": 48, "kappa": 1.5},
//!   "serve": {"addr": "127.0.0.1:8080", "data_dir": "data", "window_interval_ms": 1000},
//!   "days": 1.0
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datalake::SeriesKey;
use crate::mlops::{DriftConfig, RetrainSettings};
use crate::network::{load_network, NetworkError, RoadNetwork};
use crate::pipeline::WorldConfig;
use crate::sensing::SensorConfig;
use crate::simulator::DemandProfile;
use crate::system::{RetrainMode, SystemConfig};
use crate::twin::TwinConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config references missing file {0}")]
    MissingFile(PathBuf),
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Demand given as a path to a profile file or inline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DemandSource {
    File(PathBuf),
    Inline(DemandProfile),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub addr: String,
    /// Lake, registry and audit log live here.
    pub data_dir: PathBuf,
    /// Wall-clock pause between simulated windows; 0 runs flat out.
    pub window_interval_ms: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("digit-data"),
            window_interval_ms: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: PathBuf,
    pub demand: DemandSource,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_scenario_seed")]
    pub scenario_seed: u64,
    #[serde(default = "default_tick")]
    pub tick_s: f64,
    #[serde(default)]
    pub sensors: SensorConfig,
    #[serde(default)]
    pub comm_delay_s: f64,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub retrain: RetrainSettings,
    #[serde(default)]
    pub retrain_mode: RetrainMode,
    /// Monitored series; empty means flow of every sensor.
    #[serde(default)]
    pub keys: Vec<SeriesKey>,
    #[serde(default)]
    pub bootstrap_after_windows: Option<usize>,
    #[serde(default)]
    pub serve: ServeConfig,
    /// Simulated duration. `simulate` takes `--days` instead; `serve` stops
    /// advancing after this long if set.
    #[serde(default)]
    pub days: Option<f64>,
}

fn default_seed() -> u64 {
    WorldConfig::default().seed
}

fn default_scenario_seed() -> u64 {
    TwinConfig::default().scenario_seed
}

fn default_tick() -> f64 {
    1.0
}

impl RunConfig {
    /// Parses a config file, resolves its paths and checks they exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.check()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.network);
        if let DemandSource::File(p) = &mut self.demand {
            fix(p);
        }
        fix(&mut self.serve.data_dir);
    }

    fn check(&self) -> Result<(), ConfigError> {
        if !self.network.is_file() {
            return Err(ConfigError::MissingFile(self.network.clone()));
        }
        if let DemandSource::File(p) = &self.demand {
            if !p.is_file() {
                return Err(ConfigError::MissingFile(p.clone()));
            }
        }
        if let Some(d) = self.days {
            if !(d > 0.0 && d.is_finite()) {
                return Err(ConfigError::Invalid(format!("days {d} must be positive")));
            }
        }
        self.drift.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn network(&self) -> Result<Arc<RoadNetwork>, ConfigError> {
        Ok(Arc::new(load_network(&self.network)?))
    }

    pub fn demand(&self) -> Result<Arc<DemandProfile>, ConfigError> {
        match &self.demand {
            DemandSource::Inline(d) => Ok(Arc::new(d.clone())),
            DemandSource::File(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                let d = serde_json::from_str(&text)
                    .map_err(|e| ConfigError::Parse { path: p.clone(), message: e.to_string() })?;
                Ok(Arc::new(d))
            }
        }
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            tick_s: self.tick_s,
            seed: self.seed,
            sensors: self.sensors.clone(),
            comm_delay_s: self.comm_delay_s,
        }
    }

    pub fn system(&self) -> SystemConfig {
        SystemConfig {
            world: self.world(),
            drift: self.drift.clone(),
            retrain: self.retrain.clone(),
            retrain_mode: self.retrain_mode,
            twin: TwinConfig { tick_s: self.tick_s, scenario_seed: self.scenario_seed, ..TwinConfig::default() },
            keys: self.keys.clone(),
            bootstrap_after_windows: self.bootstrap_after_windows,
        }
    }
}

//! Traffic digital twin core: network model, mesoscopic simulator, virtual
//! sensing, data lake, recurrent forecasters, model lifecycle and the twin
//! manager.

pub mod datalake;
pub mod fixtures;
pub mod network;
pub mod parallel;
pub mod predictor;
pub mod sensing;
pub mod simulator;
pub mod pipeline;
pub mod audit;
pub mod config;
pub mod mlops;
pub mod twin;
pub mod system;

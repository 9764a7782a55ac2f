//! HTTP service for the digital twin: JSON endpoints under `/api/v1`, a
//! health probe and an NDJSON event stream.

pub mod api;
pub mod engine;
pub mod error;

use std::fs;
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;

use digit_core::audit::AuditLog;
use digit_core::config::{ConfigError, RunConfig};
use digit_core::datalake::DataLake;
use digit_core::mlops::Registry;
use digit_core::sensing::WINDOW_S;
use digit_core::system::{DigitalTwinSystem, SystemError};

pub use api::router;
pub use engine::{Engine, EngineConfig, EngineHandle};
pub use error::{ApiError, ErrorCode};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("data dir {path}: {source}")]
    DataDir { path: PathBuf, source: std::io::Error },
    #[error("bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
    #[error("engine thread panicked")]
    EnginePanicked,
}

/// Builds the system with its lake, registry and audit log under
/// `serve.data_dir`.
pub fn open_system(cfg: &RunConfig) -> Result<DigitalTwinSystem, ServeError> {
    let dir = &cfg.serve.data_dir;
    fs::create_dir_all(dir).map_err(|source| ServeError::DataDir { path: dir.clone(), source })?;
    let lake = DataLake::open(dir.join("lake.jsonl")).map_err(SystemError::from)?;
    let registry = Registry::open(dir.join("models")).map_err(SystemError::from)?;
    let audit = AuditLog::open(dir.join("audit.jsonl")).map_err(SystemError::from)?;
    Ok(DigitalTwinSystem::new(cfg.network()?, cfg.demand()?, cfg.system(), lake, Arc::new(registry), Arc::new(audit))?)
}

pub fn engine_config(cfg: &RunConfig) -> EngineConfig {
    let windows_per_day = 86_400 / WINDOW_S as u64;
    EngineConfig {
        window_interval: Some(Duration::from_millis(cfg.serve.window_interval_ms)),
        max_windows: cfg.days.map(|d| (d * windows_per_day as f64).round() as u64),
        ..EngineConfig::default()
    }
}

/// Serves on `listener` until `shutdown` resolves, then stops the loop and
/// returns the system once its retrains have joined and the lake is flushed.
pub async fn serve_on(
    listener: TcpListener,
    system: DigitalTwinSystem,
    config: EngineConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<DigitalTwinSystem, ServeError> {
    let (handle, join) = Engine::spawn(system, config);
    let stopper = handle.clone();
    let app = router(handle);
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            log::info!("shutting down");
            stopper.shutdown();
        })
        .await?;
    tokio::task::spawn_blocking(move || join.join())
        .await
        .map_err(|_| ServeError::EnginePanicked)?
        .map_err(|_| ServeError::EnginePanicked)
}

/// [`serve_on`] bound to `serve.addr`.
pub async fn serve(
    cfg: &RunConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<DigitalTwinSystem, ServeError> {
    let system = open_system(cfg)?;
    let addr = cfg.serve.addr.clone();
    let listener = TcpListener::bind(&addr).await.map_err(|source| ServeError::Bind { addr: addr.clone(), source })?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_on(listener, system, engine_config(cfg), shutdown).await
}

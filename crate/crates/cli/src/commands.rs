use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use digit_core::audit::{parse_events, AuditError};
use digit_core::config::{ConfigError, RunConfig};
use digit_core::datalake::{DataLake, Dataset, LakeError, SeriesKey, Split};
use digit_core::pipeline::{simulate_days, PipelineError};
use digit_core::predictor::{evaluate, persistence_metrics, train, EvalMetrics, Hyper, ModelKind, PredictError, TrainedModel};
use digit_core::sensing::WINDOW_S;
use digit_server::ServeError;

use crate::report::DriftSummary;

/// File `simulate` writes and `train`/`evaluate` read inside a data dir.
pub const AGGREGATES_FILE: &str = "aggregates.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Lake(#[from] LakeError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("audit log {path}: {source}")]
    Audit { path: PathBuf, source: AuditError },
    #[error("{0}")]
    Usage(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub fn simulate(config: &Path, days: f64, out: &Path) -> Result<PathBuf, CliError> {
    if !(days > 0.0 && days.is_finite()) {
        return Err(CliError::Usage(format!("--days must be positive, got {days}")));
    }
    let cfg = RunConfig::load(config)?;
    let records = simulate_days(cfg.network()?, cfg.demand()?, &cfg.world(), days)?;
    fs::create_dir_all(out).map_err(io(out))?;
    let path = out.join(AGGREGATES_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(io(&path))?);
    for r in &records {
        writeln!(w, "{}", r.to_wire()).map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;
    log::info!("wrote {} records to {}", records.len(), path.display());
    Ok(path)
}

/// Loads `DIR/aggregates.jsonl` and builds a dataset over the flow of every
/// sensor it contains.
pub fn load_dataset(dir: &Path) -> Result<(Vec<SeriesKey>, Dataset), CliError> {
    let path = dir.join(AGGREGATES_FILE);
    let file = File::open(&path).map_err(io(&path))?;
    let mut lake = DataLake::in_memory();
    lake.import_jsonl(BufReader::new(file)).map_err(|e| match e {
        LakeError::Corrupt { line, message } => CliError::Data { path: path.clone(), message: format!("line {line}: {message}") },
        other => other.into(),
    })?;
    let (Some(from), Some(last)) = (lake.earliest_window(), lake.latest_window()) else {
        return Err(CliError::Data { path, message: "no records".into() });
    };
    let keys: Vec<SeriesKey> = lake.sensors().map(|s| SeriesKey::flow(s.as_str())).collect();
    let ds = lake.make_dataset(&keys, from, last + WINDOW_S)?;
    Ok((keys, ds))
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub model: ModelKind,
    pub keys: Vec<SeriesKey>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub split: Split,
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    pub n: usize,
    pub val: Option<EvalMetrics>,
    pub persistence: EvalMetrics,
}

/// `model.json` gets its metrics in `model.metrics.json`.
pub fn metrics_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    ckpt.with_file_name(format!("{stem}.metrics.json"))
}

pub fn train_cmd(data: &Path, kind: ModelKind, out: &Path) -> Result<TrainReport, CliError> {
    let (keys, ds) = load_dataset(data)?;
    log::info!("training {kind:?} on {} windows of {} series", ds.train.len(), keys.len());
    let (model, log) = train(kind, &ds, &Hyper::default())?;
    let test = evaluate(&model, &ds, Split::Test)?;
    let report = TrainReport {
        model: kind,
        keys,
        epochs: log.epochs.len(),
        best_epoch: log.best_epoch,
        split: Split::Test,
        rmse: test.rmse,
        mae: test.mae,
        mape: test.mape,
        n: test.n,
        val: model.val_metrics,
        persistence: persistence_metrics(&ds, Split::Test)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    model.save(out)?;
    let mpath = metrics_path(out);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&mpath, text + "\n").map_err(io(&mpath))?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub split: Split,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

pub fn evaluate_cmd(ckpt: &Path, data: &Path, split: Split) -> Result<EvalReport, CliError> {
    let model = TrainedModel::load(ckpt)?;
    let (_, ds) = load_dataset(data)?;
    let metrics = evaluate(&model, &ds, split)?;
    Ok(EvalReport { split, metrics })
}

pub fn serve_cmd(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let rt = tokio::runtime::Runtime::new().map_err(io(config))?;
    rt.block_on(async move {
        let system = digit_server::serve(&cfg, shutdown_signal()).await?;
        let manifests = system.models.registry.manifests();
        log::info!("stopped at t={} with {} model manifests", system.clock(), manifests.len());
        Ok(())
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = term.recv() => {}
                    _ = tokio::signal::ctrl_c() => {}
                }
                return;
            }
            Err(e) => log::warn!("no SIGTERM handler: {e}"),
        }
    }
    if tokio::signal::ctrl_c().await.is_err() {
        std::future::pending::<()>().await;
    }
}

pub fn drift_report(audit: &Path) -> Result<DriftSummary, CliError> {
    let file = File::open(audit).map_err(io(audit))?;
    let events = parse_events(BufReader::new(file)).map_err(|source| CliError::Audit { path: audit.to_path_buf(), source })?;
    Ok(DriftSummary::from_events(&events))
}

//! Model lifecycle: versioned registry, rolling-error drift monitor and the
//! retrain/promote decision.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datalake::{DataLake, Dataset, LakeError, SeriesKey, Split};
use crate::predictor::{evaluate, evaluate_windows, train_from, EvalMetrics, Hyper, LstmParams, ModelKind, PredictError, TrainedModel};

#[derive(Debug, Error)]
pub enum MlopsError {
    #[error("storage: {0}")]
    Storage(String),
    #[error("unknown version {version} for `{key}`")]
    UnknownVersion { key: String, version: u32 },
    #[error("version {0} is not a candidate")]
    NotCandidate(u32),
    #[error("no active model for `{0}`")]
    NoActiveModel(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid drift config: {0}")]
    Config(String),
    #[error(transparent)]
    Predict(PredictError),
}

impl From<PredictError> for MlopsError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::Diverged { .. } => MlopsError::Diverged(e.to_string()),
            PredictError::EmptySplit => MlopsError::InsufficientData(e.to_string()),
            other => MlopsError::Predict(other),
        }
    }
}

impl From<LakeError> for MlopsError {
    fn from(e: LakeError) -> Self {
        match e {
            LakeError::InsufficientData(m) => MlopsError::InsufficientData(m),
            other => MlopsError::Storage(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VersionStatus {
    Candidate,
    Active,
    Archived,
}

/// Window-start range `[from, to)` a model was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRange {
    pub from: i64,
    pub to: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub v: u32,
    pub status: VersionStatus,
    pub val_rmse: f64,
    #[serde(default)]
    pub val_metrics: Option<EvalMetrics>,
    #[serde(default)]
    pub trained_on: Option<DataRange>,
    /// Simulation clock at registration, seconds.
    #[serde(default)]
    pub created_at: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub key: SeriesKey,
    pub active: Option<u32>,
    pub versions: Vec<ModelVersion>,
}

impl Manifest {
    fn version_mut(&mut self, v: u32) -> Option<&mut ModelVersion> {
        self.versions.iter_mut().find(|m| m.v == v)
    }

    pub fn active_version(&self) -> Option<&ModelVersion> {
        self.active.and_then(|a| self.versions.iter().find(|m| m.v == a))
    }
}

#[derive(Debug)]
struct Entry {
    manifest: Manifest,
    models: BTreeMap<u32, Arc<TrainedModel>>,
}

/// Versioned model store, one manifest per series key.
///
/// Readers take a shared lock just long enough to clone an `Arc`, so a
/// promotion swaps the active model atomically for every predictor.
#[derive(Debug, Default)]
pub struct Registry {
    dir: Option<PathBuf>,
    entries: RwLock<BTreeMap<SeriesKey, Entry>>,
    writer: Mutex<()>,
}

fn dir_name(key: &SeriesKey) -> String {
    key.to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn storage<E: std::fmt::Display>(ctx: &Path) -> impl FnOnce(E) -> MlopsError + '_ {
    move |e| MlopsError::Storage(format!("{}: {e}", ctx.display()))
}

impl Registry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens a registry directory, loading every manifest and checkpoint in it.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, MlopsError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(storage(&dir))?;
        let mut entries = BTreeMap::new();
        let mut subdirs: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(storage(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            let mpath = sub.join("manifest.json");
            let text = fs::read_to_string(&mpath).map_err(storage(&mpath))?;
            let manifest: Manifest = serde_json::from_str(&text).map_err(storage(&mpath))?;
            let mut models = BTreeMap::new();
            for mv in &manifest.versions {
                let cpath = sub.join(format!("v{}.json", mv.v));
                let model = TrainedModel::load(&cpath).map_err(storage(&cpath))?;
                models.insert(mv.v, Arc::new(model));
            }
            entries.insert(manifest.key.clone(), Entry { manifest, models });
        }
        Ok(Self {
            dir: Some(dir),
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn persist_manifest(&self, manifest: &Manifest) -> Result<(), MlopsError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let sub = dir.join(dir_name(&manifest.key));
        fs::create_dir_all(&sub).map_err(storage(&sub))?;
        let tmp = sub.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        fs::write(&tmp, text).map_err(storage(&tmp))?;
        fs::rename(&tmp, sub.join("manifest.json")).map_err(storage(&sub))?;
        Ok(())
    }

    /// Stores a new candidate under the next version number.
    pub fn register(
        &self,
        key: &SeriesKey,
        mut model: TrainedModel,
        trained_on: Option<DataRange>,
        created_at: f64,
    ) -> Result<ModelVersion, MlopsError> {
        let _w = self.writer.lock().expect("registry writer");
        let next = {
            let entries = self.entries.read().expect("registry lock");
            entries
                .get(key)
                .and_then(|e| e.manifest.versions.iter().map(|m| m.v).max())
                .unwrap_or(0)
                + 1
        };
        model.version = format!("v{next}");
        let val_metrics = model
            .val_metrics
            .ok_or_else(|| MlopsError::Storage("checkpoint carries no validation metrics".into()))?;
        let mv = ModelVersion {
            v: next,
            status: VersionStatus::Candidate,
            val_rmse: val_metrics.rmse,
            val_metrics: Some(val_metrics),
            trained_on,
            created_at,
        };
        if let Some(dir) = &self.dir {
            let sub = dir.join(dir_name(key));
            fs::create_dir_all(&sub).map_err(storage(&sub))?;
            model.save(sub.join(format!("v{next}.json"))).map_err(|e| MlopsError::Storage(e.to_string()))?;
        }
        let mut manifest = self
            .manifest(key)
            .unwrap_or_else(|| Manifest { key: key.clone(), active: None, versions: Vec::new() });
        manifest.versions.push(mv.clone());
        self.persist_manifest(&manifest)?;
        let mut entries = self.entries.write().expect("registry lock");
        let entry = entries.entry(key.clone()).or_insert_with(|| Entry {
            manifest: manifest.clone(),
            models: BTreeMap::new(),
        });
        entry.manifest = manifest;
        entry.models.insert(next, Arc::new(model));
        Ok(mv)
    }

    /// Registers a serialized checkpoint; a corrupt one is a storage error.
    pub fn register_checkpoint(
        &self,
        key: &SeriesKey,
        checkpoint_json: &str,
        trained_on: Option<DataRange>,
        created_at: f64,
    ) -> Result<ModelVersion, MlopsError> {
        let model = TrainedModel::from_json(checkpoint_json).map_err(|e| MlopsError::Storage(e.to_string()))?;
        self.register(key, model, trained_on, created_at)
    }

    fn transition(&self, key: &SeriesKey, v: u32, promote: bool) -> Result<(), MlopsError> {
        let _w = self.writer.lock().expect("registry writer");
        let mut manifest = self.manifest(key).ok_or_else(|| MlopsError::UnknownVersion {
            key: key.to_string(),
            version: v,
        })?;
        let previous = manifest.active;
        let target = manifest.version_mut(v).ok_or_else(|| MlopsError::UnknownVersion {
            key: key.to_string(),
            version: v,
        })?;
        if target.status != VersionStatus::Candidate {
            return Err(MlopsError::NotCandidate(v));
        }
        if promote {
            target.status = VersionStatus::Active;
            if let Some(old) = previous.and_then(|p| manifest.version_mut(p)) {
                old.status = VersionStatus::Archived;
            }
            manifest.active = Some(v);
        } else {
            target.status = VersionStatus::Archived;
        }
        self.persist_manifest(&manifest)?;
        self.entries.write().expect("registry lock").get_mut(key).expect("manifest exists").manifest = manifest;
        Ok(())
    }

    /// Makes a candidate the active version; the old active one is archived.
    pub fn promote(&self, key: &SeriesKey, v: u32) -> Result<(), MlopsError> {
        self.transition(key, v, true)
    }

    /// Retires a candidate without promoting it.
    pub fn archive(&self, key: &SeriesKey, v: u32) -> Result<(), MlopsError> {
        self.transition(key, v, false)
    }

    pub fn active(&self, key: &SeriesKey) -> Option<Arc<TrainedModel>> {
        let entries = self.entries.read().expect("registry lock");
        let e = entries.get(key)?;
        e.manifest.active.and_then(|v| e.models.get(&v).cloned())
    }

    pub fn active_version(&self, key: &SeriesKey) -> Option<ModelVersion> {
        let entries = self.entries.read().expect("registry lock");
        entries.get(key)?.manifest.active_version().cloned()
    }

    pub fn model(&self, key: &SeriesKey, v: u32) -> Option<Arc<TrainedModel>> {
        self.entries.read().expect("registry lock").get(key)?.models.get(&v).cloned()
    }

    pub fn manifest(&self, key: &SeriesKey) -> Option<Manifest> {
        self.entries.read().expect("registry lock").get(key).map(|e| e.manifest.clone())
    }

    pub fn manifests(&self) -> Vec<Manifest> {
        self.entries
            .read()
            .expect("registry lock")
            .values()
            .map(|e| e.manifest.clone())
            .collect()
    }

    pub fn keys(&self) -> Vec<SeriesKey> {
        self.entries.read().expect("registry lock").keys().cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    /// Number of (actual, predicted) pairs in the rolling window.
    pub window: usize,
    /// Threshold multiplier on the active model's validation RMSE.
    pub kappa: f64,
    /// Windows that must pass after a retrain before drift can trigger again.
    pub cooldown: u64,
    /// Upper bound on how much history a retrain may use, in windows.
    pub history_cap_windows: usize,
    /// A drift-triggered retrain trains only on data from the start of the
    /// drifted window onward, and waits until this many windows of it exist.
    pub drift_retrain_min_windows: usize,
    /// Scheduled retrain interval in windows, if enabled.
    pub schedule_every: Option<u64>,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            window: 48,
            kappa: 1.5,
            cooldown: 288,
            history_cap_windows: 30 * 288,
            drift_retrain_min_windows: 3 * 288,
            schedule_every: None,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<(), MlopsError> {
        if self.window < 2 {
            return Err(MlopsError::Config(format!("window {} < 2", self.window)));
        }
        if !(self.kappa > 1.0 && self.kappa.is_finite()) {
            return Err(MlopsError::Config(format!("kappa {} must exceed 1", self.kappa)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub key: SeriesKey,
    pub rolling_rmse: f64,
    pub epsilon: f64,
    pub triggered: bool,
    /// Window starts of the oldest and newest pair.
    pub window_from: i64,
    pub window_to: i64,
    pub pairs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Pair {
    t: i64,
    actual: f64,
    predicted: f64,
}

/// Rolling RMSE of one key's forecasts, kept incrementally.
#[derive(Clone, Debug)]
pub struct DriftMonitor {
    key: SeriesKey,
    config: DriftConfig,
    pairs: VecDeque<Pair>,
    sse: f64,
    updates: u64,
    since_retrain: Option<u64>,
}

impl DriftMonitor {
    pub fn new(key: SeriesKey, config: DriftConfig) -> Result<Self, MlopsError> {
        config.validate()?;
        Ok(Self {
            key,
            config,
            pairs: VecDeque::new(),
            sse: 0.0,
            updates: 0,
            since_retrain: None,
        })
    }

    pub fn record(&mut self, t: i64, actual: f64, predicted: f64, val_rmse: f64) -> DriftReport {
        let e = actual - predicted;
        self.pairs.push_back(Pair { t, actual, predicted });
        self.sse += e * e;
        if self.pairs.len() > self.config.window {
            let old = self.pairs.pop_front().expect("non-empty");
            let d = old.actual - old.predicted;
            self.sse -= d * d;
        }
        self.updates += 1;
        // Re-sum now and then so cancellation error cannot build up.
        if self.updates.is_multiple_of(4096) {
            self.sse = self.batch_sse();
        }
        self.since_retrain = self.since_retrain.map(|s| s + 1);
        self.report(val_rmse)
    }

    fn batch_sse(&self) -> f64 {
        self.pairs.iter().map(|p| (p.actual - p.predicted).powi(2)).sum()
    }

    pub fn rolling_rmse(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        (self.sse.max(0.0) / self.pairs.len() as f64).sqrt()
    }

    pub fn in_cooldown(&self) -> bool {
        self.since_retrain.is_some_and(|s| s < self.config.cooldown)
    }

    pub fn report(&self, val_rmse: f64) -> DriftReport {
        let d = self.rolling_rmse();
        let epsilon = self.config.kappa * val_rmse;
        let full = self.pairs.len() == self.config.window;
        DriftReport {
            key: self.key.clone(),
            rolling_rmse: d,
            epsilon,
            triggered: full && d > epsilon && !self.in_cooldown(),
            window_from: self.pairs.front().map(|p| p.t).unwrap_or(0),
            window_to: self.pairs.back().map(|p| p.t).unwrap_or(0),
            pairs: self.pairs.len(),
        }
    }

    /// Clears the window; used when a new model takes over.
    pub fn reset_window(&mut self) {
        self.pairs.clear();
        self.sse = 0.0;
    }

    /// Starts the cooldown.
    pub fn mark_retrained(&mut self) {
        self.since_retrain = Some(0);
    }

    pub fn pairs(&self) -> usize {
        self.pairs.len()
    }
}

/// How candidates are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainSettings {
    pub kind: ModelKind,
    pub hyper: Hyper,
    /// Start from the active model's parameters instead of a fresh init.
    pub warm_start: bool,
}

impl Default for RetrainSettings {
    fn default() -> Self {
        Self {
            kind: ModelKind::Lstm,
            hyper: Hyper::default(),
            warm_start: true,
        }
    }
}

/// Everything a training worker needs; detached from the lake and registry.
#[derive(Clone, Debug)]
pub struct RetrainJob {
    pub key: SeriesKey,
    pub range: DataRange,
    pub dataset: Dataset,
    pub settings: RetrainSettings,
    pub warm: Option<LstmParams>,
    pub active: Option<Arc<TrainedModel>>,
    pub report: Option<DriftReport>,
}

/// A trained candidate and its paired comparison against the active model.
#[derive(Clone, Debug)]
pub struct TrainedCandidate {
    pub job_key: SeriesKey,
    pub range: DataRange,
    pub model: TrainedModel,
    pub candidate_val: EvalMetrics,
    pub active_val: Option<EvalMetrics>,
    pub epochs: usize,
    pub report: Option<DriftReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainOutcome {
    pub key: SeriesKey,
    pub promoted: bool,
    pub new_version: u32,
    pub candidate_val_rmse: f64,
    pub active_val_rmse: Option<f64>,
    pub trained_on: DataRange,
    pub epochs: usize,
    pub report: Option<DriftReport>,
}

impl RetrainJob {
    /// Builds the fresh dataset for `key` over `[from, to)`.
    pub fn prepare(
        registry: &Registry,
        lake: &DataLake,
        key: &SeriesKey,
        range: DataRange,
        settings: &RetrainSettings,
        report: Option<DriftReport>,
    ) -> Result<Self, MlopsError> {
        let dataset = lake.make_dataset(std::slice::from_ref(key), range.from, range.to)?;
        if dataset.val.is_empty() {
            return Err(MlopsError::InsufficientData(format!(
                "`{key}` over [{}, {}) leaves an empty validation split",
                range.from, range.to
            )));
        }
        let active = registry.active(key);
        let warm = if settings.warm_start {
            active.as_ref().map(|m| m.params.clone()).filter(|p| {
                p.kind == settings.kind && p.hidden_dim() == settings.hyper.hidden_dim
            })
        } else {
            None
        };
        Ok(Self {
            key: key.clone(),
            range,
            dataset,
            settings: settings.clone(),
            warm,
            active,
            report,
        })
    }

    /// Trains the candidate and scores both models on the fresh validation split.
    pub fn run(self) -> Result<TrainedCandidate, MlopsError> {
        let (model, log) = train_from(self.warm.as_ref(), self.settings.kind, &self.dataset, &self.settings.hyper)?;
        let candidate_val = evaluate(&model, &self.dataset, Split::Val)?;
        let active_val = match &self.active {
            Some(a) => Some(evaluate_windows(a, &self.dataset.val, &self.dataset.normalization)?),
            None => None,
        };
        Ok(TrainedCandidate {
            job_key: self.key,
            range: self.range,
            model,
            candidate_val,
            active_val,
            epochs: log.epochs.len(),
            report: self.report,
        })
    }
}

impl TrainedCandidate {
    /// Ties promote the newer model.
    pub fn should_promote(&self) -> bool {
        self.active_val.is_none_or(|a| self.candidate_val.rmse <= a.rmse)
    }

    /// Registers the candidate and promotes or archives it.
    pub fn complete(self, registry: &Registry, created_at: f64) -> Result<RetrainOutcome, MlopsError> {
        let promote = self.should_promote();
        let mv = registry.register(&self.job_key, self.model, Some(self.range), created_at)?;
        if promote {
            registry.promote(&self.job_key, mv.v)?;
        } else {
            registry.archive(&self.job_key, mv.v)?;
        }
        Ok(RetrainOutcome {
            key: self.job_key,
            promoted: promote,
            new_version: mv.v,
            candidate_val_rmse: self.candidate_val.rmse,
            active_val_rmse: self.active_val.map(|m| m.rmse),
            trained_on: self.range,
            epochs: self.epochs,
            report: self.report,
        })
    }
}

/// Synchronous retrain: prepare, train, compare, register, promote or archive.
pub fn retrain(
    registry: &Registry,
    lake: &DataLake,
    key: &SeriesKey,
    range: DataRange,
    settings: &RetrainSettings,
    created_at: f64,
) -> Result<RetrainOutcome, MlopsError> {
    RetrainJob::prepare(registry, lake, key, range, settings, None)?
        .run()?
        .complete(registry, created_at)
}

/// Registry plus one drift monitor per key.
#[derive(Debug)]
pub struct ModelManager {
    pub registry: Arc<Registry>,
    config: DriftConfig,
    monitors: Mutex<BTreeMap<SeriesKey, DriftMonitor>>,
}

impl ModelManager {
    pub fn new(registry: Arc<Registry>, config: DriftConfig) -> Result<Self, MlopsError> {
        config.validate()?;
        Ok(Self {
            registry,
            config,
            monitors: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &DriftConfig {
        &self.config
    }

    /// Adds one outcome to the key's rolling window.
    pub fn record_outcome(&self, key: &SeriesKey, t: i64, actual: f64, predicted: f64) -> Result<DriftReport, MlopsError> {
        let active = self
            .registry
            .active_version(key)
            .ok_or_else(|| MlopsError::NoActiveModel(key.to_string()))?;
        let mut monitors = self.monitors.lock().expect("monitor lock");
        let mon = match monitors.entry(key.clone()) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(DriftMonitor::new(key.clone(), self.config.clone())?),
        };
        Ok(mon.record(t, actual, predicted, active.val_rmse))
    }

    /// Bookkeeping after a retrain finished: cooldown always starts, and a
    /// promotion clears the window since it measured the old model.
    pub fn note_retrain(&self, outcome: &RetrainOutcome) {
        let mut monitors = self.monitors.lock().expect("monitor lock");
        if let Some(m) = monitors.get_mut(&outcome.key) {
            m.mark_retrained();
            if outcome.promoted {
                m.reset_window();
            }
        }
    }

    /// Starts the cooldown as soon as a retrain is scheduled.
    pub fn note_retrain_scheduled(&self, key: &SeriesKey) {
        if let Some(m) = self.monitors.lock().expect("monitor lock").get_mut(key) {
            m.mark_retrained();
        }
    }

    pub fn rolling_rmse(&self, key: &SeriesKey) -> Option<f64> {
        self.monitors.lock().expect("monitor lock").get(key).map(|m| m.rolling_rmse())
    }
}

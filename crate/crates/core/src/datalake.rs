//! Time-series store for sensor aggregates plus the preprocessing that turns
//! stored series into model datasets.
//!
//! Storage is an append-only JSON Lines log replayed into an in-memory index
//! on open. A later record for the same (sensor, window) replaces the earlier
//! one, both in the index and on replay.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::SensorId;
use crate::sensing::{AggregatedRecord, CongestionLevel, WINDOW_S};

/// Input timesteps per sample.
pub const INPUT_STEPS: usize = 15;
/// Longest run of missing windows filled by interpolation.
pub const MAX_FILL_GAP: usize = 3;
pub const TRAIN_SHARE: f64 = 0.75;
pub const VAL_SHARE: f64 = 0.15;
/// Floor on the normalization denominator for near-constant series.
pub const NORM_EPS: f64 = 1e-6;

const CSV_HEADER: &str = "sensor,window_start_s,flow,speed_mps,occ,level,missing";

#[derive(Debug, Error)]
pub enum LakeError {
    #[error("data lake I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("window start {0} is not a multiple of 300 s")]
    Misaligned(i64),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unknown series `{0}`")]
    UnknownKey(String),
    #[error("invalid series key `{0}`")]
    BadKey(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Flow,
    Speed,
    Occupancy,
}

impl Variable {
    fn name(self) -> &'static str {
        match self {
            Variable::Flow => "flow",
            Variable::Speed => "speed",
            Variable::Occupancy => "occupancy",
        }
    }

    pub fn read(self, r: &AggregatedRecord) -> f64 {
        match self {
            Variable::Flow => r.flow as f64,
            Variable::Speed => r.mean_speed,
            Variable::Occupancy => r.mean_occupancy,
        }
    }
}

/// A sensor and one of its measured variables, written `sensor:variable`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SeriesKey {
    pub sensor: SensorId,
    pub variable: Variable,
}

impl SeriesKey {
    pub fn flow(sensor: impl Into<String>) -> Self {
        Self {
            sensor: SensorId::new(sensor),
            variable: Variable::Flow,
        }
    }
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.sensor, self.variable.name())
    }
}

impl FromStr for SeriesKey {
    type Err = LakeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (sensor, var) = s.rsplit_once(':').ok_or_else(|| LakeError::BadKey(s.into()))?;
        let variable = match var {
            "flow" => Variable::Flow,
            "speed" => Variable::Speed,
            "occupancy" => Variable::Occupancy,
            _ => return Err(LakeError::BadKey(s.into())),
        };
        if sensor.is_empty() {
            return Err(LakeError::BadKey(s.into()));
        }
        Ok(SeriesKey {
            sensor: SensorId::new(sensor),
            variable,
        })
    }
}

impl Serialize for SeriesKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SeriesKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A dense series on the 300 s grid; `None` marks a missing window.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub start: i64,
    pub values: Vec<Option<f64>>,
}

impl Series {
    pub fn time_of(&self, k: usize) -> i64 {
        self.start + k as i64 * WINDOW_S
    }
}

/// Fills interior gaps of at most [`MAX_FILL_GAP`] windows by linear
/// interpolation. Longer gaps and gaps touching either end stay missing.
pub fn clean(series: &Series) -> Series {
    let mut values = series.values.clone();
    let n = values.len();
    let mut k = 0;
    while k < n {
        if values[k].is_some() {
            k += 1;
            continue;
        }
        let gap_start = k;
        while k < n && values[k].is_none() {
            k += 1;
        }
        let gap_len = k - gap_start;
        if gap_start == 0 || k == n || gap_len > MAX_FILL_GAP {
            continue;
        }
        let left = values[gap_start - 1].expect("left neighbour present");
        let right = values[k].expect("right neighbour present");
        for j in 0..gap_len {
            let frac = (j + 1) as f64 / (gap_len + 1) as f64;
            values[gap_start + j] = Some(left + (right - left) * frac);
        }
    }
    Series {
        start: series.start,
        values,
    }
}

/// Min-max scaling fitted on a training span.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut it = values.into_iter();
        let first = it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(Self { min, max })
    }

    fn scale(&self) -> f64 {
        (self.max - self.min).max(NORM_EPS)
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.min) / self.scale()
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.scale() + self.min
    }
}

/// One model sample: 15 normalized inputs and the normalized next value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceWindow {
    pub inputs: Vec<f64>,
    pub target: f64,
    pub key: SeriesKey,
    /// Window start of the first input.
    pub start: i64,
}

impl SequenceWindow {
    /// Window start of the last input.
    pub fn issued_at(&self) -> i64 {
        self.start + (self.inputs.len() as i64 - 1) * WINDOW_S
    }

    pub fn target_time(&self) -> i64 {
        self.start + self.inputs.len() as i64 * WINDOW_S
    }
}

/// Raw (unnormalized) sliding windows over the contiguous runs of a cleaned
/// series, stride 1.
pub fn sliding_windows(series: &Series) -> Vec<(i64, Vec<f64>, f64)> {
    let mut out = Vec::new();
    let n = series.values.len();
    let mut k = 0;
    while k < n {
        if series.values[k].is_none() {
            k += 1;
            continue;
        }
        let run_start = k;
        while k < n && series.values[k].is_some() {
            k += 1;
        }
        let run: Vec<f64> = series.values[run_start..k].iter().map(|v| v.unwrap()).collect();
        for (j, w) in run.windows(INPUT_STEPS + 1).enumerate() {
            out.push((
                series.time_of(run_start + j),
                w[..INPUT_STEPS].to_vec(),
                w[INPUT_STEPS],
            ));
        }
    }
    out
}

/// Sizes of the chronological train/val/test split of `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * TRAIN_SHARE).floor() as usize;
    let val = (n as f64 * VAL_SHARE).floor() as usize;
    (train, val, n - train - val)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SequenceWindow>,
    pub val: Vec<SequenceWindow>,
    pub test: Vec<SequenceWindow>,
    pub normalization: BTreeMap<SeriesKey, Normalization>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> &[SequenceWindow] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn denormalize(&self, value: f64, key: &SeriesKey) -> Result<f64, LakeError> {
        self.normalization
            .get(key)
            .map(|n| n.denormalize(value))
            .ok_or_else(|| LakeError::UnknownKey(key.to_string()))
    }

    /// Builds a dataset from in-memory series.
    pub fn from_series(series: &[(SeriesKey, Series)]) -> Result<Self, LakeError> {
        let mut ds = Dataset {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            normalization: BTreeMap::new(),
        };
        for (key, s) in series {
            let cleaned = clean(s);
            let windows = sliding_windows(&cleaned);
            let (n_train, n_val, _) = split_sizes(windows.len());
            if n_train == 0 {
                return Err(LakeError::InsufficientData(format!(
                    "`{key}` yields {} windows; at least 2 needed for a training split",
                    windows.len()
                )));
            }
            let norm = Normalization::fit(
                windows[..n_train]
                    .iter()
                    .flat_map(|(_, x, y)| x.iter().copied().chain(std::iter::once(*y))),
            )
            .expect("non-empty training span");
            for (k, (start, x, y)) in windows.into_iter().enumerate() {
                let w = SequenceWindow {
                    inputs: x.iter().map(|&v| norm.normalize(v)).collect(),
                    target: norm.normalize(y),
                    key: key.clone(),
                    start,
                };
                if k < n_train {
                    ds.train.push(w);
                } else if k < n_train + n_val {
                    ds.val.push(w);
                } else {
                    ds.test.push(w);
                }
            }
            ds.normalization.insert(key.clone(), norm);
        }
        Ok(ds)
    }
}

/// Append-only store of aggregated records.
pub struct DataLake {
    index: BTreeMap<SensorId, BTreeMap<i64, AggregatedRecord>>,
    log: Option<BufWriter<File>>,
    records_written: u64,
}

impl fmt::Debug for DataLake {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DataLake")
            .field("sensors", &self.index.len())
            .field("persistent", &self.log.is_some())
            .finish()
    }
}

impl Default for DataLake {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl DataLake {
    pub fn in_memory() -> Self {
        Self {
            index: BTreeMap::new(),
            log: None,
            records_written: 0,
        }
    }

    /// Opens (or creates) a log file and replays it into the index.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LakeError> {
        let path = path.as_ref();
        let mut lake = Self::in_memory();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (k, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec = AggregatedRecord::from_wire(&line).map_err(|e| LakeError::Corrupt {
                    line: k + 1,
                    message: e.to_string(),
                })?;
                lake.insert(rec)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        lake.log = Some(BufWriter::new(file));
        Ok(lake)
    }

    fn insert(&mut self, rec: AggregatedRecord) -> Result<(), LakeError> {
        if rec.window_start.rem_euclid(WINDOW_S) != 0 {
            return Err(LakeError::Misaligned(rec.window_start));
        }
        self.index
            .entry(rec.sensor.clone())
            .or_default()
            .insert(rec.window_start, rec);
        Ok(())
    }

    /// Stores a record, replacing any earlier one for the same window.
    pub fn ingest(&mut self, rec: AggregatedRecord) -> Result<(), LakeError> {
        if let Some(log) = &mut self.log {
            if rec.window_start.rem_euclid(WINDOW_S) != 0 {
                return Err(LakeError::Misaligned(rec.window_start));
            }
            writeln!(log, "{}", rec.to_wire())?;
        }
        self.records_written += 1;
        self.insert(rec)
    }

    pub fn flush(&mut self) -> Result<(), LakeError> {
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        Ok(())
    }

    pub fn sensors(&self) -> impl Iterator<Item = &SensorId> {
        self.index.keys()
    }

    pub fn len(&self) -> usize {
        self.index.values().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, sensor: &SensorId, window_start: i64) -> Option<&AggregatedRecord> {
        self.index.get(sensor)?.get(&window_start)
    }

    /// Records of one sensor with `from <= window_start < to`, in time order.
    pub fn query_range(&self, sensor: &SensorId, from: i64, to: i64) -> Vec<&AggregatedRecord> {
        match self.index.get(sensor) {
            Some(m) if from < to => m.range(from..to).map(|(_, r)| r).collect(),
            _ => Vec::new(),
        }
    }

    /// Latest window start stored for any sensor.
    pub fn latest_window(&self) -> Option<i64> {
        self.index.values().filter_map(|m| m.keys().next_back().copied()).max()
    }

    pub fn earliest_window(&self) -> Option<i64> {
        self.index.values().filter_map(|m| m.keys().next().copied()).min()
    }

    /// Dense series over `[from, to)`; absent or flagged windows are `None`.
    pub fn series(&self, key: &SeriesKey, from: i64, to: i64) -> Series {
        let from = from.div_euclid(WINDOW_S) * WINDOW_S;
        let n = ((to - from).max(0) + WINDOW_S - 1) / WINDOW_S;
        let mut values = vec![None; n as usize];
        for r in self.query_range(&key.sensor, from, to) {
            if !r.missing {
                values[((r.window_start - from) / WINDOW_S) as usize] = Some(key.variable.read(r));
            }
        }
        Series { start: from, values }
    }

    /// Cleans, windows, splits and normalizes the requested series.
    pub fn make_dataset(&self, keys: &[SeriesKey], from: i64, to: i64) -> Result<Dataset, LakeError> {
        if keys.is_empty() {
            return Err(LakeError::InsufficientData("no series requested".into()));
        }
        let series: Vec<(SeriesKey, Series)> = keys
            .iter()
            .map(|k| (k.clone(), self.series(k, from, to)))
            .collect();
        Dataset::from_series(&series)
    }

    pub fn export_jsonl(&self, mut out: impl Write) -> Result<(), LakeError> {
        for m in self.index.values() {
            for r in m.values() {
                writeln!(out, "{}", r.to_wire())?;
            }
        }
        Ok(())
    }

    pub fn import_jsonl(&mut self, input: impl BufRead) -> Result<usize, LakeError> {
        let mut n = 0;
        for (k, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = AggregatedRecord::from_wire(&line).map_err(|e| LakeError::Corrupt {
                line: k + 1,
                message: e.to_string(),
            })?;
            self.ingest(rec)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn export_csv(&self, mut out: impl Write) -> Result<(), LakeError> {
        writeln!(out, "{CSV_HEADER}")?;
        for m in self.index.values() {
            for r in m.values() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.sensor, r.window_start, r.flow, r.mean_speed, r.mean_occupancy, r.congestion_level, r.missing
                )?;
            }
        }
        Ok(())
    }

    pub fn import_csv(&mut self, input: impl BufRead) -> Result<usize, LakeError> {
        let mut n = 0;
        for (k, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = k + 1;
            if k == 0 {
                if line.trim() != CSV_HEADER {
                    return Err(LakeError::Corrupt {
                        line: lineno,
                        message: format!("expected header `{CSV_HEADER}`"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let rec = parse_csv_line(&line).map_err(|message| LakeError::Corrupt { line: lineno, message })?;
            self.ingest(rec)?;
            n += 1;
        }
        Ok(n)
    }
}

fn parse_csv_line(line: &str) -> Result<AggregatedRecord, String> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 7 {
        return Err(format!("expected 7 fields, found {}", f.len()));
    }
    let num = |s: &str, what: &str| s.trim().parse::<f64>().map_err(|e| format!("{what}: {e}"));
    let level = match f[5].trim() {
        "Clear" => CongestionLevel::Clear,
        "Moderate" => CongestionLevel::Moderate,
        "Heavy" => CongestionLevel::Heavy,
        other => return Err(format!("unknown level `{other}`")),
    };
    Ok(AggregatedRecord {
        sensor: SensorId::new(f[0].trim()),
        window_start: f[1].trim().parse().map_err(|e| format!("window_start_s: {e}"))?,
        flow: f[2].trim().parse().map_err(|e| format!("flow: {e}"))?,
        mean_speed: num(f[3], "speed_mps")?,
        mean_occupancy: num(f[4], "occ")?,
        congestion_level: level,
        missing: f[6].trim().parse().map_err(|e| format!("missing: {e}"))?,
    })
}

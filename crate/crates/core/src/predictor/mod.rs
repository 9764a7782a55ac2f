//! Recurrent flow forecasters: LSTM and BiLSTM with hand-written BPTT.

mod checkpoint;
mod gradcheck;
mod lstm;
mod metrics;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datalake::{Dataset, Normalization, SeriesKey, SequenceWindow, Split, INPUT_STEPS};
use crate::parallel;

pub use checkpoint::{Checkpoint, WeightArray};
pub use gradcheck::{gradient_check, gradient_check_with, Sample};
pub use lstm::{bilstm_forward, cell_backward, cell_forward, lstm_forward, CellTrace, Head, LstmCell, LstmParams, ModelKind};
pub use metrics::{persistence_metrics, EvalMetrics, MAPE_FLOOR};
pub use train::{train, train_from, Adam, EpochLog, Hyper, TrainingLog};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("empty split")]
    EmptySplit,
    #[error("no normalization for series `{0}`")]
    UnknownKey(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A trained forecaster together with everything needed to serve it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: LstmParams,
    /// Registry version tag, `"v0"` until registered.
    pub version: String,
    pub norm: BTreeMap<SeriesKey, Normalization>,
    pub hyper: Hyper,
    pub val_metrics: Option<EvalMetrics>,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.params.kind
    }

    pub fn normalization(&self, key: &SeriesKey) -> Result<&Normalization, PredictError> {
        self.norm.get(key).ok_or_else(|| PredictError::UnknownKey(key.to_string()))
    }

    /// Raw model output for already-normalized inputs.
    pub fn forward_normalized(&self, inputs: &[f64]) -> Result<f64, PredictError> {
        if inputs.len() != INPUT_STEPS * self.params.input_dim() {
            return Err(PredictError::ShapeMismatch(format!(
                "window has {} inputs, model expects {}",
                inputs.len(),
                INPUT_STEPS * self.params.input_dim()
            )));
        }
        Ok(self.params.predict_flat(inputs))
    }

    /// Forecast in vehicles from raw (unnormalized) inputs.
    pub fn predict_raw(&self, key: &SeriesKey, raw_inputs: &[f64]) -> Result<f64, PredictError> {
        let norm = self.normalization(key)?;
        let xs: Vec<f64> = raw_inputs.iter().map(|&v| norm.normalize(v)).collect();
        let y = self.forward_normalized(&xs)?;
        Ok(norm.denormalize(y).max(0.0))
    }

    /// Forecasts for the next `h` windows, each fed back as the newest input.
    pub fn predict_ahead(&self, key: &SeriesKey, raw_inputs: &[f64], h: u32) -> Result<Vec<f64>, PredictError> {
        if self.params.input_dim() != 1 {
            return Err(PredictError::ShapeMismatch("multi-step forecasts need a univariate model".into()));
        }
        let mut window = raw_inputs.to_vec();
        let mut out = Vec::with_capacity(h as usize);
        for _ in 0..h {
            let y = self.predict_raw(key, &window)?;
            out.push(y);
            window.remove(0);
            window.push(y);
        }
        Ok(out)
    }
}

/// One-step-ahead forecast in vehicles per window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub key: SeriesKey,
    pub horizon: u32,
    pub value: f64,
    /// Window start of the last input.
    pub issued_at: i64,
}

/// Forecast for a window normalized with the model's own normalization.
pub fn predict(model: &TrainedModel, window: &SequenceWindow) -> Result<Forecast, PredictError> {
    let norm = model.normalization(&window.key)?;
    let y = model.forward_normalized(&window.inputs)?;
    Ok(Forecast {
        key: window.key.clone(),
        horizon: 1,
        value: norm.denormalize(y).max(0.0),
        issued_at: window.issued_at(),
    })
}

/// Metrics on windows that were normalized with `data_norm`; inputs are
/// re-expressed in the model's normalization first, so models trained on
/// different data ranges can be compared on the same split.
pub fn evaluate_windows(
    model: &TrainedModel,
    windows: &[SequenceWindow],
    data_norm: &BTreeMap<SeriesKey, Normalization>,
) -> Result<EvalMetrics, PredictError> {
    if windows.is_empty() {
        return Err(PredictError::EmptySplit);
    }
    let pairs = parallel::map_collect(windows, |w| -> Result<(f64, f64), PredictError> {
        let dn = data_norm
            .get(&w.key)
            .ok_or_else(|| PredictError::UnknownKey(w.key.to_string()))?;
        let raw: Vec<f64> = w.inputs.iter().map(|&v| dn.denormalize(v)).collect();
        let pred = model.predict_raw(&w.key, &raw)?;
        Ok((dn.denormalize(w.target), pred))
    });
    let (actual, predicted): (Vec<f64>, Vec<f64>) = pairs.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().unzip();
    EvalMetrics::compute(&actual, &predicted)
}

/// Metrics of `model` on one split of `dataset`, in vehicles.
pub fn evaluate(model: &TrainedModel, dataset: &Dataset, split: Split) -> Result<EvalMetrics, PredictError> {
    evaluate_windows(model, dataset.split(split), &dataset.normalization)
}

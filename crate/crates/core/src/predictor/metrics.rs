use serde::{Deserialize, Serialize};

use super::PredictError;
use crate::datalake::{Dataset, Split};

/// Denominator floor for MAPE, in vehicles.
pub const MAPE_FLOOR: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub n: usize,
}

impl EvalMetrics {
    pub fn compute(actual: &[f64], predicted: &[f64]) -> Result<Self, PredictError> {
        if actual.len() != predicted.len() {
            return Err(PredictError::ShapeMismatch(format!(
                "{} actuals vs {} predictions",
                actual.len(),
                predicted.len()
            )));
        }
        if actual.is_empty() {
            return Err(PredictError::EmptySplit);
        }
        let n = actual.len() as f64;
        let (mut se, mut ae, mut pe) = (0.0, 0.0, 0.0);
        for (&y, &p) in actual.iter().zip(predicted) {
            let e = (y - p).abs();
            se += e * e;
            ae += e;
            pe += e / y.abs().max(MAPE_FLOOR);
        }
        Ok(Self {
            rmse: (se / n).sqrt(),
            mae: ae / n,
            mape: 100.0 * pe / n,
            n: actual.len(),
        })
    }
}

/// Metrics of the last-value forecaster on a split.
pub fn persistence_metrics(dataset: &Dataset, split: Split) -> Result<EvalMetrics, PredictError> {
    let windows = dataset.split(split);
    let mut actual = Vec::with_capacity(windows.len());
    let mut predicted = Vec::with_capacity(windows.len());
    for w in windows {
        let norm = dataset
            .normalization
            .get(&w.key)
            .ok_or_else(|| PredictError::UnknownKey(w.key.to_string()))?;
        let last = *w.inputs.last().ok_or(PredictError::EmptySplit)?;
        actual.push(norm.denormalize(w.target));
        predicted.push(norm.denormalize(last).max(0.0));
    }
    EvalMetrics::compute(&actual, &predicted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = EvalMetrics::compute(&[1.0, 5.0, 0.0], &[1.0, 5.0, 0.0]).unwrap();
        assert_eq!((m.rmse, m.mae, m.mape, m.n), (0.0, 0.0, 0.0, 3));
    }

    #[test]
    fn hand_examples() {
        let m = EvalMetrics::compute(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((m.rmse - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((m.mae - 3.5).abs() < 1e-12);
        let m = EvalMetrics::compute(&[100.0, 200.0], &[90.0, 220.0]).unwrap();
        assert!((m.mape - 10.0).abs() < 1e-12);
    }

    #[test]
    fn near_zero_actuals_use_floor() {
        let m = EvalMetrics::compute(&[0.2], &[1.2]).unwrap();
        assert!((m.mape - 100.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched() {
        assert!(matches!(EvalMetrics::compute(&[], &[]), Err(PredictError::EmptySplit)));
        assert!(EvalMetrics::compute(&[1.0], &[]).is_err());
    }
}

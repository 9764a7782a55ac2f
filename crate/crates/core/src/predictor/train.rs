use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_windows, EvalMetrics, LstmParams, ModelKind, PredictError, TrainedModel};
use crate::datalake::{Dataset, SequenceWindow};
use crate::parallel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub hidden_dim: usize,
    /// Upper bound on epochs; early stopping usually ends sooner.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
    pub patience: usize,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            epochs: 200,
            learning_rate: 1e-3,
            batch: 32,
            seed: 0,
            patience: 10,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean squared error on the training split, normalized units.
    pub train_loss: f64,
    /// Validation RMSE in vehicles.
    pub val_rmse: f64,
    pub best_val_rmse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: LstmParams,
    v: LstmParams,
}

impl Adam {
    pub fn new(like: &LstmParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut LstmParams, grad: &LstmParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let blocks = params
            .slices_mut()
            .into_iter()
            .zip(grad.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut());
        for (((p, g), m), v) in blocks {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Mean gradient of the squared error over `batch`, summed in batch order so
/// the result does not depend on how samples were scheduled.
pub(crate) fn batch_gradient(params: &LstmParams, batch: &[&SequenceWindow]) -> (LstmParams, f64) {
    let per_sample = parallel::map_collect(batch, |w| {
        let mut g = params.zeros_like();
        let (_, loss) = params.loss_and_grad(&w.inputs, w.target, &mut g);
        (g, loss)
    });
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (g, l) in &per_sample {
        total.add_assign(g);
        loss += l;
    }
    total.scale(1.0 / batch.len() as f64);
    (total, loss)
}

/// Trains from a fresh seeded initialization.
pub fn train(kind: ModelKind, dataset: &Dataset, hyper: &Hyper) -> Result<(TrainedModel, TrainingLog), PredictError> {
    train_from(None, kind, dataset, hyper)
}

/// Trains, optionally warm-starting from existing parameters of the same shape.
pub fn train_from(
    init: Option<&LstmParams>,
    kind: ModelKind,
    dataset: &Dataset,
    hyper: &Hyper,
) -> Result<(TrainedModel, TrainingLog), PredictError> {
    if dataset.train.is_empty() {
        return Err(PredictError::EmptySplit);
    }
    if hyper.batch == 0 || hyper.hidden_dim == 0 {
        return Err(PredictError::ShapeMismatch("batch and hidden_dim must be positive".into()));
    }
    let input_dim = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let fresh = LstmParams::random(kind, input_dim, hyper.hidden_dim, &mut rng);
    let mut params = match init {
        Some(p) if p.kind == kind && p.hidden_dim() == hyper.hidden_dim && p.input_dim() == input_dim => p.clone(),
        Some(_) => return Err(PredictError::ShapeMismatch("warm start does not match hyperparameters".into())),
        None => fresh,
    };
    let val: &[SequenceWindow] = if dataset.val.is_empty() { &dataset.train } else { &dataset.val };
    let mut model = TrainedModel {
        params: params.clone(),
        version: "v0".into(),
        norm: dataset.normalization.clone(),
        hyper: hyper.clone(),
        val_metrics: None,
    };
    let mut adam = Adam::new(&params, hyper.learning_rate);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, LstmParams, EvalMetrics)> = None;
    let mut since_best = 0;

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hyper.batch) {
            let batch: Vec<&SequenceWindow> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let (mut grad, loss) = batch_gradient(&params, &batch);
            loss_sum += loss;
            if let Some(clip) = hyper.clip_norm {
                let n = grad.norm();
                if n > clip {
                    grad.scale(clip / n);
                }
            }
            adam.step(&mut params, &grad);
        }
        let train_loss = loss_sum / dataset.train.len() as f64;
        if !train_loss.is_finite() || !params.norm().is_finite() {
            return Err(PredictError::Diverged { epoch, loss: train_loss });
        }
        model.params = params.clone();
        let metrics = evaluate_windows(&model, val, &dataset.normalization)?;
        let improved = best.as_ref().is_none_or(|(b, _, _)| metrics.rmse < *b);
        if improved {
            best = Some((metrics.rmse, params.clone(), metrics));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let best_val_rmse = best.as_ref().map(|b| b.0).unwrap_or(f64::INFINITY);
        log::debug!("epoch {epoch}: train {train_loss:.6} val rmse {:.4} best {best_val_rmse:.4}", metrics.rmse);
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_rmse: metrics.rmse,
            best_val_rmse,
        });
        if since_best >= hyper.patience {
            log.stopped_early = true;
            break;
        }
    }
    if let Some((_, p, m)) = best {
        model.params = p;
        model.val_metrics = Some(m);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datalake::{Normalization, Series, SeriesKey, Split};
    use crate::predictor::{evaluate, persistence_metrics};
    use std::collections::BTreeMap;

    fn seasonal_dataset(n: usize) -> Dataset {
        let values = (0..n)
            .map(|k| Some(60.0 + 40.0 * (k as f64 * std::f64::consts::TAU / 48.0).sin()))
            .collect();
        Dataset::from_series(&[(SeriesKey::flow("s-1"), Series { start: 0, values })]).unwrap()
    }

    fn small_hyper() -> Hyper {
        Hyper {
            hidden_dim: 8,
            epochs: 30,
            learning_rate: 1e-2,
            batch: 16,
            seed: 11,
            patience: 5,
            clip_norm: Some(5.0),
        }
    }

    #[test]
    fn single_sample_overfits() {
        let key = SeriesKey::flow("s-1");
        let w = SequenceWindow {
            inputs: (0..15).map(|k| k as f64 / 15.0).collect(),
            target: 0.3,
            key: key.clone(),
            start: 0,
        };
        let ds = Dataset {
            train: vec![w.clone()],
            val: vec![w],
            test: vec![],
            normalization: BTreeMap::from([(key, Normalization { min: 0.0, max: 1.0 })]),
        };
        let hyper = Hyper {
            hidden_dim: 4,
            epochs: 400,
            learning_rate: 1e-2,
            batch: 1,
            seed: 1,
            patience: 400,
            clip_norm: None,
        };
        let (_, log) = train(ModelKind::Lstm, &ds, &hyper).unwrap();
        assert!(log.epochs.last().unwrap().train_loss < 1e-4);
    }

    #[test]
    fn deterministic_given_seed() {
        let ds = seasonal_dataset(300);
        let (m1, l1) = train(ModelKind::Lstm, &ds, &small_hyper()).unwrap();
        let (m2, l2) = train(ModelKind::Lstm, &ds, &small_hyper()).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1.params, m2.params);
    }

    #[test]
    fn best_val_is_monotone_and_returned() {
        let ds = seasonal_dataset(300);
        let (m, log) = train(ModelKind::Bilstm, &ds, &small_hyper()).unwrap();
        for pair in log.epochs.windows(2) {
            assert!(pair[1].best_val_rmse <= pair[0].best_val_rmse);
        }
        let best = log.epochs.iter().map(|e| e.val_rmse).fold(f64::INFINITY, f64::min);
        let again = evaluate(&m, &ds, Split::Val).unwrap();
        assert!((again.rmse - best).abs() < 1e-9);
        assert_eq!(m.val_metrics.unwrap().rmse, again.rmse);
    }

    #[test]
    fn persistence_target_is_learned() {
        // Target equals the last input: the model should approach persistence quality.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let key = SeriesKey::flow("s-1");
        let make = |rng: &mut ChaCha8Rng, n: usize, start: i64| -> Vec<SequenceWindow> {
            (0..n)
                .map(|k| {
                    let inputs: Vec<f64> = (0..15).map(|_| rand::Rng::random_range(rng, 0.1..0.9)).collect();
                    SequenceWindow { target: inputs[14], inputs, key: key.clone(), start: start + k as i64 * 300 }
                })
                .collect()
        };
        let ds = Dataset {
            train: make(&mut rng, 600, 0),
            val: make(&mut rng, 120, 1_000_000),
            test: vec![],
            normalization: BTreeMap::from([(key.clone(), Normalization { min: 0.0, max: 100.0 })]),
        };
        let hyper = Hyper { hidden_dim: 8, epochs: 80, learning_rate: 1e-2, batch: 16, seed: 2, patience: 10, clip_norm: Some(5.0) };
        let (m, _) = train(ModelKind::Lstm, &ds, &hyper).unwrap();
        let model_rmse = evaluate(&m, &ds, Split::Val).unwrap().rmse;
        let base = persistence_metrics(&ds, Split::Val).unwrap().rmse;
        // Persistence is exact here, so the bar is a small fraction of the target spread.
        assert_eq!(base, 0.0);
        let spread = 80.0 / 12f64.sqrt();
        assert!(model_rmse < 0.25 * spread, "rmse {model_rmse}");
    }

    #[test]
    fn empty_train_rejected() {
        let ds = Dataset { train: vec![], val: vec![], test: vec![], normalization: BTreeMap::new() };
        assert!(matches!(train(ModelKind::Lstm, &ds, &Hyper::default()), Err(PredictError::EmptySplit)));
    }

    #[test]
    fn divergence_detected() {
        let ds = seasonal_dataset(200);
        let hyper = Hyper { learning_rate: f64::INFINITY, clip_norm: None, ..small_hyper() };
        assert!(matches!(train(ModelKind::Lstm, &ds, &hyper), Err(PredictError::Diverged { .. })));
    }
}

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalMetrics, Head, Hyper, LstmCell, LstmParams, ModelKind, PredictError, TrainedModel};
use crate::datalake::{Normalization, SeriesKey};

const GATES: [&str; 4] = ["i", "f", "g", "o"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightArray {
    Matrix(Vec<Vec<f64>>),
    Vector(Vec<f64>),
}

/// On-disk form of a [`TrainedModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub version: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weights: BTreeMap<String, WeightArray>,
    pub norm: BTreeMap<SeriesKey, Normalization>,
    pub hyper: Hyper,
    pub val_metrics: Option<EvalMetrics>,
}

fn prefix(direction: usize) -> &'static str {
    if direction == 0 {
        ""
    } else {
        "bwd_"
    }
}

impl Checkpoint {
    pub fn from_model(model: &TrainedModel) -> Self {
        let p = &model.params;
        let (ni, h) = (p.input_dim(), p.hidden_dim());
        let mut weights = BTreeMap::new();
        for (d, cell) in p.cells.iter().enumerate() {
            let pre = prefix(d);
            for (g, name) in GATES.iter().enumerate() {
                let w = (0..h)
                    .map(|j| cell.w[(g * h + j) * ni..(g * h + j + 1) * ni].to_vec())
                    .collect();
                let u = (0..h)
                    .map(|j| cell.u[(g * h + j) * h..(g * h + j + 1) * h].to_vec())
                    .collect();
                weights.insert(format!("{pre}W_{name}"), WeightArray::Matrix(w));
                weights.insert(format!("{pre}U_{name}"), WeightArray::Matrix(u));
                weights.insert(format!("{pre}b_{name}"), WeightArray::Vector(cell.b[g * h..(g + 1) * h].to_vec()));
            }
        }
        weights.insert("W_out".into(), WeightArray::Matrix(vec![p.head.w.clone()]));
        weights.insert("b_out".into(), WeightArray::Vector(vec![p.head.b]));
        Self {
            kind: p.kind,
            version: model.version.clone(),
            input_dim: ni,
            hidden_dim: h,
            weights,
            norm: model.norm.clone(),
            hyper: model.hyper.clone(),
            val_metrics: model.val_metrics,
        }
    }

    pub fn into_model(self) -> Result<TrainedModel, PredictError> {
        let (ni, h) = (self.input_dim, self.hidden_dim);
        let take_matrix = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>, PredictError> {
            match self.weights.get(name) {
                Some(WeightArray::Matrix(m)) if m.len() == rows && m.iter().all(|r| r.len() == cols) => {
                    Ok(m.iter().flatten().copied().collect())
                }
                Some(_) => Err(PredictError::Checkpoint(format!("`{name}` is not a {rows}×{cols} matrix"))),
                None => Err(PredictError::Checkpoint(format!("missing weight `{name}`"))),
            }
        };
        let take_vector = |name: &str, len: usize| -> Result<Vec<f64>, PredictError> {
            match self.weights.get(name) {
                Some(WeightArray::Vector(v)) if v.len() == len => Ok(v.clone()),
                Some(_) => Err(PredictError::Checkpoint(format!("`{name}` is not a vector of {len}"))),
                None => Err(PredictError::Checkpoint(format!("missing weight `{name}`"))),
            }
        };
        let mut cells = Vec::new();
        for d in 0..self.kind.directions() {
            let pre = prefix(d);
            let mut cell = LstmCell::zeros(ni, h);
            cell.w.clear();
            cell.u.clear();
            cell.b.clear();
            for name in GATES {
                cell.w.extend(take_matrix(&format!("{pre}W_{name}"), h, ni)?);
                cell.u.extend(take_matrix(&format!("{pre}U_{name}"), h, h)?);
                cell.b.extend(take_vector(&format!("{pre}b_{name}"), h)?);
            }
            cells.push(cell);
        }
        let head_w = take_matrix("W_out", 1, self.kind.directions() * h)?;
        let head_b = take_vector("b_out", 1)?[0];
        let params = LstmParams {
            kind: self.kind,
            cells,
            head: Head { w: head_w, b: head_b },
        };
        params.check().map_err(|e| PredictError::Checkpoint(e.to_string()))?;
        Ok(TrainedModel {
            params,
            version: self.version,
            norm: self.norm,
            hyper: self.hyper,
            val_metrics: self.val_metrics,
        })
    }
}

impl TrainedModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint::from_model(self)).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PredictError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| PredictError::Checkpoint(e.to_string()))?;
        ck.into_model()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PredictError> {
        std::fs::write(path.as_ref(), self.to_json())
            .map_err(|e| PredictError::Checkpoint(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PredictError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PredictError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(kind: ModelKind) -> TrainedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        TrainedModel {
            params: LstmParams::random(kind, 1, 3, &mut rng),
            version: "v3".into(),
            norm: BTreeMap::from([(SeriesKey::flow("s-12"), Normalization { min: 0.0, max: 240.0 })]),
            hyper: Hyper::default(),
            val_metrics: Some(EvalMetrics { rmse: 1.0 / 3.0, mae: 0.1, mape: 7.0, n: 5 }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [ModelKind::Lstm, ModelKind::Bilstm] {
            let m = model(kind);
            let text = m.to_json();
            let back = TrainedModel::from_json(&text).unwrap();
            assert_eq!(back, m);
            for (a, b) in back.params.slices().iter().zip(m.params.slices()) {
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            assert_eq!(back.to_json(), text);
        }
    }

    #[test]
    fn layout_is_row_major_per_gate() {
        let m = model(ModelKind::Lstm);
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["kind"], "lstm");
        assert_eq!(v["version"], "v3");
        assert_eq!(v["norm"]["s-12:flow"]["max"], 240.0);
        let u_f = &v["weights"]["U_f"];
        assert_eq!(u_f.as_array().unwrap().len(), 3);
        // Row 1 of the forget block is stacked row h + 1.
        assert_eq!(u_f[1][2].as_f64().unwrap(), m.params.cells[0].u[(3 + 1) * 3 + 2]);
        assert_eq!(v["weights"]["b_o"][2].as_f64().unwrap(), m.params.cells[0].b[9 + 2]);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let m = model(ModelKind::Lstm);
        let mut ck = Checkpoint::from_model(&m);
        ck.weights.remove("U_g");
        assert!(ck.into_model().is_err());
        let mut ck = Checkpoint::from_model(&m);
        ck.weights.insert("b_i".into(), WeightArray::Vector(vec![0.0]));
        assert!(ck.into_model().is_err());
        assert!(TrainedModel::from_json("{\"kind\":\"gru\"}").is_err());
    }
}

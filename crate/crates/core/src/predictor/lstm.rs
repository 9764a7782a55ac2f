//! LSTM cell, forward recurrence and backpropagation through time.
//!
//! Gate pre-activations are stacked in one `4·hidden` vector in the order
//! input, forget, candidate, output. Weights are row-major.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PredictError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lstm,
    Bilstm,
}

impl ModelKind {
    pub fn directions(self) -> usize {
        match self {
            ModelKind::Lstm => 1,
            ModelKind::Bilstm => 2,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lstm" => Ok(ModelKind::Lstm),
            "bilstm" => Ok(ModelKind::Bilstm),
            _ => Err(format!("unknown model kind `{s}` (expected lstm or bilstm)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Lstm => "lstm",
            ModelKind::Bilstm => "bilstm",
        })
    }
}

/// Weights of one recurrent direction.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `(4·hidden) × input`.
    pub w: Vec<f64>,
    /// `(4·hidden) × hidden`.
    pub u: Vec<f64>,
    /// `4·hidden`.
    pub b: Vec<f64>,
}

impl LstmCell {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let g = 4 * hidden_dim;
        Self {
            input_dim,
            hidden_dim,
            w: vec![0.0; g * input_dim],
            u: vec![0.0; g * hidden_dim],
            b: vec![0.0; g],
        }
    }

    /// Uniform initialization in `[-scale, scale]`.
    pub fn random(input_dim: usize, hidden_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut c = Self::zeros(input_dim, hidden_dim);
        for v in c.w.iter_mut().chain(c.u.iter_mut()).chain(c.b.iter_mut()) {
            *v = rng.random_range(-scale..=scale);
        }
        c
    }

    fn check(&self) -> Result<(), PredictError> {
        let g = 4 * self.hidden_dim;
        if self.hidden_dim == 0
            || self.input_dim == 0
            || self.w.len() != g * self.input_dim
            || self.u.len() != g * self.hidden_dim
            || self.b.len() != g
        {
            return Err(PredictError::ShapeMismatch(format!(
                "cell input {} hidden {}: w {} u {} b {}",
                self.input_dim,
                self.hidden_dim,
                self.w.len(),
                self.u.len(),
                self.b.len()
            )));
        }
        Ok(())
    }
}

/// Linear map from the final hidden state(s) to the scalar prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub w: Vec<f64>,
    pub b: f64,
}

/// Complete parameter set of an LSTM or BiLSTM forecaster. The same type
/// doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub kind: ModelKind,
    /// One cell per direction; the second one reads the sequence reversed.
    pub cells: Vec<LstmCell>,
    pub head: Head,
}

impl LstmParams {
    pub fn zeros(kind: ModelKind, input_dim: usize, hidden_dim: usize) -> Self {
        let dirs = kind.directions();
        Self {
            kind,
            cells: (0..dirs).map(|_| LstmCell::zeros(input_dim, hidden_dim)).collect(),
            head: Head {
                w: vec![0.0; dirs * hidden_dim],
                b: 0.0,
            },
        }
    }

    /// Uniform `±1/sqrt(hidden)` initialization.
    pub fn random(kind: ModelKind, input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let dirs = kind.directions();
        let k = 1.0 / (hidden_dim as f64).sqrt();
        let cells = (0..dirs)
            .map(|_| LstmCell::random(input_dim, hidden_dim, k, rng))
            .collect();
        let kh = 1.0 / ((dirs * hidden_dim) as f64).sqrt();
        let head = Head {
            w: (0..dirs * hidden_dim).map(|_| rng.random_range(-kh..=kh)).collect(),
            b: 0.0,
        };
        Self { kind, cells, head }
    }

    pub fn input_dim(&self) -> usize {
        self.cells[0].input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.cells[0].hidden_dim
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kind, self.input_dim(), self.hidden_dim())
    }

    pub fn check(&self) -> Result<(), PredictError> {
        if self.cells.len() != self.kind.directions() {
            return Err(PredictError::ShapeMismatch(format!(
                "{} model with {} cells",
                self.kind,
                self.cells.len()
            )));
        }
        for c in &self.cells {
            c.check()?;
            if c.hidden_dim != self.hidden_dim() || c.input_dim != self.input_dim() {
                return Err(PredictError::ShapeMismatch("directions disagree on dims".into()));
            }
        }
        if self.head.w.len() != self.cells.len() * self.hidden_dim() {
            return Err(PredictError::ShapeMismatch(format!(
                "head has {} weights, expected {}",
                self.head.w.len(),
                self.cells.len() * self.hidden_dim()
            )));
        }
        if !self.slices().iter().all(|s| s.iter().all(|v| v.is_finite())) {
            return Err(PredictError::ShapeMismatch("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Every parameter block, in a fixed order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.cells {
            out.push(&c.w);
            out.push(&c.u);
            out.push(&c.b);
        }
        out.push(&self.head.w);
        out.push(std::slice::from_ref(&self.head.b));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.cells {
            out.push(&mut c.w);
            out.push(&mut c.u);
            out.push(&mut c.b);
        }
        out.push(&mut self.head.w);
        out.push(std::slice::from_mut(&mut self.head.b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for s in self.slices_mut() {
            for x in s {
                *x *= f;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Prediction for a flattened `steps × input_dim` sequence.
    pub fn predict_flat(&self, xs: &[f64]) -> f64 {
        let steps = xs.len() / self.input_dim();
        let mut out = self.head.b;
        for (d, cell) in self.cells.iter().enumerate() {
            let trace = cell_forward(cell, xs, steps, d == 1);
            let h = trace.last_hidden();
            let w = &self.head.w[d * cell.hidden_dim..(d + 1) * cell.hidden_dim];
            out += dot(w, h);
        }
        out
    }

    /// Squared error of one sample; adds its gradient into `grad`.
    pub fn loss_and_grad(&self, xs: &[f64], target: f64, grad: &mut LstmParams) -> (f64, f64) {
        let steps = xs.len() / self.input_dim();
        let traces: Vec<CellTrace> = self
            .cells
            .iter()
            .enumerate()
            .map(|(d, c)| cell_forward(c, xs, steps, d == 1))
            .collect();
        let h = self.hidden_dim();
        let mut pred = self.head.b;
        for (d, t) in traces.iter().enumerate() {
            pred += dot(&self.head.w[d * h..(d + 1) * h], t.last_hidden());
        }
        let err = pred - target;
        let dpred = 2.0 * err;
        grad.head.b += dpred;
        for (d, t) in traces.iter().enumerate() {
            let last = t.last_hidden();
            for j in 0..h {
                grad.head.w[d * h + j] += dpred * last[j];
            }
            let dh: Vec<f64> = self.head.w[d * h..(d + 1) * h].iter().map(|w| dpred * w).collect();
            cell_backward(&self.cells[d], t, xs, &dh, &mut grad.cells[d]);
        }
        (pred, err * err)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Everything the backward pass needs from one direction's forward pass.
pub struct CellTrace {
    steps: usize,
    hidden: usize,
    reversed: bool,
    /// `steps × 4H`, post-activation gate values.
    gates: Vec<f64>,
    /// `(steps + 1) × H`, `c_0 = 0`.
    cells: Vec<f64>,
    /// `steps × H`, `tanh(c_t)`.
    cell_tanh: Vec<f64>,
    /// `(steps + 1) × H`, `h_0 = 0`.
    hiddens: Vec<f64>,
}

impl CellTrace {
    pub fn last_hidden(&self) -> &[f64] {
        &self.hiddens[self.steps * self.hidden..]
    }

    /// Hidden state after processing `k + 1` inputs (in processing order).
    pub fn hidden(&self, k: usize) -> &[f64] {
        &self.hiddens[(k + 1) * self.hidden..(k + 2) * self.hidden]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn input_index(&self, k: usize) -> usize {
        if self.reversed {
            self.steps - 1 - k
        } else {
            k
        }
    }
}

/// Runs the recurrence over `steps` inputs, optionally in reverse order.
pub fn cell_forward(cell: &LstmCell, xs: &[f64], steps: usize, reversed: bool) -> CellTrace {
    let h = cell.hidden_dim;
    let ni = cell.input_dim;
    let g4 = 4 * h;
    let mut tr = CellTrace {
        steps,
        hidden: h,
        reversed,
        gates: vec![0.0; steps * g4],
        cells: vec![0.0; (steps + 1) * h],
        cell_tanh: vec![0.0; steps * h],
        hiddens: vec![0.0; (steps + 1) * h],
    };
    for k in 0..steps {
        let t = tr.input_index(k);
        let x = &xs[t * ni..(t + 1) * ni];
        let (prev_h, rest_h) = tr.hiddens.split_at_mut((k + 1) * h);
        let h_prev = &prev_h[k * h..];
        let z = &mut tr.gates[k * g4..(k + 1) * g4];
        for r in 0..g4 {
            z[r] = cell.b[r] + dot(&cell.w[r * ni..(r + 1) * ni], x) + dot(&cell.u[r * h..(r + 1) * h], h_prev);
        }
        for v in &mut z[..2 * h] {
            *v = sigmoid(*v);
        }
        for v in &mut z[2 * h..3 * h] {
            *v = v.tanh();
        }
        for v in &mut z[3 * h..] {
            *v = sigmoid(*v);
        }
        let (prev_c, rest_c) = tr.cells.split_at_mut((k + 1) * h);
        let c_prev = &prev_c[k * h..];
        let c = &mut rest_c[..h];
        let tc = &mut tr.cell_tanh[k * h..(k + 1) * h];
        let h_out = &mut rest_h[..h];
        for j in 0..h {
            let (i, f, g, o) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
            c[j] = f * c_prev[j] + i * g;
            tc[j] = c[j].tanh();
            h_out[j] = o * tc[j];
        }
    }
    tr
}

/// Accumulates parameter gradients given `dh_last = ∂L/∂h_T`.
pub fn cell_backward(cell: &LstmCell, tr: &CellTrace, xs: &[f64], dh_last: &[f64], grad: &mut LstmCell) {
    let h = cell.hidden_dim;
    let ni = cell.input_dim;
    let g4 = 4 * h;
    let mut dh = dh_last.to_vec();
    let mut dc = vec![0.0; h];
    let mut dz = vec![0.0; g4];
    for k in (0..tr.steps).rev() {
        let z = &tr.gates[k * g4..(k + 1) * g4];
        let c_prev = &tr.cells[k * h..(k + 1) * h];
        let tc = &tr.cell_tanh[k * h..(k + 1) * h];
        for j in 0..h {
            let (i, f, g, o) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
            let d_o = dh[j] * tc[j];
            let dct = dc[j] + dh[j] * o * (1.0 - tc[j] * tc[j]);
            dz[j] = dct * g * i * (1.0 - i);
            dz[h + j] = dct * c_prev[j] * f * (1.0 - f);
            dz[2 * h + j] = dct * i * (1.0 - g * g);
            dz[3 * h + j] = d_o * o * (1.0 - o);
            dc[j] = dct * f;
        }
        let t = tr.input_index(k);
        let x = &xs[t * ni..(t + 1) * ni];
        let h_prev = &tr.hiddens[k * h..(k + 1) * h];
        dh.fill(0.0);
        for r in 0..g4 {
            let d = dz[r];
            grad.b[r] += d;
            for (gw, xv) in grad.w[r * ni..(r + 1) * ni].iter_mut().zip(x) {
                *gw += d * xv;
            }
            let urow = &cell.u[r * h..(r + 1) * h];
            let grow = &mut grad.u[r * h..(r + 1) * h];
            for j in 0..h {
                grow[j] += d * h_prev[j];
                dh[j] += urow[j] * d;
            }
        }
    }
}

/// Unidirectional forward pass over `inputs` (one vector per step).
/// Returns the prediction and the hidden state after each step.
pub fn lstm_forward(params: &LstmParams, inputs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>), PredictError> {
    if params.kind != ModelKind::Lstm {
        return Err(PredictError::ShapeMismatch("lstm_forward needs a unidirectional model".into()));
    }
    params.check()?;
    let xs = flatten(inputs, params.input_dim())?;
    let tr = cell_forward(&params.cells[0], &xs, inputs.len(), false);
    let pred = params.head.b + dot(&params.head.w, tr.last_hidden());
    let trace = (0..tr.steps()).map(|k| tr.hidden(k).to_vec()).collect();
    Ok((pred, trace))
}

/// Bidirectional forward pass: `fwd` reads the inputs in order, `bwd` reads
/// them reversed, and `head` maps the concatenated final states.
pub fn bilstm_forward(fwd: &LstmCell, bwd: &LstmCell, head: &Head, inputs: &[Vec<f64>]) -> Result<f64, PredictError> {
    let params = LstmParams {
        kind: ModelKind::Bilstm,
        cells: vec![fwd.clone(), bwd.clone()],
        head: head.clone(),
    };
    params.check()?;
    let xs = flatten(inputs, params.input_dim())?;
    Ok(params.predict_flat(&xs))
}

pub(crate) fn flatten(inputs: &[Vec<f64>], input_dim: usize) -> Result<Vec<f64>, PredictError> {
    if inputs.is_empty() {
        return Err(PredictError::ShapeMismatch("empty input sequence".into()));
    }
    let mut xs = Vec::with_capacity(inputs.len() * input_dim);
    for (t, v) in inputs.iter().enumerate() {
        if v.len() != input_dim {
            return Err(PredictError::ShapeMismatch(format!(
                "step {t} has {} features, model expects {input_dim}",
                v.len()
            )));
        }
        xs.extend_from_slice(v);
    }
    Ok(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-from-the-equations evaluation with per-gate matrices, kept
    /// independent of the stacked layout used above.
    fn reference_direction(cell: &LstmCell, inputs: &[Vec<f64>]) -> Vec<f64> {
        let h = cell.hidden_dim;
        let ni = cell.input_dim;
        let gate = |g: usize, x: &[f64], hp: &[f64], j: usize| -> f64 {
            let row = g * h + j;
            let mut s = cell.b[row];
            for k in 0..ni {
                s += cell.w[row * ni + k] * x[k];
            }
            for k in 0..h {
                s += cell.u[row * h + k] * hp[k];
            }
            s
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        for x in inputs {
            let i: Vec<f64> = (0..h).map(|j| sig(gate(0, x, &hs, j))).collect();
            let f: Vec<f64> = (0..h).map(|j| sig(gate(1, x, &hs, j))).collect();
            let g: Vec<f64> = (0..h).map(|j| gate(2, x, &hs, j).tanh()).collect();
            let o: Vec<f64> = (0..h).map(|j| sig(gate(3, x, &hs, j))).collect();
            cs = (0..h).map(|j| f[j] * cs[j] + i[j] * g[j]).collect();
            hs = (0..h).map(|j| o[j] * cs[j].tanh()).collect();
        }
        hs
    }

    fn fixture_inputs(dim: usize) -> Vec<Vec<f64>> {
        (0..15)
            .map(|t| (0..dim).map(|k| ((t * 7 + k * 3) as f64 * 0.37).sin()).collect())
            .collect()
    }

    #[test]
    fn zero_params_predict_zero() {
        for kind in [ModelKind::Lstm, ModelKind::Bilstm] {
            let p = LstmParams::zeros(kind, 1, 8);
            let xs: Vec<f64> = (0..15).map(|t| t as f64).collect();
            assert_eq!(p.predict_flat(&xs), 0.0);
        }
        let p = LstmParams::zeros(ModelKind::Lstm, 1, 4);
        let (pred, trace) = lstm_forward(&p, &fixture_inputs(1)).unwrap();
        assert_eq!(pred, 0.0);
        assert!(trace.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = LstmParams::random(ModelKind::Lstm, 3, 5, &mut rng);
        let inputs = fixture_inputs(3);
        let (pred, trace) = lstm_forward(&p, &inputs).unwrap();
        let h = reference_direction(&p.cells[0], &inputs);
        let expected = p.head.b + p.head.w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
        assert!((pred - expected).abs() < 1e-10);
        for (a, b) in trace.last().unwrap().iter().zip(&h) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn bilstm_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LstmParams::random(ModelKind::Bilstm, 2, 4, &mut rng);
        let inputs = fixture_inputs(2);
        let got = bilstm_forward(&p.cells[0], &p.cells[1], &p.head, &inputs).unwrap();
        let hf = reference_direction(&p.cells[0], &inputs);
        let rev: Vec<Vec<f64>> = inputs.iter().rev().cloned().collect();
        let hb = reference_direction(&p.cells[1], &rev);
        let concat: Vec<f64> = hf.into_iter().chain(hb).collect();
        let expected = p.head.b + p.head.w.iter().zip(&concat).map(|(a, b)| a * b).sum::<f64>();
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn palindrome_with_shared_weights_gives_equal_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = LstmCell::random(1, 6, 0.5, &mut rng);
        let xs: Vec<f64> = [1.0, 0.2, -0.4, 0.9, 0.3, 0.9, -0.4, 0.2, 1.0].to_vec();
        let f = cell_forward(&cell, &xs, xs.len(), false);
        let b = cell_forward(&cell, &xs, xs.len(), true);
        assert_eq!(f.last_hidden(), b.last_hidden());
    }

    #[test]
    fn reversed_sequence_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmParams::random(ModelKind::Lstm, 1, 4, &mut rng);
        let xs: Vec<f64> = (0..15).map(|t| t as f64 / 15.0).collect();
        let rev: Vec<f64> = xs.iter().rev().copied().collect();
        assert_ne!(p.predict_flat(&xs), p.predict_flat(&rev));
    }

    #[test]
    fn shape_mismatch_reported() {
        let p = LstmParams::zeros(ModelKind::Lstm, 2, 3);
        assert!(matches!(
            lstm_forward(&p, &[vec![1.0]]),
            Err(PredictError::ShapeMismatch(_))
        ));
        let mut broken = p.clone();
        broken.cells[0].u.pop();
        assert!(matches!(
            lstm_forward(&broken, &[vec![1.0, 2.0]]),
            Err(PredictError::ShapeMismatch(_))
        ));
        let bi = LstmParams::zeros(ModelKind::Bilstm, 1, 3);
        let other = LstmCell::zeros(1, 4);
        assert!(bilstm_forward(&bi.cells[0], &other, &bi.head, &[vec![1.0]]).is_err());
    }
}

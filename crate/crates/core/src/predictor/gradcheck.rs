use num_traits::Float;
use twofloat::TwoFloat;

use super::LstmParams;
use crate::parallel;

/// One training sample in normalized units; `inputs` is flattened
/// `steps × input_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub inputs: Vec<f64>,
    pub target: f64,
}

/// Largest relative disagreement between the analytic gradient of the
/// squared error and central finite differences, over every parameter.
pub fn gradient_check(params: &LstmParams, sample: &Sample, eps: f64) -> f64 {
    gradient_check_with(params, sample, eps, |_| {})
}

/// As [`gradient_check`], but lets the caller tamper with the analytic
/// gradient first. Used to confirm the check notices broken gradients.
pub fn gradient_check_with(
    params: &LstmParams,
    sample: &Sample,
    eps: f64,
    mutate: impl FnOnce(&mut LstmParams),
) -> f64 {
    let mut analytic = params.zeros_like();
    params.loss_and_grad(&sample.inputs, sample.target, &mut analytic);
    mutate(&mut analytic);

    // The central difference resolves gradients of order 1e-8 only if the
    // loss is evaluated well below f64 rounding, hence double-double.
    let target = TwoFloat::from(sample.target);
    let delta = TwoFloat::from(eps);
    let base = lift_blocks::<TwoFloat>(params);
    let dirs = params.cells.len();
    // A perturbed cell weight only changes that direction's final state.
    let finals: Vec<Vec<TwoFloat>> = (0..dirs).map(|d| final_hidden(params, &base, d, &sample.inputs)).collect();
    let coords: Vec<(usize, usize, f64)> = analytic
        .slices()
        .iter()
        .enumerate()
        .flat_map(|(b, s)| s.iter().enumerate().map(move |(k, &a)| (b, k, a)))
        .collect();
    let errors = parallel::map_collect(&coords, |&(b, k, a)| {
        let mut blocks = base.clone();
        let orig = blocks[b][k];
        let mut loss = |step: TwoFloat| {
            blocks[b][k] = orig + step;
            let mut hidden = finals.clone();
            if b < 3 * dirs {
                hidden[b / 3] = final_hidden(params, &blocks, b / 3, &sample.inputs);
            }
            let e = head_output(&blocks, &hidden) - target;
            e * e
        };
        let numeric: f64 = ((loss(delta) - loss(-delta)) / (delta * 2.0)).into();
        (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8)
    });
    errors.into_iter().fold(0.0, f64::max)
}

fn lift_blocks<T: Float>(params: &LstmParams) -> Vec<Vec<T>> {
    params
        .slices()
        .iter()
        .map(|s| s.iter().map(|&v| T::from(v).expect("f64 converts")).collect())
        .collect()
}

/// Final hidden state of direction `d` in any float type, over parameter
/// blocks laid out as `LstmParams::slices`. Mirrors `cell_forward`.
fn final_hidden<T: Float>(params: &LstmParams, blocks: &[Vec<T>], d: usize, xs: &[f64]) -> Vec<T> {
    let lift = |x: f64| T::from(x).expect("f64 converts");
    let sigmoid = |x: T| T::one() / (T::one() + (-x).exp());
    let hd = params.hidden_dim();
    let ni = params.input_dim();
    let steps = xs.len() / ni;
    let (w, u, bias) = (&blocks[3 * d], &blocks[3 * d + 1], &blocks[3 * d + 2]);
    let mut h = vec![T::zero(); hd];
    let mut c = vec![T::zero(); hd];
    let mut z = vec![T::zero(); 4 * hd];
    for k in 0..steps {
        let t = if d == 1 { steps - 1 - k } else { k };
        let x = &xs[t * ni..(t + 1) * ni];
        for (r, zr) in z.iter_mut().enumerate() {
            let mut acc = bias[r];
            for (j, &xv) in x.iter().enumerate() {
                acc = acc + w[r * ni + j] * lift(xv);
            }
            for j in 0..hd {
                acc = acc + u[r * hd + j] * h[j];
            }
            *zr = acc;
        }
        for j in 0..hd {
            let (i, f, g, o) = (sigmoid(z[j]), sigmoid(z[hd + j]), z[2 * hd + j].tanh(), sigmoid(z[3 * hd + j]));
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
    }
    h
}

fn head_output<T: Float>(blocks: &[Vec<T>], hidden: &[Vec<T>]) -> T {
    let head = &blocks[blocks.len() - 2];
    hidden
        .iter()
        .flatten()
        .zip(head)
        .fold(blocks[blocks.len() - 1][0], |acc, (&h, &w)| acc + w * h)
}

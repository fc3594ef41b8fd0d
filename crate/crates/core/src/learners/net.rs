//! Fully connected softmax network over a flat parameter vector.
//!
//! Layer `l` maps `dims[l]` inputs to `dims[l + 1]` outputs. Its block in the
//! parameter vector is the `dims[l + 1] x dims[l]` weight matrix (row per
//! output unit) followed by `dims[l + 1]` biases. Hidden layers apply the
//! configured activation; the last layer applies softmax.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::model::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => libm::tanh(z),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Offsets of each layer's weight and bias blocks.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    dims: Vec<usize>,
    weights: Vec<usize>,
    biases: Vec<usize>,
}

impl Layout {
    pub(crate) fn new(dims: &[usize]) -> Self {
        let mut weights = Vec::with_capacity(dims.len().saturating_sub(1));
        let mut biases = Vec::with_capacity(weights.capacity());
        let mut off = 0;
        for w in dims.windows(2) {
            weights.push(off);
            off += w[0] * w[1];
            biases.push(off);
            off += w[1];
        }
        Self { dims: dims.to_vec(), weights, biases }
    }

    #[inline]
    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// True at positions holding weights (as opposed to biases).
    pub(crate) fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for w in self.dims.windows(2) {
            mask.extend(core::iter::repeat_n(true, w[0] * w[1]));
            mask.extend(core::iter::repeat_n(false, w[1]));
        }
        mask
    }
}

/// Scratch buffers for one minibatch; reused across steps.
#[derive(Debug, Default)]
pub(crate) struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

/// Runs the forward pass on the selected rows. Afterwards `ws.acts[L]` holds
/// softmax probabilities. Returns the summed cross-entropy over the batch.
pub(crate) fn forward(
    layout: &Layout,
    params: &[f64],
    act: Activation,
    x: &Matrix,
    labels: Option<&[usize]>,
    rows: &[usize],
    ws: &mut Workspace,
) -> f64 {
    let batch = rows.len();
    let n_layers = layout.n_layers();
    ws.acts.resize_with(n_layers + 1, Vec::new);
    let d = layout.dims[0];
    let input = &mut ws.acts[0];
    input.clear();
    for &r in rows {
        input.extend_from_slice(x.row(r));
    }
    debug_assert_eq!(input.len(), batch * d);

    for l in 0..n_layers {
        let fan_in = layout.dims[l];
        let fan_out = layout.dims[l + 1];
        let w = &params[layout.weights[l]..layout.weights[l] + fan_in * fan_out];
        let b = &params[layout.biases[l]..layout.biases[l] + fan_out];
        let (prev, rest) = ws.acts.split_at_mut(l + 1);
        let inp = &prev[l];
        let out = &mut rest[0];
        out.clear();
        out.resize(batch * fan_out, 0.0);
        for s in 0..batch {
            let xi = &inp[s * fan_in..(s + 1) * fan_in];
            let o = &mut out[s * fan_out..(s + 1) * fan_out];
            for (j, oj) in o.iter_mut().enumerate() {
                let wj = &w[j * fan_in..(j + 1) * fan_in];
                let mut acc = b[j];
                for (wv, xv) in wj.iter().zip(xi) {
                    acc += wv * xv;
                }
                *oj = acc;
            }
        }
        if l + 1 < n_layers {
            for v in out.iter_mut() {
                *v = act.apply(*v);
            }
        }
    }

    // softmax in place, accumulating cross-entropy from the logits
    let c = layout.dims[n_layers];
    let out = &mut ws.acts[n_layers];
    let mut loss = 0.0;
    for s in 0..batch {
        let z = &mut out[s * c..(s + 1) * c];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted_y = labels.map(|l| z[l[rows[s]]] - m);
        let mut sum = 0.0;
        for v in z.iter_mut() {
            *v = libm::exp(*v - m);
            sum += *v;
        }
        if let Some(zy) = shifted_y {
            // -log softmax_y = log(sum) - (z_y - m)
            loss += libm::log(sum) - zy;
        }
        for v in z.iter_mut() {
            *v /= sum;
        }
    }
    loss
}

/// Mean cross-entropy (plus `0.5 * l2 * |W|^2`) over the selected rows and
/// its gradient, written into `grad`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn loss_and_grad(
    layout: &Layout,
    params: &[f64],
    act: Activation,
    l2: f64,
    x: &Matrix,
    labels: &[usize],
    rows: &[usize],
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    let batch = rows.len();
    let inv = 1.0 / batch as f64;
    let n_layers = layout.n_layers();
    let total = forward(layout, params, act, x, Some(labels), rows, ws);
    grad.iter_mut().for_each(|g| *g = 0.0);

    let c = layout.dims[n_layers];
    ws.delta.clear();
    ws.delta.extend_from_slice(&ws.acts[n_layers]);
    for s in 0..batch {
        ws.delta[s * c + labels[rows[s]]] -= 1.0;
    }
    ws.delta.iter_mut().for_each(|v| *v *= inv);

    for l in (0..n_layers).rev() {
        let fan_in = layout.dims[l];
        let fan_out = layout.dims[l + 1];
        let w_off = layout.weights[l];
        let b_off = layout.biases[l];
        let inp = &ws.acts[l];
        for s in 0..batch {
            let dl = &ws.delta[s * fan_out..(s + 1) * fan_out];
            let xi = &inp[s * fan_in..(s + 1) * fan_in];
            for (j, &dj) in dl.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let gw = &mut grad[w_off + j * fan_in..w_off + (j + 1) * fan_in];
                for (g, xv) in gw.iter_mut().zip(xi) {
                    *g += dj * xv;
                }
                grad[b_off + j] += dj;
            }
        }
        if l > 0 {
            let w = &params[w_off..w_off + fan_in * fan_out];
            ws.delta_prev.clear();
            ws.delta_prev.resize(batch * fan_in, 0.0);
            for s in 0..batch {
                let dl = &ws.delta[s * fan_out..(s + 1) * fan_out];
                let dp = &mut ws.delta_prev[s * fan_in..(s + 1) * fan_in];
                for (j, &dj) in dl.iter().enumerate() {
                    let wj = &w[j * fan_in..(j + 1) * fan_in];
                    for (p, wv) in dp.iter_mut().zip(wj) {
                        *p += wv * dj;
                    }
                }
                let a = &inp[s * fan_in..(s + 1) * fan_in];
                for (p, &av) in dp.iter_mut().zip(a) {
                    *p *= act.derivative_from_output(av);
                }
            }
            core::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }

    let mut penalty = 0.0;
    if l2 > 0.0 {
        for (i, is_w) in layout.weight_mask().into_iter().enumerate() {
            if is_w {
                penalty += params[i] * params[i];
                grad[i] += l2 * params[i];
            }
        }
    }
    total * inv + 0.5 * l2 * penalty
}

/// Softmax probabilities for every row of `x`.
pub fn predict_proba(params: &ParamVector, act: Activation, x: &Matrix) -> Matrix {
    let layout = Layout::new(params.dims());
    let rows: Vec<usize> = (0..x.rows()).collect();
    let mut ws = Workspace::default();
    forward(&layout, params.values(), act, x, None, &rows, &mut ws);
    let c = *params.dims().last().unwrap_or(&0);
    let probs = ws.acts.pop().unwrap_or_default();
    Matrix::from_vec(x.rows(), c, probs).expect("forward pass yields rows x labels")
}

/// Mean cross-entropy of the model on `(x, labels)`, including the L2 term.
pub fn cross_entropy(params: &ParamVector, act: Activation, l2: f64, x: &Matrix, labels: &[usize]) -> f64 {
    let layout = Layout::new(params.dims());
    let rows: Vec<usize> = (0..x.rows()).collect();
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; params.values().len()];
    loss_and_grad(&layout, params.values(), act, l2, x, labels, &rows, &mut ws, &mut grad)
}

/// Analytic gradient of [`cross_entropy`] with respect to every parameter.
pub fn gradient(params: &ParamVector, act: Activation, l2: f64, x: &Matrix, labels: &[usize]) -> Vec<f64> {
    let layout = Layout::new(params.dims());
    let rows: Vec<usize> = (0..x.rows()).collect();
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; params.values().len()];
    loss_and_grad(&layout, params.values(), act, l2, x, labels, &rows, &mut ws, &mut grad);
    grad
}

/// Mean cross-entropy without regularization; used as the validation signal.
pub(crate) fn mean_loss(
    layout: &Layout,
    params: &[f64],
    act: Activation,
    x: &Matrix,
    labels: &[usize],
    rows: &[usize],
    ws: &mut Workspace,
) -> f64 {
    forward(layout, params, act, x, Some(labels), rows, ws) / rows.len() as f64
}

//! Minimal feedforward feature networks: Swish MLPs with inverted dropout,
//! exact backpropagation through a recorded tape, and an AdamW optimizer.
//!
//! The scope is deliberately narrow - fixed feedforward topology, identity
//! output layer - because these nets only serve as the feature maps of the
//! factorized density-ratio model. No generic autodiff.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Swish activation `x * sigmoid(x)`.
#[inline]
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of Swish: `sigma(x) * (1 + x * (1 - sigma(x)))`.
#[inline]
pub fn swish_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Forward-pass mode. Dropout masks are only drawn in `Train` mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Layer {
    /// Weights, shape (fan_in, fan_out); inputs are multiplied on the left.
    w: Array2<f64>,
    b: Array1<f64>,
}

/// A feedforward feature map with Swish hidden activations and an identity
/// output layer.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    widths: Vec<usize>,
    layers: Vec<Layer>,
    dropout: f64,
    /// Bumped on every parameter update; tapes record the version they were
    /// produced under so stale tapes are rejected.
    version: u64,
}

/// Activation record produced by [`FeatureNet::forward`] and consumed by
/// [`FeatureNet::backward`].
pub struct Tape {
    version: u64,
    inputs: Vec<Array2<f64>>,
    preacts: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

/// Per-layer parameter gradients, shaped like the network parameters.
#[derive(Debug, Clone)]
pub struct Grads {
    pub(crate) w: Vec<Array2<f64>>,
    pub(crate) b: Vec<Array1<f64>>,
}

impl Grads {
    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|g| g.iter().all(|v| v.is_finite()))
            && self.b.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Accumulate `other`, which must have identical shapes.
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
    }
}

impl FeatureNet {
    /// Build a net with the given width list `[input, hidden..., output]`
    /// and dropout rate in `[0, 1)` applied after hidden activations.
    ///
    /// Weights are initialized uniformly with scale `1/sqrt(fan_in)`, biases
    /// at zero.
    pub fn new(widths: &[usize], dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidInput(format!(
                "width list must have >= 2 positive entries, got {widths:?}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidInput(format!(
                "dropout rate must be in [0, 1), got {dropout}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-scale..scale));
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Ok(FeatureNet {
            widths: widths.to_vec(),
            layers,
            dropout,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    /// Forward pass on a batch (rows are samples). In train mode, inverted
    /// dropout masks are drawn from `rng`, so eval mode needs no rescaling
    /// and is fully deterministic.
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<f64>, Tape)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input dim {} does not match net input {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut preacts = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers);
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            inputs.push(a.clone());
            let mut z = a.dot(&layer.w);
            for mut row in z.rows_mut() {
                row += &layer.b;
            }
            let is_output = l + 1 == n_layers;
            if is_output {
                preacts.push(Array2::zeros((0, 0)));
                masks.push(None);
                a = z;
            } else {
                preacts.push(z.clone());
                let mut h = z;
                h.mapv_inplace(swish);
                if mode == Mode::Train && self.dropout > 0.0 {
                    let keep = 1.0 - self.dropout;
                    let mask = Array2::from_shape_fn(h.dim(), |_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    h *= &mask;
                    masks.push(Some(mask));
                } else {
                    masks.push(None);
                }
                a = h;
            }
        }
        Ok((
            a,
            Tape {
                version: self.version,
                inputs,
                preacts,
                masks,
            },
        ))
    }

    /// Deterministic eval-mode forward pass without dropout bookkeeping.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut rng = crate::rng::stream(0, 0);
        Ok(self.forward(x, Mode::Eval, &mut rng)?.0)
    }

    /// Exact gradients of the scalar loss whose output gradients are
    /// `grad_out`, for the forward pass recorded in `tape`.
    pub fn backward(&self, tape: &Tape, grad_out: ArrayView2<f64>) -> Result<Grads> {
        if tape.version != self.version {
            return Err(Error::InvalidInput(
                "stale tape: parameters changed since forward pass".into(),
            ));
        }
        let n_layers = self.layers.len();
        if tape.inputs.len() != n_layers {
            return Err(Error::InvalidInput("tape does not match net".into()));
        }
        if grad_out.dim() != (tape.inputs[0].nrows(), self.output_dim()) {
            return Err(Error::InvalidInput(format!(
                "output gradient shape {:?} does not match batch ({}, {})",
                grad_out.dim(),
                tape.inputs[0].nrows(),
                self.output_dim()
            )));
        }
        let mut gw = Vec::with_capacity(n_layers);
        let mut gb = Vec::with_capacity(n_layers);
        let mut delta = grad_out.to_owned();
        for l in (0..n_layers).rev() {
            let is_output = l + 1 == n_layers;
            if !is_output {
                if let Some(mask) = &tape.masks[l] {
                    delta *= mask;
                }
                delta *= &tape.preacts[l].mapv(swish_prime);
            }
            gw.push(tape.inputs[l].t().dot(&delta));
            gb.push(delta.sum_axis(ndarray::Axis(0)));
            if l > 0 {
                delta = delta.dot(&self.layers[l].w.t());
            }
        }
        gw.reverse();
        gb.reverse();
        Ok(Grads { w: gw, b: gb })
    }

    /// Zero-shaped gradient accumulator for this net.
    pub fn zero_grads(&self) -> Grads {
        Grads {
            w: self
                .layers
                .iter()
                .map(|l| Array2::zeros(l.w.dim()))
                .collect(),
            b: self
                .layers
                .iter()
                .map(|l| Array1::zeros(l.b.len()))
                .collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat parameter read access (weights row-major, then bias, per layer).
    /// Used by finite-difference checks and tests.
    pub fn get_param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.w.len() {
                return l.w.as_slice().unwrap()[idx];
            }
            idx -= l.w.len();
            if idx < l.b.len() {
                return l.b[idx];
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter write access; bumps the net version.
    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        self.version += 1;
        for l in &mut self.layers {
            if idx < l.w.len() {
                l.w.as_slice_mut().unwrap()[idx] = value;
                return;
            }
            idx -= l.w.len();
            if idx < l.b.len() {
                l.b[idx] = value;
                return;
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat gradient read access mirroring [`FeatureNet::get_param`].
    pub fn get_grad(grads: &Grads, mut idx: usize) -> f64 {
        for (gw, gb) in grads.w.iter().zip(&grads.b) {
            if idx < gw.len() {
                return gw.as_slice().unwrap()[idx];
            }
            idx -= gw.len();
            if idx < gb.len() {
                return gb[idx];
            }
            idx -= gb.len();
        }
        panic!("gradient index out of range");
    }

    /// All parameters finite?
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }

    #[cfg(test)]
    fn zero_all(&mut self) {
        self.version += 1;
        for l in &mut self.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
    }
}

/// AdamW optimizer state: decoupled weight decay, bias-corrected moments.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    /// Fresh state for `net` with the given learning rate and weight decay;
    /// moment constants default to beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(net: &FeatureNet, lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            m_w: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.w.dim()))
                .collect(),
            v_w: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.w.dim()))
                .collect(),
            m_b: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.b.len()))
                .collect(),
            v_b: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.b.len()))
                .collect(),
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. Non-finite gradients abort the step with
/// [`Error::NumericalFailure`], leaving net and state untouched.
pub fn adamw_step(net: &mut FeatureNet, grads: &Grads, state: &mut OptimizerState) -> Result<()> {
    if grads.w.len() != net.layers.len() {
        return Err(Error::InvalidInput("gradient/net layer mismatch".into()));
    }
    for (l, layer) in net.layers.iter().enumerate() {
        if grads.w[l].dim() != layer.w.dim() || grads.b[l].len() != layer.b.len() {
            return Err(Error::InvalidInput(format!(
                "gradient shape mismatch at layer {l}"
            )));
        }
    }
    if !grads.is_finite() {
        return Err(Error::NumericalFailure(
            "non-finite gradients; step aborted".into(),
        ));
    }
    state.step += 1;
    net.version += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2) = (state.beta1, state.beta2);
    let (lr, wd, eps) = (state.lr, state.weight_decay, state.eps);
    for l in 0..net.layers.len() {
        ndarray::Zip::from(&mut net.layers[l].w)
            .and(&mut state.m_w[l])
            .and(&mut state.v_w[l])
            .and(&grads.w[l])
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            });
        // No weight decay on biases.
        ndarray::Zip::from(&mut net.layers[l].b)
            .and(&mut state.m_b[l])
            .and(&mut state.v_b[l])
            .and(&grads.b[l])
            .for_each(|b, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *b -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// Self-describing serialization document for a [`FeatureNet`]: width list,
/// activation name, dropout rate, and row-major parameter arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetDoc {
    pub widths: Vec<usize>,
    pub activation: String,
    pub dropout: f64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl FeatureNet {
    pub fn to_doc(&self) -> NetDoc {
        NetDoc {
            widths: self.widths.clone(),
            activation: "swish".into(),
            dropout: self.dropout,
            weights: self
                .layers
                .iter()
                .map(|l| l.w.as_slice().unwrap().to_vec())
                .collect(),
            biases: self.layers.iter().map(|l| l.b.to_vec()).collect(),
        }
    }

    pub fn from_doc(doc: &NetDoc) -> Result<Self> {
        if doc.activation != "swish" {
            return Err(Error::Unsupported(format!(
                "unknown activation '{}'",
                doc.activation
            )));
        }
        if doc.weights.len() + 1 != doc.widths.len() {
            return Err(Error::InvalidInput("layer count mismatch in doc".into()));
        }
        let mut layers = Vec::new();
        for l in 0..doc.weights.len() {
            let (fan_in, fan_out) = (doc.widths[l], doc.widths[l + 1]);
            if doc.weights[l].len() != fan_in * fan_out || doc.biases[l].len() != fan_out {
                return Err(Error::InvalidInput(format!(
                    "parameter shape mismatch at layer {l}"
                )));
            }
            layers.push(Layer {
                w: Array2::from_shape_vec((fan_in, fan_out), doc.weights[l].clone())
                    .map_err(|e| Error::InvalidInput(e.to_string()))?,
                b: Array1::from_vec(doc.biases[l].clone()),
            });
        }
        Ok(FeatureNet {
            widths: doc.widths.clone(),
            layers,
            dropout: doc.dropout,
            version: 0,
        })
    }
}

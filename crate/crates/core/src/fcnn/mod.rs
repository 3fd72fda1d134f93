//! Fully connected correction network.
//!
//! ReLU hidden layers, identity output, mean-squared-error loss. Inputs and
//! targets are standardized with training-set statistics held in the model,
//! so [`FcnnModel::forward`] maps raw features to a raw correction.

mod file;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, StreamPurpose};

pub use file::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_FORMAT, MODEL_VERSION};
pub use train::{evaluate_mse, train, EpochLoss, TrainingOutcome, TrainingPair};

/// Identifier of the feature layout produced by [`build_input_vector`].
pub const INPUT_LAYOUT: &str = "analysis-members,obs-mean,prev-analysis-mean/v1";

/// Architecture and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcnnConfig {
    /// `[input, hidden..., output]`.
    pub layer_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl FcnnConfig {
    /// Adam defaults with the given architecture.
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Self {
        Self {
            layer_sizes,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 500,
            patience: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config(
                "network.layer_sizes",
                "at least input and output layers required",
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("network.layer_sizes", "layer sizes must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("network.learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("network.beta1/beta2", "must lie in [0, 1)"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("network.epsilon", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("network.batch_size", "must be >= 1"));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Affine layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    fn he_uniform(inputs: usize, outputs: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.uniform_in(-limit, limit)).collect();
        Self {
            inputs,
            outputs,
            weights,
            biases: vec![0.0; outputs],
        }
    }

    #[inline]
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *y = self.biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Per-feature standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features whose training variance was zero; their `std` is stored as 1.
    pub zero_variance: Vec<bool>,
}

impl Normalization {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
            zero_variance: vec![false; n],
        }
    }

    /// Population mean and standard deviation of each column of `rows`.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, n: usize) -> Self {
        let count = rows.clone().count().max(1) as f64;
        let mut mean = vec![0.0; n];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut std = Vec::with_capacity(n);
        let mut zero_variance = Vec::with_capacity(n);
        for (s, m) in var.iter().zip(&mean) {
            let sd = (s / count).sqrt();
            if sd > 1e-12 * m.abs().max(1.0) {
                std.push(sd);
                zero_variance.push(false);
            } else {
                std.push(1.0);
                zero_variance.push(true);
            }
        }
        Self {
            mean,
            std,
            zero_variance,
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Provenance and final losses of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub dataset_sha256: Option<String>,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Normalized-space MSE on the fitting set at the restored weights.
    pub final_train_loss: f64,
    pub final_validation_loss: Option<f64>,
    /// Raw-space MSE on held-out test pairs, when evaluated.
    pub test_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcnnModel {
    pub config: FcnnConfig,
    pub layers: Vec<Layer>,
    pub input_norm: Normalization,
    pub output_norm: Normalization,
    pub training: Option<TrainingMeta>,
}

/// Per-layer weight and bias gradients, shaped like the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &FcnnModel) -> Self {
        Self {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .for_each(|g| g.fill(0.0));
    }

    fn scale(&mut self, c: f64) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flat_map(|g| g.iter_mut())
            .for_each(|v| *v *= c);
    }
}

/// Reusable activation buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Workspace {
    /// `acts[0]` is the normalized input; `acts[k + 1]` the output of layer `k`.
    acts: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Workspace {
    pub(crate) fn new(model: &FcnnModel) -> Self {
        let acts: Vec<Vec<f64>> = model.config.layer_sizes.iter().map(|&n| vec![0.0; n]).collect();
        Self {
            delta: acts.clone(),
            acts,
        }
    }
}

impl FcnnModel {
    /// He-uniform initialization with identity normalization.
    pub fn initialize(config: FcnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::for_purpose(config.seed, StreamPurpose::NetworkInit, 0, 0);
        let layers = config
            .layer_sizes
            .windows(2)
            .map(|w| Layer::he_uniform(w[0], w[1], &mut rng))
            .collect();
        Ok(Self {
            input_norm: Normalization::identity(config.input_size()),
            output_norm: Normalization::identity(config.output_size()),
            layers,
            config,
            training: None,
        })
    }

    /// All weights and biases zero, identity normalization: predicts `Δs ≡ 0`.
    pub fn zeros(config: FcnnConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_sizes
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            input_norm: Normalization::identity(config.input_size()),
            output_norm: Normalization::identity(config.output_size()),
            layers,
            config,
            training: None,
        })
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size()
    }

    pub fn output_size(&self) -> usize {
        self.config.output_size()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Raw input to raw output.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_size() {
            return Err(Error::contract(format!(
                "network expects {} inputs, got {}",
                self.input_size(),
                input.len()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite network input"));
        }
        let mut ws = Workspace::new(self);
        ws.acts[0] = self.input_norm.apply(input);
        self.forward_normalized(&mut ws);
        Ok(self.output_norm.invert(ws.acts.last().unwrap()))
    }

    /// Runs the layer chain on `ws.acts[0]`, filling the remaining activations.
    pub(crate) fn forward_normalized(&self, ws: &mut Workspace) {
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let (head, tail) = ws.acts.split_at_mut(k + 1);
            let out = &mut tail[0];
            layer.apply(&head[k], out);
            if k < last {
                relu_in_place(out);
            }
        }
    }

    /// Accumulates `∂loss/∂θ` for one normalized sample into `grads` and
    /// returns the sample loss.
    pub(crate) fn accumulate_gradient(&self, ws: &mut Workspace, target: &[f64], grads: &mut Gradients) -> f64 {
        self.forward_normalized(ws);
        let nl = self.layers.len();
        let out = &ws.acts[nl];
        let d = out.len() as f64;
        let mut loss = 0.0;
        for (i, (y, t)) in out.iter().zip(target).enumerate() {
            let e = y - t;
            loss += e * e;
            ws.delta[nl][i] = 2.0 * e / d;
        }
        for k in (0..nl).rev() {
            let layer = &self.layers[k];
            let (acts_in, delta_out) = (&ws.acts[k], &ws.delta[k + 1]);
            let gw = &mut grads.weights[k];
            let gb = &mut grads.biases[k];
            for (o, &g) in delta_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, a) in row.iter_mut().zip(acts_in) {
                    *w += g * a;
                }
            }
            if k > 0 {
                let (lo, hi) = ws.delta.split_at_mut(k + 1);
                let delta_in = &mut lo[k];
                let delta_out = &hi[0];
                delta_in.fill(0.0);
                for (o, &g) in delta_out.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (di, w) in delta_in.iter_mut().zip(row) {
                        *di += g * w;
                    }
                }
                // ReLU: the hidden output is positive exactly where the pre-activation was.
                for (di, a) in delta_in.iter_mut().zip(&ws.acts[k]) {
                    if *a <= 0.0 {
                        *di = 0.0;
                    }
                }
            }
        }
        loss / d
    }
}

#[inline]
fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// `max(0, x)` component-wise.
pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// `(1/d) Σ (pred_i - target_i)²`.
pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::contract(format!(
            "loss_mse: lengths {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Exact gradients of the normalized-space MSE for one `(input, target)` pair.
///
/// Returns `(loss, gradients)`; both raw input and raw target are first
/// standardized with the model's statistics.
pub fn backward(model: &FcnnModel, input: &[f64], target: &[f64]) -> Result<(f64, Gradients)> {
    if input.len() != model.input_size() || target.len() != model.output_size() {
        return Err(Error::contract("backward: input or target has the wrong length"));
    }
    let mut ws = Workspace::new(model);
    ws.acts[0] = model.input_norm.apply(input);
    let t = model.output_norm.apply(target);
    let mut grads = Gradients::zeros_like(model);
    let loss = model.accumulate_gradient(&mut ws, &t, &mut grads);
    Ok((loss, grads))
}

/// Input length for ensemble size `n`, observation dimension `m`, state dimension `d`.
pub fn input_size(n: usize, m: usize, d: usize) -> usize {
    n * d + m + d
}

/// Concatenates the analysis members (member 1 first, each member's `d`
/// components contiguous), the measurement mean, and the previous analysis mean.
pub fn build_input_vector(members: &[Vec<f64>], obs_mean: &[f64], prev_mean: &[f64]) -> Result<Vec<f64>> {
    let d = prev_mean.len();
    if members.iter().any(|m| m.len() != d) {
        return Err(Error::contract(format!(
            "every member must have the state dimension {d}"
        )));
    }
    let mut out = Vec::with_capacity(input_size(members.len(), obs_mean.len(), d));
    for m in members {
        out.extend_from_slice(m);
    }
    out.extend_from_slice(obs_mean);
    out.extend_from_slice(prev_mean);
    Ok(out)
}

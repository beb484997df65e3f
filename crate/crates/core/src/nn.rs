//! Two-hidden-layer sigmoid network mapping an RFM summary to `(lambda, mu)`.
//!
//! Inputs are `(T, t_x, x, covariates...)`, z-scored by a [`FeatureScaler`].
//! Hidden layers use sigmoid activations with inverted dropout in training
//! mode. The two output pre-activations are clamped to `[-30, 30]` and
//! exponentiated, so predictions are always strictly positive.
//!
//! Losses and their gradients are hand-derived; backpropagation chains
//! [`model::grad_log_likelihood`] through the exponential output map.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CalibrationSummary;
use crate::error::{Error, Result};
use crate::model::{self, IndividualParams};

/// Pre-activation clamp applied before the exponential output map.
pub const OUTPUT_CLAMP: f64 = 30.0;
/// Upper bound on the log-likelihood difference inside the ratio loss.
pub const RATIO_EXP_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub dropout_p: f64,
}

impl NetworkSpec {
    /// Two hidden layers of 20 sigmoid units, 20% dropout.
    pub fn with_inputs(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_layers: 2,
            hidden_width: 20,
            dropout_p: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout probability {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        dims.push((fan_in, 2));
        dims
    }
}

/// Dense layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let z: f64 = row.iter().zip(input).map(|(w, a)| w * a).sum();
            out.push(z + self.bias[o]);
        }
    }
}

/// Layer stack; the same shape doubles as a gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    pub layers: Vec<Layer>,
}

impl NetworkWeights {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            layers: spec.layer_dims().into_iter().map(|(i, o)| Layer::zeros(i, o)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.inputs).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    fn scale(&mut self, c: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= c);
        }
    }

    fn is_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> Result<NetworkWeights> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = NetworkWeights::zeros(spec);
    for layer in &mut w.layers {
        let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
        for v in &mut layer.weights {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Input to each layer (post-dropout activations for hidden layers).
    inputs: Vec<Vec<f64>>,
    /// Sigmoid outputs of each hidden layer, before dropout.
    hidden: Vec<Vec<f64>>,
    /// Dropout multipliers (0 or `1/(1-p)`) per hidden layer; empty in
    /// infer mode.
    masks: Vec<Vec<f64>>,
    /// Output pre-activations before clamping.
    logits: [f64; 2],
}

impl ForwardTrace {
    /// Input to each layer: the features, then each hidden layer's
    /// activations after dropout.
    pub fn layer_inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn prediction(&self) -> IndividualParams {
        IndividualParams {
            lambda: self.logits[0].clamp(-OUTPUT_CLAMP, OUTPUT_CLAMP).exp(),
            mu: self.logits[1].clamp(-OUTPUT_CLAMP, OUTPUT_CLAMP).exp(),
        }
    }
}

/// Forward pass returning the trace needed by [`backward`].
pub fn forward_trace<R: Rng + ?Sized>(
    features: &[f64],
    w: &NetworkWeights,
    dropout_p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardTrace> {
    if features.len() != w.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: w.input_dim(),
            actual: features.len(),
        });
    }
    let n_hidden = w.layers.len() - 1;
    let mut trace = ForwardTrace {
        inputs: Vec::with_capacity(w.layers.len()),
        hidden: Vec::with_capacity(n_hidden),
        masks: Vec::with_capacity(n_hidden),
        logits: [0.0; 2],
    };
    let keep_scale = 1.0 / (1.0 - dropout_p);
    let mut current = features.to_vec();
    let mut z = Vec::new();
    for layer in &w.layers[..n_hidden] {
        layer.affine(&current, &mut z);
        let h: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let next = if mode == Mode::Train && dropout_p > 0.0 {
            let mask: Vec<f64> = (0..h.len())
                .map(|_| if rng.random::<f64>() < dropout_p { 0.0 } else { keep_scale })
                .collect();
            let out = h.iter().zip(&mask).map(|(a, m)| a * m).collect();
            trace.masks.push(mask);
            out
        } else {
            h.clone()
        };
        trace.inputs.push(std::mem::replace(&mut current, next));
        trace.hidden.push(h);
    }
    let out_layer = &w.layers[n_hidden];
    out_layer.affine(&current, &mut z);
    trace.inputs.push(current);
    trace.logits = [z[0], z[1]];
    Ok(trace)
}

/// Predicted `(lambda, mu)` for one feature vector.
pub fn forward<R: Rng + ?Sized>(
    features: &[f64],
    w: &NetworkWeights,
    dropout_p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<IndividualParams> {
    Ok(forward_trace(features, w, dropout_p, mode, rng)?.prediction())
}

/// Accumulates `d loss / d weights` for one sample into `grad`, given the
/// loss derivative with respect to the predicted `(lambda, mu)`.
pub fn backward(trace: &ForwardTrace, w: &NetworkWeights, d_pred: (f64, f64), grad: &mut NetworkWeights) {
    let pred = trace.prediction();
    let through = |logit: f64, value: f64, d: f64| {
        if logit.abs() > OUTPUT_CLAMP {
            0.0
        } else {
            d * value
        }
    };
    let mut delta = vec![
        through(trace.logits[0], pred.lambda, d_pred.0),
        through(trace.logits[1], pred.mu, d_pred.1),
    ];
    for li in (0..w.layers.len()).rev() {
        let layer = &w.layers[li];
        let input = &trace.inputs[li];
        let g = &mut grad.layers[li];
        for o in 0..layer.outputs {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            g.bias[o] += d;
            let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
            for (gw, a) in row.iter_mut().zip(input) {
                *gw += d * a;
            }
        }
        if li == 0 {
            break;
        }
        // d loss / d hidden pre-activation of the layer below
        let below = li - 1;
        let h = &trace.hidden[below];
        let mask = trace.masks.get(below);
        let mut next = vec![0.0; layer.inputs];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
            for (n, wv) in next.iter_mut().zip(row) {
                *n += d * wv;
            }
        }
        for (j, n) in next.iter_mut().enumerate() {
            let m = mask.map(|m| m[j]).unwrap_or(1.0);
            *n *= m * h[j] * (1.0 - h[j]);
        }
        delta = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
    Nll,
    NllMse,
    NllMae,
    Ratio,
    RatioMse,
    RatioMae,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Mse,
        LossKind::Mae,
        LossKind::Nll,
        LossKind::NllMse,
        LossKind::NllMae,
        LossKind::Ratio,
        LossKind::RatioMse,
        LossKind::RatioMae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Nll => "nll",
            LossKind::NllMse => "nll_mse",
            LossKind::NllMae => "nll_mae",
            LossKind::Ratio => "ratio",
            LossKind::RatioMse => "ratio_mse",
            LossKind::RatioMae => "ratio_mae",
        }
    }

    /// Whether the loss embeds the likelihood (everything except MSE/MAE).
    pub fn uses_likelihood(self) -> bool {
        !matches!(self, LossKind::Mse | LossKind::Mae)
    }

    fn parts(self) -> (LikelihoodTerm, Penalty) {
        use LikelihoodTerm as L;
        use Penalty as P;
        match self {
            LossKind::Mse => (L::None, P::Squared),
            LossKind::Mae => (L::None, P::Absolute),
            LossKind::Nll => (L::Nll, P::None),
            LossKind::NllMse => (L::Nll, P::Squared),
            LossKind::NllMae => (L::Nll, P::Absolute),
            LossKind::Ratio => (L::Ratio, P::None),
            LossKind::RatioMse => (L::Ratio, P::Squared),
            LossKind::RatioMae => (L::Ratio, P::Absolute),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '+', ' '], "_");
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::invalid(format!("unknown loss kind `{s}`")))
    }
}

/// How the likelihood-ratio family is turned into something to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// `-exp(min(logL(pred) - logL(label), 30))`. Customers whose predicted
    /// likelihood is far below the label's get exponentially small weight,
    /// so training can lock onto non-buyers and predict everyone dead.
    WeightedNll,
    /// `|logL(pred) - logL(label)|`.
    #[default]
    AbsLogRatio,
}

impl FromStr for RatioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "weighted_nll" => Ok(RatioMode::WeightedNll),
            "abs_log_ratio" => Ok(RatioMode::AbsLogRatio),
            other => Err(Error::invalid(format!("unknown ratio mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum LikelihoodTerm {
    None,
    Nll,
    Ratio,
}

#[derive(Debug, Clone, Copy)]
enum Penalty {
    None,
    Squared,
    Absolute,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss of a single datapoint and its derivative with respect to the
/// predicted `(lambda, mu)`.
pub fn point_loss(
    s: &CalibrationSummary,
    label: &IndividualParams,
    pred: &IndividualParams,
    kind: LossKind,
    ratio: RatioMode,
) -> Result<(f64, (f64, f64))> {
    label.validate()?;
    pred.validate()?;
    let (lik, pen) = kind.parts();
    let mut value = 0.0;
    let mut grad = (0.0, 0.0);
    match lik {
        LikelihoodTerm::None => {}
        LikelihoodTerm::Nll => {
            let ll = model::log_likelihood(s, pred)?;
            let g = model::grad_log_likelihood_unchecked(s, pred);
            value -= ll;
            grad = (-g.0, -g.1);
        }
        LikelihoodTerm::Ratio => {
            let ll_hat = model::log_likelihood(s, pred)?;
            let ll_ref = model::log_likelihood_unchecked(s, label);
            let diff = ll_hat - ll_ref;
            let g = model::grad_log_likelihood_unchecked(s, pred);
            match ratio {
                RatioMode::WeightedNll => {
                    if diff < RATIO_EXP_CLAMP {
                        let r = diff.exp();
                        value -= r;
                        grad = (-r * g.0, -r * g.1);
                    } else {
                        value -= RATIO_EXP_CLAMP.exp();
                    }
                }
                RatioMode::AbsLogRatio => {
                    let sg = sign(diff);
                    value += diff.abs();
                    grad = (sg * g.0, sg * g.1);
                }
            }
        }
    }
    let dl = pred.lambda - label.lambda;
    let dm = pred.mu - label.mu;
    match pen {
        Penalty::None => {}
        Penalty::Squared => {
            value += dl * dl + dm * dm;
            grad.0 += 2.0 * dl;
            grad.1 += 2.0 * dm;
        }
        Penalty::Absolute => {
            value += dl.abs() + dm.abs();
            grad.0 += sign(dl);
            grad.1 += sign(dm);
        }
    }
    Ok((value, grad))
}

/// Mean per-datapoint loss over `(summary, label, prediction)` triples.
pub fn loss(
    batch: &[(&CalibrationSummary, IndividualParams, IndividualParams)],
    kind: LossKind,
    ratio: RatioMode,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (s, label, pred) in batch {
        total += point_loss(s, label, pred, kind, ratio)?.0;
    }
    Ok(total / batch.len() as f64)
}

/// One training example: standardized features, the summary the likelihood
/// is evaluated on, and the label.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a [f64],
    pub summary: &'a CalibrationSummary,
    pub label: IndividualParams,
}

/// Mean loss over `batch` and its exact gradient with respect to every
/// weight. In train mode the dropout masks come from `rng`, and the gradient
/// is taken with those same masks.
pub fn loss_gradient<R: Rng + ?Sized>(
    batch: &[Sample<'_>],
    w: &NetworkWeights,
    spec: &NetworkSpec,
    kind: LossKind,
    ratio: RatioMode,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, NetworkWeights)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grad = NetworkWeights::zeros(spec);
    let mut total = 0.0;
    for sample in batch {
        let trace = forward_trace(sample.features, w, spec.dropout_p, mode, rng)?;
        let pred = trace.prediction();
        let (value, d_pred) = point_loss(sample.summary, &sample.label, &pred, kind, ratio)?;
        total += value;
        backward(&trace, w, d_pred, &mut grad);
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((total / n, grad))
}

/// Network inputs in order `(T, t_x, x, covariates...)`.
pub fn raw_features(s: &CalibrationSummary) -> Vec<f64> {
    let mut f = Vec::with_capacity(3 + s.covariates.len());
    f.push(s.t_cal);
    f.push(s.t_x);
    f.push(s.x as f64);
    f.extend_from_slice(&s.covariates);
    f
}

/// Per-feature z-scoring fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::invalid("cannot fit scaler on zero rows"));
        };
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        let degenerate = |(s, m): (&f64, &f64)| !(*s > 1e-12 * m.abs().max(1.0));
        if let Some(j) = std.iter().zip(&mean).position(degenerate) {
            return Err(Error::ConstantFeature(j));
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub ratio_mode: RatioMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            early_stop_patience: 10,
            validation_fraction: 0.1,
            ratio_mode: RatioMode::AbsLogRatio,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction outside [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam with bias correction.
struct Adam {
    m: NetworkWeights,
    v: NetworkWeights,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(spec: &NetworkSpec, cfg: &TrainingConfig) -> Self {
        Self {
            m: NetworkWeights::zeros(spec),
            v: NetworkWeights::zeros(spec),
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    fn update(&mut self, w: &mut NetworkWeights, grad: &NetworkWeights) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((ws, gs), ms), vs) in w
            .slices_mut()
            .zip(grad.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..ws.len() {
                let g = gs[i];
                ms[i] = b1 * ms[i] + (1.0 - b1) * g;
                vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
                ws[i] -= lr * (ms[i] / c1) / ((vs[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (best validation loss), if early
    /// stopping was active.
    pub best_epoch: Option<usize>,
}

impl TrainingHistory {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Everything needed to predict: architecture, weights and input scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    pub weights: NetworkWeights,
    pub scaler: FeatureScaler,
    pub loss: LossKind,
}

const MODEL_FORMAT: &str = "nbdnet-mlp";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: TrainedModel,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        file.model.spec.validate()?;
        if file.model.weights.layers.len() != file.model.spec.hidden_layers + 1
            || file.model.weights.input_dim() != file.model.spec.input_dim
            || file.model.scaler.mean.len() != file.model.spec.input_dim
        {
            return Err(Error::invalid("model file shapes do not match its spec"));
        }
        Ok(file.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn mean_loss_infer(samples: &[Sample<'_>], w: &NetworkWeights, spec: &NetworkSpec, kind: LossKind, ratio: RatioMode) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for s in samples {
        let pred = forward(s.features, w, spec.dropout_p, Mode::Infer, &mut rng)?;
        total += point_loss(s.summary, &s.label, &pred, kind, ratio)?.0;
    }
    Ok(total / samples.len() as f64)
}

/// Fits the network with Adam on shuffled mini-batches.
///
/// A seeded `validation_fraction` slice is held back for early stopping;
/// when it triggers, the weights from the best validation epoch are kept.
pub fn train(
    summaries: &[CalibrationSummary],
    labels: &[IndividualParams],
    spec: &NetworkSpec,
    cfg: &TrainingConfig,
    kind: LossKind,
) -> Result<(TrainedModel, TrainingHistory)> {
    spec.validate()?;
    cfg.validate()?;
    if summaries.len() != labels.len() {
        return Err(Error::LengthMismatch(summaries.len(), labels.len()));
    }
    if summaries.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "{} training rows is fewer than batch size {}",
            summaries.len(),
            cfg.batch_size
        )));
    }
    for l in labels {
        l.validate()?;
    }
    let raw: Vec<Vec<f64>> = summaries.iter().map(raw_features).collect();
    if raw[0].len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            actual: raw[0].len(),
        });
    }
    let scaler = FeatureScaler::fit(&raw)?;
    let features: Vec<Vec<f64>> = raw.iter().map(|r| scaler.transform(r)).collect::<Result<_>>()?;
    let samples: Vec<Sample<'_>> = features
        .iter()
        .zip(summaries)
        .zip(labels)
        .map(|((f, s), l)| Sample {
            features: f,
            summary: s,
            label: *l,
        })
        .collect();

    let mut weights = init_weights(spec, cfg.seed)?;
    // shuffling and dropout masks use a separate stream from the init
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (cfg.validation_fraction * samples.len() as f64).floor() as usize;
    let n_val = n_val.min(samples.len().saturating_sub(cfg.batch_size));
    let val_idx = order.split_off(samples.len() - n_val);
    let mut train_idx = order;
    let val: Vec<Sample<'_>> = val_idx.iter().map(|&i| samples[i]).collect();

    let mut adam = Adam::new(spec, cfg);
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, usize, NetworkWeights)> = None;
    let mut stale = 0usize;
    let mut batch: Vec<Sample<'_>> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i]));
            let (value, grad) = loss_gradient(&batch, &weights, spec, kind, cfg.ratio_mode, Mode::Train, &mut rng)?;
            adam.update(&mut weights, &grad);
            total += value * chunk.len() as f64;
        }
        if !weights.is_finite() {
            return Err(Error::domain(format!("non-finite weights after epoch {epoch} ({kind} loss)")));
        }
        let train_loss = total / train_idx.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_loss_infer(&val, &weights, spec, kind, cfg.ratio_mode)?)
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if let (Some(v), true) = (val_loss, cfg.early_stop_patience > 0) {
            match &best {
                Some((b, _, _)) if v >= *b => {
                    stale += 1;
                    if stale >= cfg.early_stop_patience {
                        log::debug!("{kind}: early stop at epoch {epoch}");
                        break;
                    }
                }
                _ => {
                    best = Some((v, epoch, weights.clone()));
                    stale = 0;
                }
            }
        }
    }
    if let Some((_, epoch, w)) = best {
        weights = w;
        history.best_epoch = Some(epoch);
    }
    Ok((
        TrainedModel {
            spec: spec.clone(),
            weights,
            scaler,
            loss: kind,
        },
        history,
    ))
}

/// Infer-mode predictions, one per summary, in input order.
pub fn predict_params(summaries: &[CalibrationSummary], model: &TrainedModel) -> Result<Vec<IndividualParams>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    summaries
        .iter()
        .map(|s| {
            let f = model.scaler.transform(&raw_features(s))?;
            forward(&f, &model.weights, model.spec.dropout_p, Mode::Infer, &mut rng)
        })
        .collect()
}

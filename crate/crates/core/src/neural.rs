//! Dense feed-forward networks, the two training losses, backpropagation,
//! mini-batch SGD and finite-difference gradient checking.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MODEL_FORMAT: &str = "facerig-model";
pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        if weights.len() != inputs * outputs {
            return Err(Error::dim("layer weights", inputs * outputs, weights.len()));
        }
        if bias.len() != outputs {
            return Err(Error::dim("layer bias", outputs, bias.len()));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("layer parameters must be finite"));
        }
        Ok(Self {
            inputs,
            outputs,
            activation,
            weights,
            bias,
        })
    }

    /// Scaled uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Self {
            inputs,
            outputs,
            activation,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    /// Writes the pre-activation `W x + b` into `out`.
    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = self.bias[o] + dot(self.row(o), x);
        }
    }
}

/// Dot product with four fixed-order partial sums.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline(always)]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Describes how an adaption network's input vector is laid out:
/// `channels` blendshape weights, then `history` controller frames of
/// `controllers` values each, newest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub channels: usize,
    pub controllers: usize,
    pub history: usize,
}

impl InputLayout {
    pub fn input_dim(&self) -> usize {
        self.channels + self.history * self.controllers
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub name: String,
    #[serde(default)]
    pub character_ids: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_layout: Option<InputLayout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    layers: Vec<DenseLayer>,
    metadata: ModelMetadata,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    metadata: ModelMetadata,
    layers: Vec<DenseLayer>,
}

impl NetworkModel {
    pub fn new(layers: Vec<DenseLayer>, metadata: ModelMetadata) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::invalid("a network needs at least one layer"))?;
        if last.activation != Activation::Identity {
            return Err(Error::invalid("the final layer must use the identity activation"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::dim("layer chain", pair[0].outputs, pair[1].inputs));
            }
        }
        if let Some(layout) = metadata.input_layout {
            if layout.input_dim() != layers[0].inputs {
                return Err(Error::dim("input layout", layers[0].inputs, layout.input_dim()));
            }
        }
        Ok(Self { layers, metadata })
    }

    /// A freshly initialised ReLU network with the given layer widths,
    /// e.g. `[in, 256, 256, out]`.
    pub fn init(widths: &[usize], seed: u64, mut metadata: ModelMetadata) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("need at least input and output widths, all positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::init(widths[i], widths[i + 1], act, &mut rng)
            })
            .collect();
        metadata.seed = seed;
        Self::new(layers, metadata)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut ModelMetadata {
        &mut self.metadata
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = ForwardScratch::default();
        Ok(self.forward_into(x, &mut scratch)?.to_vec())
    }

    /// Allocation-free forward pass once `scratch` has warmed up.
    pub fn forward_into<'s>(&self, x: &[f64], scratch: &'s mut ForwardScratch) -> Result<&'s [f64]> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), x.len()));
        }
        let bufs = &mut scratch.buffers;
        bufs.resize_with(self.layers.len(), Vec::new);
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = bufs.split_at_mut(i);
            let input: &[f64] = if i == 0 { x } else { &done[i - 1] };
            let out = &mut rest[0];
            out.resize(layer.outputs, 0.0);
            layer.affine(input, out);
            if layer.activation == Activation::Relu {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(&bufs[self.layers.len() - 1])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_string(path, &self.to_text())
    }

    pub fn to_text(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_FILE_VERSION,
            metadata: self.metadata.clone(),
            layers: self.layers.clone(),
        };
        let mut s = serde_json::to_string(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path, message),
            other => Error::format(path, other.to_string()),
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::format("<model>", e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::format("<model>", format!("not a model file: '{}'", file.format)));
        }
        if file.version != MODEL_FILE_VERSION {
            return Err(Error::format(
                "<model>",
                format!("unsupported model version {}", file.version),
            ));
        }
        let layers = file
            .layers
            .into_iter()
            .map(|l| DenseLayer::new(l.inputs, l.outputs, l.weights, l.bias, l.activation))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, file.metadata)
    }
}

pub fn save_model(model: &NetworkModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<NetworkModel> {
    NetworkModel::load(path)
}

#[derive(Debug, Default, Clone)]
pub struct ForwardScratch {
    buffers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Sum of squared errors.
    Mse,
    /// Cross-entropy of the softmaxed output against the target weights.
    SoftmaxCrossEntropy,
}

fn check_len(context: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(context, a.len(), b.len()));
    }
    Ok(())
}

/// `sum_i (a_i - t_i)^2`, unreduced.
pub fn mse_loss(output: &[f64], target: &[f64]) -> Result<f64> {
    check_len("mse target", output, target)?;
    Ok(output
        .iter()
        .zip(target)
        .map(|(a, t)| (a - t) * (a - t))
        .sum())
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

/// `-sum_i t_i ln softmax(a)_i`. Targets need not sum to one.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> Result<f64> {
    check_len("cross-entropy target", logits, target)?;
    if let Some(i) = target.iter().position(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::invalid(format!("cross-entropy target {i} must be finite and >= 0")));
    }
    let lse = log_sum_exp(logits);
    Ok(-logits
        .iter()
        .zip(target)
        .filter(|(_, t)| **t != 0.0)
        .map(|(a, t)| t * (a - lse))
        .sum::<f64>())
}

impl LossKind {
    pub fn loss(self, output: &[f64], target: &[f64]) -> Result<f64> {
        match self {
            LossKind::Mse => mse_loss(output, target),
            LossKind::SoftmaxCrossEntropy => softmax_cross_entropy(output, target),
        }
    }

    /// Writes dL/d(output) into `grad` and returns the loss.
    fn loss_and_grad(self, output: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            LossKind::Mse => {
                let mut loss = 0.0;
                for ((g, a), t) in grad.iter_mut().zip(output).zip(target) {
                    let r = a - t;
                    loss += r * r;
                    *g = 2.0 * r;
                }
                loss
            }
            LossKind::SoftmaxCrossEntropy => {
                let lse = log_sum_exp(output);
                let total: f64 = target.iter().sum();
                let mut loss = 0.0;
                for ((g, a), t) in grad.iter_mut().zip(output).zip(target) {
                    if *t != 0.0 {
                        loss -= t * (a - lse);
                    }
                    *g = total * (a - lse).exp() - t;
                }
                loss
            }
        }
    }
}

/// Per-layer parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &NetworkModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }
}

/// Reusable buffers for one forward/backward pass.
#[derive(Debug, Default)]
struct BackpropScratch {
    /// Post-activation output of every layer.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl BackpropScratch {
    /// Runs forward and backward for one sample, adding its gradient into
    /// `grads`. Returns the sample loss.
    fn accumulate(
        &mut self,
        model: &NetworkModel,
        x: &[f64],
        target: &[f64],
        kind: LossKind,
        grads: &mut Gradients,
    ) -> f64 {
        let n = model.layers.len();
        self.acts.resize_with(n, Vec::new);
        for (i, layer) in model.layers.iter().enumerate() {
            let (done, rest) = self.acts.split_at_mut(i);
            let input: &[f64] = if i == 0 { x } else { &done[i - 1] };
            let out = &mut rest[0];
            out.resize(layer.outputs, 0.0);
            layer.affine(input, out);
            if layer.activation == Activation::Relu {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }

        self.delta.resize(model.output_dim(), 0.0);
        let loss = kind.loss_and_grad(&self.acts[n - 1], target, &mut self.delta);

        for i in (0..n).rev() {
            let layer = &model.layers[i];
            // dL/dz: the ReLU derivative gates on the stored output.
            if layer.activation == Activation::Relu {
                for (d, a) in self.delta.iter_mut().zip(&self.acts[i]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input: &[f64] = if i == 0 { x } else { &self.acts[i - 1] };
            let g = &mut grads.layers[i];
            for (o, &d) in self.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                axpy(d, input, &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs]);
            }
            if i > 0 {
                self.next_delta.clear();
                self.next_delta.resize(layer.inputs, 0.0);
                for (o, &d) in self.delta.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, layer.row(o), &mut self.next_delta);
                    }
                }
                std::mem::swap(&mut self.delta, &mut self.next_delta);
            }
        }
        loss
    }
}

/// Minibatch buffers. Each weight row is visited once per batch instead of
/// once per sample; per-element summation order matches [`BackpropScratch`].
#[derive(Debug, Default)]
struct BatchScratch {
    /// Post-activation outputs, `batch x width`, sample-major.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl BatchScratch {
    fn accumulate(
        &mut self,
        model: &NetworkModel,
        data: &Dataset,
        batch: &[usize],
        kind: LossKind,
        grads: &mut Gradients,
    ) -> f64 {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { self.accumulate_avx2(model, data, batch, kind, grads) };
        }
        self.accumulate_generic(model, data, batch, kind, grads)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn accumulate_avx2(
        &mut self,
        model: &NetworkModel,
        data: &Dataset,
        batch: &[usize],
        kind: LossKind,
        grads: &mut Gradients,
    ) -> f64 {
        self.accumulate_generic(model, data, batch, kind, grads)
    }

    #[inline(always)]
    fn accumulate_generic(
        &mut self,
        model: &NetworkModel,
        data: &Dataset,
        batch: &[usize],
        kind: LossKind,
        grads: &mut Gradients,
    ) -> f64 {
        let n = model.layers.len();
        let bs = batch.len();
        self.acts.resize_with(n, Vec::new);
        for (i, layer) in model.layers.iter().enumerate() {
            let (done, rest) = self.acts.split_at_mut(i);
            let out = &mut rest[0];
            out.resize(bs * layer.outputs, 0.0);
            for o in 0..layer.outputs {
                let row = layer.row(o);
                for b in 0..bs {
                    let input: &[f64] = if i == 0 {
                        &data.inputs[batch[b]]
                    } else {
                        &done[i - 1][b * layer.inputs..(b + 1) * layer.inputs]
                    };
                    out[b * layer.outputs + o] = layer.bias[o] + dot(row, input);
                }
            }
            if layer.activation == Activation::Relu {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }

        let width = model.output_dim();
        self.delta.resize(bs * width, 0.0);
        let mut loss = 0.0;
        for (b, &idx) in batch.iter().enumerate() {
            let span = b * width..(b + 1) * width;
            loss += kind.loss_and_grad(&self.acts[n - 1][span.clone()], &data.targets[idx], &mut self.delta[span]);
        }

        for i in (0..n).rev() {
            let layer = &model.layers[i];
            if layer.activation == Activation::Relu {
                for (d, a) in self.delta.iter_mut().zip(&self.acts[i]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = |b: usize| -> &[f64] {
                if i == 0 {
                    &data.inputs[batch[b]]
                } else {
                    &self.acts[i - 1][b * layer.inputs..(b + 1) * layer.inputs]
                }
            };
            let g = &mut grads.layers[i];
            for o in 0..layer.outputs {
                let grow = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for b in 0..bs {
                    let d = self.delta[b * layer.outputs + o];
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    axpy(d, input(b), grow);
                }
            }
            if i > 0 {
                self.next_delta.clear();
                self.next_delta.resize(bs * layer.inputs, 0.0);
                for o in 0..layer.outputs {
                    let row = layer.row(o);
                    for b in 0..bs {
                        let d = self.delta[b * layer.outputs + o];
                        if d != 0.0 {
                            axpy(d, row, &mut self.next_delta[b * layer.inputs..(b + 1) * layer.inputs]);
                        }
                    }
                }
                std::mem::swap(&mut self.delta, &mut self.next_delta);
            }
        }
        loss
    }
}

/// Exact gradients of the selected loss for one sample.
pub fn backward(model: &NetworkModel, x: &[f64], target: &[f64], kind: LossKind) -> Result<(f64, Gradients)> {
    if x.len() != model.input_dim() {
        return Err(Error::dim("network input", model.input_dim(), x.len()));
    }
    if target.len() != model.output_dim() {
        return Err(Error::dim("network target", model.output_dim(), target.len()));
    }
    let mut grads = Gradients::zeros_like(model);
    let loss = BackpropScratch::default().accumulate(model, x, target, kind, &mut grads);
    Ok((loss, grads))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and central differences of
/// the loss over every parameter.
pub fn compare_gradients(
    model: &NetworkModel,
    x: &[f64],
    target: &[f64],
    kind: LossKind,
    eps: f64,
    analytic: &Gradients,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let eval = |m: &NetworkModel| -> Result<f64> { kind.loss(&m.forward(x)?, target) };
    for li in 0..model.layers.len() {
        for wi in 0..model.layers[li].weights.len() {
            let orig = probe.layers[li].weights[wi];
            probe.layers[li].weights[wi] = orig + eps;
            let up = eval(&probe)?;
            probe.layers[li].weights[wi] = orig - eps;
            let down = eval(&probe)?;
            probe.layers[li].weights[wi] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.layers[li].weights[wi], numeric));
        }
        for bi in 0..model.layers[li].bias.len() {
            let orig = probe.layers[li].bias[bi];
            probe.layers[li].bias[bi] = orig + eps;
            let up = eval(&probe)?;
            probe.layers[li].bias[bi] = orig - eps;
            let down = eval(&probe)?;
            probe.layers[li].bias[bi] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.layers[li].bias[bi], numeric));
        }
    }
    Ok(worst)
}

pub fn gradient_check(model: &NetworkModel, x: &[f64], target: &[f64], kind: LossKind, eps: f64) -> Result<f64> {
    let (_, grads) = backward(model, x, target, kind)?;
    compare_gradients(model, x, target, kind, eps, &grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 10,
            epochs: 100,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::dim("dataset targets", inputs.len(), targets.len()));
        }
        if let (Some(x0), Some(t0)) = (inputs.first(), targets.first()) {
            if let Some(x) = inputs.iter().find(|x| x.len() != x0.len()) {
                return Err(Error::dim("dataset input", x0.len(), x.len()));
            }
            if let Some(t) = targets.iter().find(|t| t.len() != t0.len()) {
                return Err(Error::dim("dataset target", t0.len(), t.len()));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: f64,
}

/// Per-epoch mean per-sample loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,wall_ms\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{:.3}\n", e.epoch, e.mean_loss, e.wall_ms));
        }
        out
    }
}

/// Mini-batch SGD. The update uses the mean of per-sample gradients; the
/// sample order is reshuffled every epoch from `config.seed`.
pub fn sgd_train(
    model: &NetworkModel,
    data: &Dataset,
    config: &TrainConfig,
    kind: LossKind,
) -> Result<(NetworkModel, TrainReport)> {
    sgd_train_with(model, data, config, kind, |_| {})
}

/// [`sgd_train`] with a callback after every epoch.
pub fn sgd_train_with(
    model: &NetworkModel,
    data: &Dataset,
    config: &TrainConfig,
    kind: LossKind,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(NetworkModel, TrainReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if data.inputs[0].len() != model.input_dim() {
        return Err(Error::dim("training input", model.input_dim(), data.inputs[0].len()));
    }
    if data.targets[0].len() != model.output_dim() {
        return Err(Error::dim("training target", model.output_dim(), data.targets[0].len()));
    }
    if kind == LossKind::SoftmaxCrossEntropy
        && data.targets.iter().flatten().any(|t| !(t.is_finite() && *t >= 0.0))
    {
        return Err(Error::invalid("cross-entropy targets must be finite and >= 0"));
    }

    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = Gradients::zeros_like(&model);
    let mut scratch = BatchScratch::default();
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.fill_zero();
            total += scratch.accumulate(&model, data, batch, kind, &mut grads);
            if !total.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let step = config.learning_rate / batch.len() as f64;
            if step == 0.0 {
                continue;
            }
            for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
                axpy(-step, &g.weights, &mut layer.weights);
                axpy(-step, &g.bias, &mut layer.bias);
            }
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / data.len() as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    if model.layers.iter().any(|l| l.weights.iter().chain(&l.bias).any(|v| !v.is_finite())) {
        return Err(Error::Divergence {
            epoch: config.epochs.saturating_sub(1),
        });
    }
    Ok((model, report))
}

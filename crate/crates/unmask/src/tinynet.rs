//! A small from-scratch differentiable network: affine layers with
//! rectifier nonlinearities over flattened images, topped by either a
//! softmax classifier head or a sigmoid multi-label head.
//!
//! Gradients with respect to both parameters and inputs are exact; the
//! test suite checks them against central finite differences. All training
//! runs are deterministic per seed.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {index} expects input {expected} but previous layer outputs {actual}")]
    DimensionMismatch { index: usize, expected: usize, actual: usize },
    #[error("layer dimensions must be nonzero")]
    ZeroDimension,
    #[error("input has {actual} columns, network expects {expected}")]
    InputShape { expected: usize, actual: usize },
    #[error("label count {labels} does not match batch size {batch}")]
    LabelShape { labels: usize, batch: usize },
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("label kind does not match the network head")]
    HeadMismatch,
    #[error("network has {outputs} outputs but {labels} labels were given")]
    LabelCount { outputs: usize, labels: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("learning rate must be positive")]
    NonPositiveLearningRate,
    #[error("checkpoint is malformed: {0}")]
    Checkpoint(String),
    #[error("checkpoint weights are not finite")]
    NonFiniteWeights,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Output head of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Mutually exclusive classes; outputs form a probability simplex.
    SoftmaxClassifier,
    /// Independent per-feature confidences in (0, 1).
    SigmoidMultilabel,
}

/// One affine layer: `input` fan-in, `output` fan-out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
}

/// Architecture: a chain of affine layers (rectifier between them, none
/// after the last) and a head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
    pub head: Head,
}

impl ArchSpec {
    /// Multi-layer perceptron: `input_dim` → each hidden width → `output_dim`.
    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize, head: Head) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims.windows(2).map(|w| LayerSpec { input: w[0], output: w[1] }).collect();
        Self { layers, head }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.layers.is_empty() {
            return Err(NetError::ZeroDimension);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.input == 0 || layer.output == 0 {
                return Err(NetError::ZeroDimension);
            }
            if i > 0 && layer.input != self.layers[i - 1].output {
                return Err(NetError::DimensionMismatch {
                    index: i,
                    expected: layer.input,
                    actual: self.layers[i - 1].output,
                });
            }
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.input * l.output + l.output).sum()
    }
}

/// Batch labels: class indices for the softmax head, multi-hot rows for
/// the sigmoid head.
#[derive(Debug, Clone)]
pub enum Labels {
    Classes(Vec<usize>),
    MultiHot(Array2<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::MultiHot(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs plus labels; pixel values are expected in [0, 1].
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Array2<f64>,
    pub y: Labels,
}

/// Per-layer parameter gradients, in the same layout as the weights.
pub struct ParamGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// The network: per-layer weight matrices (fan-in × fan-out) and biases,
/// plus the ordered output labels (class names or feature names).
#[derive(Debug, Clone)]
pub struct TinyNet {
    arch: ArchSpec,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    labels: Vec<String>,
}

/// Initialize a network with scaled-uniform weights; deterministic per seed.
pub fn init(arch: ArchSpec, labels: Vec<String>, seed: u64) -> Result<TinyNet, NetError> {
    arch.validate()?;
    if labels.len() != arch.output_dim() {
        return Err(NetError::LabelCount { outputs: arch.output_dim(), labels: labels.len() });
    }
    let mut rng = rng::chacha(seed);
    let mut weights = Vec::with_capacity(arch.layers.len());
    let mut biases = Vec::with_capacity(arch.layers.len());
    let last = arch.layers.len() - 1;
    for (i, layer) in arch.layers.iter().enumerate() {
        let bound = (6.0 / (layer.input + layer.output) as f64).sqrt();
        let w = Array2::from_shape_fn((layer.input, layer.output), |_| {
            rng.gen_range(-bound..bound)
        });
        weights.push(w);
        // Hidden biases start slightly positive so rectifier units do not
        // die en masse early in training.
        let bias = if i < last { 0.01 } else { 0.0 };
        biases.push(Array1::from_elem(layer.output, bias));
    }
    Ok(TinyNet { arch, weights, biases, labels })
}

fn relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ForwardTrace {
    /// Activations entering each layer; activations[0] is the input.
    activations: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl TinyNet {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), NetError> {
        if x.ncols() != self.input_dim() {
            return Err(NetError::InputShape { expected: self.input_dim(), actual: x.ncols() });
        }
        Ok(())
    }

    fn forward_trace(&self, x: ArrayView2<f64>) -> Result<ForwardTrace, NetError> {
        self.check_input(&x)?;
        let mut activations = vec![x.to_owned()];
        let last = self.weights.len() - 1;
        let mut current = x.to_owned();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = current.dot(w) + b;
            if i < last {
                relu(&mut z);
                activations.push(z.clone());
                current = z;
            } else {
                return Ok(ForwardTrace { activations, logits: z });
            }
        }
        unreachable!("validated architectures have at least one layer")
    }

    /// Pre-activation values of every rectifier unit, for kink-avoidance
    /// checks in finite-difference tests.
    pub fn hidden_preactivations(&self, x: ArrayView2<f64>) -> Result<Vec<f64>, NetError> {
        self.check_input(&x)?;
        let mut out = Vec::new();
        let last = self.weights.len() - 1;
        let mut current = x.to_owned();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = current.dot(w) + b;
            if i < last {
                out.extend(z.iter().cloned());
                relu(&mut z);
                current = z;
            }
        }
        Ok(out)
    }

    /// Head probabilities per sample: softmax rows sum to one; sigmoid
    /// entries are independent confidences.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        let trace = self.forward_trace(x)?;
        Ok(match self.arch.head {
            Head::SoftmaxClassifier => softmax_rows(&trace.logits),
            Head::SigmoidMultilabel => trace.logits.mapv(sigmoid),
        })
    }

    /// Raw pre-head outputs.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        Ok(self.forward_trace(x)?.logits)
    }

    /// Shift the output-layer biases in place (e.g. decision-boundary
    /// calibration after training).
    pub fn shift_output_biases(&mut self, deltas: &[f64]) -> Result<(), NetError> {
        if deltas.len() != self.output_dim() {
            return Err(NetError::LabelCount { outputs: self.output_dim(), labels: deltas.len() });
        }
        let bias = self.biases.last_mut().expect("validated architectures have layers");
        for (b, d) in bias.iter_mut().zip(deltas) {
            *b += d;
        }
        Ok(())
    }

    /// Mean per-sample loss and its exact gradients. Loss is cross-entropy
    /// for the softmax head and per-output binary cross-entropy summed over
    /// outputs for the sigmoid head.
    fn loss_and_grads(
        &self,
        x: ArrayView2<f64>,
        y: &Labels,
        want_params: bool,
    ) -> Result<(f64, Array2<f64>, Option<ParamGrads>), NetError> {
        if y.len() != x.nrows() {
            return Err(NetError::LabelShape { labels: y.len(), batch: x.nrows() });
        }
        if x.nrows() == 0 {
            return Err(NetError::EmptyDataset);
        }
        let trace = self.forward_trace(x)?;
        let n = x.nrows() as f64;
        let k = self.output_dim();

        // d(mean loss)/d(logits), plus the loss itself.
        let (loss, mut delta) = match (&self.arch.head, y) {
            (Head::SoftmaxClassifier, Labels::Classes(classes)) => {
                let probs = softmax_rows(&trace.logits);
                let mut loss = 0.0;
                let mut delta = probs.clone();
                for (i, &c) in classes.iter().enumerate() {
                    if c >= k {
                        return Err(NetError::ClassIndex { index: c, classes: k });
                    }
                    loss -= probs[[i, c]].max(1e-300).ln();
                    delta[[i, c]] -= 1.0;
                }
                (loss / n, delta / n)
            }
            (Head::SigmoidMultilabel, Labels::MultiHot(targets)) => {
                if targets.ncols() != k {
                    return Err(NetError::LabelCount { outputs: k, labels: targets.ncols() });
                }
                // Stable sum of BCE terms: max(z,0) - z*t + ln(1 + e^-|z|).
                let mut loss = 0.0;
                for (z, t) in trace.logits.iter().zip(targets.iter()) {
                    loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                }
                let probs = trace.logits.mapv(sigmoid);
                let delta = (&probs - targets) / n;
                (loss / n, delta)
            }
            _ => return Err(NetError::HeadMismatch),
        };

        let mut param_grads = want_params.then(|| ParamGrads {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        });

        // Backpropagate through affine layers and rectifiers.
        for i in (0..self.weights.len()).rev() {
            if let Some(grads) = param_grads.as_mut() {
                grads.weights[i] = trace.activations[i].t().dot(&delta);
                grads.biases[i] = delta.sum_axis(Axis(0));
            }
            delta = delta.dot(&self.weights[i].t());
            if i > 0 {
                // Rectifier mask: derivative is zero where the forward
                // activation was clamped (zero at the kink).
                delta.zip_mut_with(&trace.activations[i], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
        }

        Ok((loss, delta, param_grads.take()))
    }

    /// Loss and its gradient with respect to the inputs.
    pub fn loss_and_input_grad(
        &self,
        x: ArrayView2<f64>,
        y: &Labels,
    ) -> Result<(f64, Array2<f64>), NetError> {
        let (loss, grad, _) = self.loss_and_grads(x, y, false)?;
        Ok((loss, grad))
    }

    /// Loss and its gradients with respect to weights and biases.
    pub fn loss_and_param_grads(
        &self,
        x: ArrayView2<f64>,
        y: &Labels,
    ) -> Result<(f64, ParamGrads), NetError> {
        let (loss, _, grads) = self.loss_and_grads(x, y, true)?;
        Ok((loss, grads.expect("parameter gradients requested")))
    }

    /// Predicted class index for one sample (softmax head); ties go to the
    /// lowest index.
    pub fn predict_class(&self, x: ArrayView1<f64>) -> Result<usize, NetError> {
        let batch = x.insert_axis(Axis(0));
        Ok(self.predict_classes(batch)?[0])
    }

    /// Predicted class indices for a batch.
    pub fn predict_classes(&self, x: ArrayView2<f64>) -> Result<Vec<usize>, NetError> {
        let probs = self.forward(x)?;
        Ok(probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for (i, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best = i;
                        best_v = v;
                    }
                }
                best
            })
            .collect())
    }

    /// Per-output confidences for one sample (multi-label head).
    pub fn predict_confidences(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, NetError> {
        let batch = x.insert_axis(Axis(0));
        let probs = self.forward(batch)?;
        Ok(probs.row(0).to_owned())
    }

    /// Fraction of batch samples whose predicted class matches the label.
    pub fn accuracy(&self, batch: &Batch) -> Result<f64, NetError> {
        let classes = match &batch.y {
            Labels::Classes(c) => c,
            _ => return Err(NetError::HeadMismatch),
        };
        let preds = self.predict_classes(batch.x.view())?;
        let hits = preds.iter().zip(classes).filter(|(p, c)| p == c).count();
        Ok(hits as f64 / classes.len().max(1) as f64)
    }

    fn flat_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().cloned());
            out.extend(b.iter().cloned());
        }
        out
    }

    fn set_flat_weights(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for v in w.iter_mut() {
                *v = *it.next().expect("flat weight length checked");
            }
            for v in b.iter_mut() {
                *v = *it.next().expect("flat weight length checked");
            }
        }
    }

    /// Serialize to the checkpoint format: magic, JSON header, f32 LE blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            version: 1,
            arch: self.arch.clone(),
            labels: self.labels.clone(),
            weight_count: self.arch.param_count(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header_json.len() + header.weight_count * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for v in self.flat_weights() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Parse a checkpoint. Rejects malformed headers, dimension chains,
    /// truncated or oversized blobs, and non-finite weights.
    pub fn from_bytes(bytes: &[u8]) -> Result<TinyNet, NetError> {
        let bad = |msg: &str| NetError::Checkpoint(msg.to_string());
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 {
            return Err(bad("too short"));
        }
        let (magic, rest) = bytes.split_at(CHECKPOINT_MAGIC.len());
        if magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let (len_bytes, rest) = rest.split_at(4);
        let header_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        if header_len > rest.len() {
            return Err(bad("header length exceeds file"));
        }
        let (header_bytes, blob) = rest.split_at(header_len);
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| bad(&format!("header: {e}")))?;
        if header.version != 1 {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        header.arch.validate()?;
        if header.labels.len() != header.arch.output_dim() {
            return Err(NetError::LabelCount {
                outputs: header.arch.output_dim(),
                labels: header.labels.len(),
            });
        }
        let expected = header.arch.param_count();
        if expected > MAX_CHECKPOINT_PARAMS {
            return Err(bad("parameter count exceeds limit"));
        }
        if header.weight_count != expected {
            return Err(bad("weight count does not match architecture"));
        }
        if blob.len() != expected * 4 {
            return Err(bad("weight blob length mismatch"));
        }
        let mut flat = Vec::with_capacity(expected);
        for chunk in blob.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(NetError::NonFiniteWeights);
            }
            flat.push(v);
        }
        let mut net = TinyNet {
            weights: header
                .arch
                .layers
                .iter()
                .map(|l| Array2::zeros((l.input, l.output)))
                .collect(),
            biases: header.arch.layers.iter().map(|l| Array1::zeros(l.output)).collect(),
            arch: header.arch,
            labels: header.labels,
        };
        net.set_flat_weights(&flat);
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TinyNet, NetError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"TNET";
const MAX_CHECKPOINT_PARAMS: usize = 16 << 20;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    arch: ArchSpec,
    labels: Vec<String>,
    weight_count: usize,
}

/// Training options for [`train`] and the adversarial variant.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 20, lr: 0.05, batch_size: 32, seed: 0 }
    }
}

fn take_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

fn take_labels(y: &Labels, idx: &[usize]) -> Labels {
    match y {
        Labels::Classes(c) => Labels::Classes(idx.iter().map(|&i| c[i]).collect()),
        Labels::MultiHot(m) => Labels::MultiHot(take_rows(m, idx)),
    }
}

/// Mini-batch gradient descent with per-epoch shuffling. Each batch is
/// passed through `transform` before the gradient step (identity for plain
/// training; the adversarial trainer substitutes attacked inputs). Returns
/// the trained network and the per-epoch mean loss.
pub fn train_with_transform<F>(
    net: TinyNet,
    data: &Batch,
    opts: &TrainOptions,
    mut transform: F,
) -> Result<(TinyNet, Vec<f64>), NetError>
where
    F: FnMut(&TinyNet, Array2<f64>, &Labels) -> Array2<f64>,
{
    if data.x.nrows() == 0 {
        return Err(NetError::EmptyDataset);
    }
    if opts.lr <= 0.0 {
        return Err(NetError::NonPositiveLearningRate);
    }
    if data.y.len() != data.x.nrows() {
        return Err(NetError::LabelShape { labels: data.y.len(), batch: data.x.nrows() });
    }
    let mut net = net;
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..data.x.nrows()).collect();
    let mut rng = rng::chacha(rng::derive(opts.seed, &[0x7261_696e]));
    let batch_size = opts.batch_size.max(1);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(batch_size) {
            let xb = take_rows(&data.x, chunk);
            let yb = take_labels(&data.y, chunk);
            let xb = transform(&net, xb, &yb);
            let (loss, grads) = net.loss_and_param_grads(xb.view(), &yb)?;
            for ((w, b), (gw, gb)) in net
                .weights
                .iter_mut()
                .zip(&mut net.biases)
                .zip(grads.weights.iter().zip(&grads.biases))
            {
                w.zip_mut_with(gw, |v, g| *v -= opts.lr * g);
                b.zip_mut_with(gb, |v, g| *v -= opts.lr * g);
            }
            epoch_loss += loss;
            batches += 1.0;
        }
        curve.push(epoch_loss / batches);
    }
    Ok((net, curve))
}

/// Plain empirical-risk training.
pub fn train(net: TinyNet, data: &Batch, opts: &TrainOptions) -> Result<(TinyNet, Vec<f64>), NetError> {
    train_with_transform(net, data, opts, |_, x, _| x)
}

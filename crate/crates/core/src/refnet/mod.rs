//! Reference multilayer perceptron.
//!
//! Exists to produce realistic inputs for the quantizers: trained parameters,
//! curvature (exact or Gauss-Newton Hessian diagonal, Adam second moments)
//! and accuracy before and after quantization. Everything is computed in
//! `f64` with hand-written backpropagation.
//!
//! Parameter layout per layer `l` (fan-in `n_in`, fan-out `n_out`): the
//! weight matrix row-major `[n_out][n_in]`, followed by the `n_out` biases.
//! Hidden layers apply the activation, the output layer is linear (logits).

mod data;
mod finetune;
mod hessian;
mod prune;
mod train;

pub use data::{Dataset, SyntheticTask, TaskConfig, Targets};
pub use finetune::{center_gradients, fine_tune_centers, FineTuneConfig, FineTuned};
pub use hessian::{hessian_diag_exact, hessian_diag_finite_diff, hessian_diag_gn};
pub use prune::prune_magnitude;
pub use train::{adam_curvature, init_params, train_adam, AdamState, TrainConfig, TrainedModel};

use serde::{Deserialize, Serialize};

use crate::store::Span;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::None => z,
        }
    }

    /// First derivative given pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::None => 1.0,
        }
    }

    fn second_derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu | Activation::None => 0.0,
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// `½‖y − t‖²` per sample.
    MeanSquareError,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub n_in: usize,
    pub n_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    #[inline]
    fn weight(&self, out: usize, inp: usize) -> usize {
        self.weight_offset + out * self.n_in + inp
    }
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "a network needs at least an input and an output width".into(),
            ));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(MlpSpec {
            layer_widths,
            activation,
            loss,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let layout = LayerLayout {
                    n_in: w[0],
                    n_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                layout
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// One span per weight matrix and per bias vector.
    pub fn spans(&self) -> Vec<Span> {
        self.layers()
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| {
                [
                    Span::new(
                        format!("fc{l}.weight"),
                        layer.weight_offset,
                        layer.n_in * layer.n_out,
                    ),
                    Span::new(format!("fc{l}.bias"), layer.bias_offset, layer.n_out),
                ]
            })
            .collect()
    }

    pub fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                what: "parameters",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        Ok(())
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.dim() != self.input_dim() {
            return Err(Error::LengthMismatch {
                what: "input features",
                expected: self.input_dim(),
                got: ds.dim(),
            });
        }
        let out = match ds.targets() {
            Targets::Classes { n_classes, .. } => *n_classes,
            Targets::Values { dim, .. } => {
                if self.loss == LossKind::SoftmaxCrossEntropy {
                    return Err(Error::InvalidArgument(
                        "cross entropy needs class labels".into(),
                    ));
                }
                *dim
            }
        };
        if out != self.output_dim() {
            return Err(Error::LengthMismatch {
                what: "output width",
                expected: self.output_dim(),
                got: out,
            });
        }
        Ok(())
    }
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub(crate) struct Tape {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    pub acts: Vec<Vec<f64>>,
    /// `pre[l]` is the pre-activation of layer `l`.
    pub pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new(spec: &MlpSpec) -> Self {
        Tape {
            acts: spec.layer_widths.iter().map(|&w| vec![0.0; w]).collect(),
            pre: spec.layer_widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    pub fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

pub(crate) fn forward(spec: &MlpSpec, layers: &[LayerLayout], w: &[f64], x: &[f64], tape: &mut Tape) {
    tape.acts[0].copy_from_slice(x);
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let (head, tail) = tape.acts.split_at_mut(l + 1);
        let input = &head[l];
        let output = &mut tail[0];
        let pre = &mut tape.pre[l];
        for o in 0..layer.n_out {
            let row = &w[layer.weight(o, 0)..layer.weight(o, 0) + layer.n_in];
            let z = w[layer.bias_offset + o]
                + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            pre[o] = z;
            output[o] = if l == last { z } else { spec.activation.apply(z) };
        }
    }
}

/// Per-sample loss and its gradient with respect to the logits.
pub(crate) fn output_loss(
    loss: LossKind,
    logits: &[f64],
    targets: &Targets,
    sample: usize,
    grad: &mut [f64],
) -> f64 {
    match loss {
        LossKind::SoftmaxCrossEntropy => {
            let Targets::Classes { labels, .. } = targets else {
                unreachable!("checked by MlpSpec::check_dataset")
            };
            let label = labels[sample];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let log_norm = max + sum.ln();
            for (g, z) in grad.iter_mut().zip(logits) {
                *g = (z - log_norm).exp();
            }
            grad[label] -= 1.0;
            log_norm - logits[label]
        }
        LossKind::MeanSquareError => {
            let mut total = 0.0;
            for (c, (g, z)) in grad.iter_mut().zip(logits).enumerate() {
                let t = targets.value(sample, c);
                *g = z - t;
                total += 0.5 * (z - t) * (z - t);
            }
            total
        }
    }
}

/// Backpropagates `delta` (gradient w.r.t. the logits) through the tape,
/// adding parameter gradients into `grad`. On return `deltas[l]` holds the
/// gradient with respect to the pre-activation of layer `l`.
pub(crate) fn backward(
    spec: &MlpSpec,
    layers: &[LayerLayout],
    w: &[f64],
    tape: &Tape,
    deltas: &mut [Vec<f64>],
    grad: &mut [f64],
) {
    for l in (0..layers.len()).rev() {
        let layer = layers[l];
        let input = &tape.acts[l];
        for o in 0..layer.n_out {
            let d = deltas[l][o];
            if d == 0.0 {
                continue;
            }
            grad[layer.bias_offset + o] += d;
            let row = &mut grad[layer.weight(o, 0)..layer.weight(o, 0) + layer.n_in];
            for (g, a) in row.iter_mut().zip(input) {
                *g += d * a;
            }
        }
        if l == 0 {
            break;
        }
        let (head, tail) = deltas.split_at_mut(l);
        let below = &mut head[l - 1];
        let current = &tail[0];
        for (i, b) in below.iter_mut().enumerate() {
            let mut upstream = 0.0;
            for (o, d) in current.iter().enumerate() {
                upstream += w[layer.weight(o, i)] * d;
            }
            *b = upstream * spec.activation.derivative(tape.pre[l - 1][i], tape.acts[l][i]);
        }
    }
}

pub(crate) fn new_deltas(spec: &MlpSpec) -> Vec<Vec<f64>> {
    spec.layer_widths[1..].iter().map(|&w| vec![0.0; w]).collect()
}

/// Mean loss over `batch` and its gradient with respect to every parameter.
pub fn forward_loss(spec: &MlpSpec, params: &[f64], batch: &Dataset) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; spec.param_count()];
    let indices: Vec<usize> = (0..batch.len()).collect();
    let loss = loss_and_grad_into(spec, params, batch, &indices, &mut grad)?;
    Ok((loss, grad))
}

/// Mean loss and gradient over the selected samples; `grad` is overwritten.
pub(crate) fn loss_and_grad_into(
    spec: &MlpSpec,
    params: &[f64],
    ds: &Dataset,
    indices: &[usize],
    grad: &mut [f64],
) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_dataset(ds)?;
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let layers = spec.layers();
    let mut tape = Tape::new(spec);
    let mut deltas = new_deltas(spec);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    for &s in indices {
        forward(spec, &layers, params, ds.input(s), &mut tape);
        let last = deltas.len() - 1;
        total += output_loss(spec.loss, tape.logits(), ds.targets(), s, &mut deltas[last]);
        backward(spec, &layers, params, &tape, &mut deltas, grad);
    }
    let scale = 1.0 / indices.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(total * scale)
}

/// Mean loss without gradients.
pub fn mean_loss(spec: &MlpSpec, params: &[f64], ds: &Dataset) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_dataset(ds)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let layers = spec.layers();
    let mut tape = Tape::new(spec);
    let mut scratch = vec![0.0; spec.output_dim()];
    let mut total = 0.0;
    for s in 0..ds.len() {
        forward(spec, &layers, params, ds.input(s), &mut tape);
        total += output_loss(spec.loss, tape.logits(), ds.targets(), s, &mut scratch);
    }
    Ok(total / ds.len() as f64)
}

/// Fraction of samples whose largest logit is the labelled class.
pub fn eval_accuracy(spec: &MlpSpec, params: &[f64], eval: &Dataset) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_dataset(eval)?;
    if eval.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    let Targets::Classes { labels, .. } = eval.targets() else {
        return Err(Error::InvalidArgument(
            "accuracy needs class labels".into(),
        ));
    };
    let layers = spec.layers();
    let mut tape = Tape::new(spec);
    let mut correct = 0usize;
    for (s, &label) in labels.iter().enumerate() {
        forward(spec, &layers, params, eval.input(s), &mut tape);
        if argmax(tape.logits()) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval.len() as f64)
}

/// Index of the largest value, lowest index on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

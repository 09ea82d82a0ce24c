//! Diagonal of the Hessian of the mean loss with respect to the parameters.
//!
//! A weight `W[o][i]` of layer `l` enters the loss only through the
//! pre-activation `z[o] = Σ_i W[o][i]·a[i] + b[o]`, and `a` does not depend
//! on `W`, so per sample
//!
//! ```text
//! ∂²L/∂W[o][i]² = a[i]² · ∂²L/∂z[o]²      ∂²L/∂b[o]² = ∂²L/∂z[o]²
//! ```
//!
//! [`hessian_diag_exact`] obtains `∂²L/∂z²` by backpropagating the full
//! pre-activation Hessian of each layer (`W^T H W` plus the activation
//! curvature term). [`hessian_diag_gn`] keeps only the diagonal and drops the
//! activation second derivative, which makes every entry nonnegative and the
//! cost comparable to a gradient pass. [`hessian_diag_finite_diff`] is the
//! brute-force reference: central differences of the analytic gradient, one
//! coordinate at a time.

use log::warn;

use super::{forward, loss_and_grad_into, output_loss, Dataset, LossKind, MlpSpec, Tape};
use crate::store::{CurvatureDiag, CurvatureSource};
use crate::{Error, Result};

fn check(spec: &MlpSpec, params: &[f64], ds: &Dataset) -> Result<()> {
    spec.check_params(params)?;
    spec.check_dataset(ds)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty hessian split".into()));
    }
    Ok(())
}

fn finish(raw: Vec<f64>, n_samples: usize, source: CurvatureSource) -> Result<CurvatureDiag> {
    let scale = 1.0 / n_samples as f64;
    let values: Vec<f64> = raw.into_iter().map(|h| h * scale).collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "second derivative of parameter {index} is not finite"
        )));
    }
    let cv = CurvatureDiag::new(values, source)?;
    if cv.clamped() > 0 {
        warn!(
            "{} of {} curvature entries were below the floor and clamped",
            cv.clamped(),
            cv.len()
        );
    }
    Ok(cv)
}

/// Full Hessian of the per-sample loss with respect to the logits.
fn output_hessian(loss: LossKind, logits: &[f64], out: &mut [f64]) {
    let c = logits.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    match loss {
        LossKind::SoftmaxCrossEntropy => {
            let p = softmax(logits);
            for a in 0..c {
                for b in 0..c {
                    out[a * c + b] = if a == b { p[a] * (1.0 - p[a]) } else { -p[a] * p[b] };
                }
            }
        }
        LossKind::MeanSquareError => {
            for a in 0..c {
                out[a * c + a] = 1.0;
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Exact Hessian diagonal of the mean loss over `ds`.
pub fn hessian_diag_exact(spec: &MlpSpec, params: &[f64], ds: &Dataset) -> Result<CurvatureDiag> {
    check(spec, params, ds)?;
    let layers = spec.layers();
    let mut tape = Tape::new(spec);
    let mut h = vec![0.0; params.len()];
    let c = spec.output_dim();
    let mut delta = vec![0.0; c];

    for s in 0..ds.len() {
        forward(spec, &layers, params, ds.input(s), &mut tape);
        output_loss(spec.loss, tape.logits(), ds.targets(), s, &mut delta);
        let mut hz = vec![0.0; c * c];
        output_hessian(spec.loss, tape.logits(), &mut hz);
        let mut width = c;
        let mut delta_cur = delta.clone();

        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            debug_assert_eq!(width, layer.n_out);
            let input = &tape.acts[l];
            for o in 0..layer.n_out {
                let hoo = hz[o * width + o];
                h[layer.bias_offset + o] += hoo;
                if hoo != 0.0 {
                    let row = &mut h[layer.weight(o, 0)..layer.weight(o, 0) + layer.n_in];
                    for (hv, a) in row.iter_mut().zip(input) {
                        *hv += a * a * hoo;
                    }
                }
            }
            if l == 0 {
                break;
            }

            // Move to the pre-activation of layer l - 1.
            let n_in = layer.n_in;
            let pre = &tape.pre[l - 1];
            let act = &tape.acts[l];
            let mut grad_a = vec![0.0; n_in];
            for (i, g) in grad_a.iter_mut().enumerate() {
                *g = (0..layer.n_out)
                    .map(|o| params[layer.weight(o, i)] * delta_cur[o])
                    .sum();
            }
            let d1: Vec<f64> = (0..n_in)
                .map(|i| spec.activation.derivative(pre[i], act[i]))
                .collect();
            let d2: Vec<f64> = (0..n_in)
                .map(|i| spec.activation.second_derivative(act[i]) * grad_a[i])
                .collect();
            let active: Vec<usize> = (0..n_in).filter(|&i| d1[i] != 0.0 || d2[i] != 0.0).collect();

            // t = Hz · W restricted to active columns.
            let mut t = vec![0.0; layer.n_out * active.len()];
            for o in 0..layer.n_out {
                for o2 in 0..layer.n_out {
                    let hv = hz[o * width + o2];
                    if hv == 0.0 {
                        continue;
                    }
                    for (k, &j) in active.iter().enumerate() {
                        t[o * active.len() + k] += hv * params[layer.weight(o2, j)];
                    }
                }
            }
            // The first layer only reads the diagonal.
            let diagonal_only = l == 1;
            let mut next = vec![0.0; n_in * n_in];
            for (ki, &i) in active.iter().enumerate() {
                for (kj, &j) in active.iter().enumerate().skip(ki) {
                    if diagonal_only && kj != ki {
                        break;
                    }
                    let mut ha = 0.0;
                    for o in 0..layer.n_out {
                        ha += params[layer.weight(o, i)] * t[o * active.len() + kj];
                    }
                    let mut v = d1[i] * ha * d1[j];
                    if i == j {
                        v += d2[i];
                    }
                    next[i * n_in + j] = v;
                    next[j * n_in + i] = v;
                }
            }
            delta_cur = (0..n_in).map(|i| d1[i] * grad_a[i]).collect();
            hz = next;
            width = n_in;
        }
    }
    finish(h, ds.len(), CurvatureSource::ExactHessian)
}

/// Diagonal Gauss-Newton approximation, one backward pass per sample.
pub fn hessian_diag_gn(spec: &MlpSpec, params: &[f64], ds: &Dataset) -> Result<CurvatureDiag> {
    check(spec, params, ds)?;
    let layers = spec.layers();
    let mut tape = Tape::new(spec);
    let mut h = vec![0.0; params.len()];

    for s in 0..ds.len() {
        forward(spec, &layers, params, ds.input(s), &mut tape);
        let mut hz: Vec<f64> = match spec.loss {
            LossKind::SoftmaxCrossEntropy => softmax(tape.logits())
                .into_iter()
                .map(|p| p * (1.0 - p))
                .collect(),
            LossKind::MeanSquareError => vec![1.0; spec.output_dim()],
        };
        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            let input = &tape.acts[l];
            for (o, &hoo) in hz.iter().enumerate() {
                h[layer.bias_offset + o] += hoo;
                let row = &mut h[layer.weight(o, 0)..layer.weight(o, 0) + layer.n_in];
                for (hv, a) in row.iter_mut().zip(input) {
                    *hv += a * a * hoo;
                }
            }
            if l == 0 {
                break;
            }
            let pre = &tape.pre[l - 1];
            let act = &tape.acts[l];
            hz = (0..layer.n_in)
                .map(|i| {
                    let d = spec.activation.derivative(pre[i], act[i]);
                    if d == 0.0 {
                        return 0.0;
                    }
                    let ha: f64 = hz
                        .iter()
                        .enumerate()
                        .map(|(o, &hoo)| {
                            let w = params[layer.weight(o, i)];
                            w * w * hoo
                        })
                        .sum();
                    d * d * ha
                })
                .collect();
        }
    }
    finish(h, ds.len(), CurvatureSource::GaussNewton)
}

/// Central differences of the analytic gradient, `h_ii ≈ (g_i(w + δe_i) −
/// g_i(w − δe_i)) / 2δ`. Costs two full gradient passes per parameter.
pub fn hessian_diag_finite_diff(
    spec: &MlpSpec,
    params: &[f64],
    ds: &Dataset,
    step: f64,
) -> Result<CurvatureDiag> {
    check(spec, params, ds)?;
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut w = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    let mut h = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        w[i] = params[i] + step;
        loss_and_grad_into(spec, &w, ds, &indices, &mut grad)?;
        let plus = grad[i];
        w[i] = params[i] - step;
        loss_and_grad_into(spec, &w, ds, &indices, &mut grad)?;
        let minus = grad[i];
        w[i] = params[i];
        // `finish` divides by the sample count, so undo the mean here.
        h.push((plus - minus) / (2.0 * step) * ds.len() as f64);
    }
    finish(h, ds.len(), CurvatureSource::ExactHessian)
}

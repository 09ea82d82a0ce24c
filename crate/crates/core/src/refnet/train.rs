use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{eval_accuracy, loss_and_grad_into, mean_loss, Activation, Dataset, MlpSpec};
use crate::store::{CurvatureDiag, CurvatureSource, ParamSet};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

/// Adam moment estimates at the last completed step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        AdamState {
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    /// `v / (1 − β2^t)`; the raw moments when no step has been taken.
    pub fn bias_corrected_second_moment(&self) -> Vec<f64> {
        if self.step == 0 {
            return self.second_moment.clone();
        }
        let correction = 1.0 - self.beta2.powf(self.step as f64);
        self.second_moment.iter().map(|v| v / correction).collect()
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            let g = grad[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            params[i] -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: ParamSet,
    /// Mean loss over the whole training split after the last step.
    pub final_loss: f64,
    pub eval_accuracy: f64,
    pub adam: AdamState,
}

/// Seeded initialisation: normal He (ReLU) or Glorot (otherwise) weights,
/// zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let std = match spec.activation {
            Activation::Relu => (2.0 / layer.n_in as f64).sqrt(),
            _ => (2.0 / (layer.n_in + layer.n_out) as f64).sqrt(),
        };
        let normal = Normal::new(0.0, std).expect("finite positive std");
        for v in &mut w[layer.weight_offset..layer.bias_offset] {
            *v = normal.sample(&mut rng);
        }
    }
    w
}

/// Minibatch Adam on `train`; accuracy is measured on `eval`.
pub fn train_adam(
    spec: &MlpSpec,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut params = init_params(spec, cfg.seed);
    let mut adam = AdamState::new(params.len(), cfg);
    let mut grad = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let loss = loss_and_grad_into(spec, &params, train, &order[cursor..end], &mut grad)?;
        cursor = end;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "training diverged at step {step} (loss {loss})"
            )));
        }
        adam.update(&mut params, &grad);
    }

    let final_loss = mean_loss(spec, &params, train)?;
    if !final_loss.is_finite() {
        return Err(Error::Numeric("final training loss is not finite".into()));
    }
    let eval_accuracy = eval_accuracy(spec, &params, eval)?;
    Ok(TrainedModel {
        params: ParamSet::new(params, spec.spans(), 32)?,
        final_loss,
        eval_accuracy,
        adam,
    })
}

/// Curvature proxy from Adam: `sqrt(v̂_i) + eps_alt` per parameter.
pub fn adam_curvature(state: &AdamState, eps_alt: f64) -> Result<CurvatureDiag> {
    if state.first_moment.len() != state.second_moment.len() {
        return Err(Error::LengthMismatch {
            what: "adam second moment",
            expected: state.first_moment.len(),
            got: state.second_moment.len(),
        });
    }
    let values = state
        .bias_corrected_second_moment()
        .into_iter()
        .map(|v| v.max(0.0).sqrt() + eps_alt)
        .collect();
    CurvatureDiag::new(values, CurvatureSource::AdamSqrtMoment)
}

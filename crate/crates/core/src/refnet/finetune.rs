use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{eval_accuracy, loss_and_grad_into, Dataset, MlpSpec};
use crate::quantizers::{scatter_dequantized, Assignment, Codebook};
use crate::{Error, Result};

/// Plain SGD on the shared centres at a constant learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            steps: 200,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuned {
    pub codebook: Codebook,
    pub accuracy: f64,
}

/// Gradient of every shared centre: the sum of the gradients of its members.
/// `positions[i]` is the index in `grad` of quantized entry `i`; `None`
/// means the quantized entries are the whole vector.
pub fn center_gradients(
    grad: &[f64],
    positions: Option<&[usize]>,
    assignment: &Assignment,
    k: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for (i, &j) in assignment.indices().iter().enumerate() {
        let p = positions.map_or(i, |pos| pos[i]);
        out[j] += grad[p];
    }
    out
}

/// Fine-tunes the cluster centres with assignments frozen. Pruned entries
/// (those not listed in `positions`) stay at zero throughout.
pub fn fine_tune_centers(
    spec: &MlpSpec,
    positions: Option<&[usize]>,
    assignment: &Assignment,
    codebook: &Codebook,
    train: &Dataset,
    eval: &Dataset,
    cfg: &FineTuneConfig,
) -> Result<FineTuned> {
    let n = spec.param_count();
    let quantized = positions.map_or(n, <[usize]>::len);
    if assignment.len() != quantized {
        return Err(Error::LengthMismatch {
            what: "assignment",
            expected: quantized,
            got: assignment.len(),
        });
    }
    if cfg.batch_size == 0 || train.is_empty() {
        return Err(Error::InvalidArgument(
            "fine-tuning needs a nonempty training split and batch".into(),
        ));
    }

    let mut centers = codebook.centers().to_vec();
    let mut grad = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let book = codebook.with_centers(centers.clone())?;
        let w = scatter_dequantized(n, positions, assignment, &book)?;
        let loss = loss_and_grad_into(spec, &w, train, &order[cursor..end], &mut grad)?;
        cursor = end;
        let g = center_gradients(&grad, positions, assignment, centers.len());
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("fine-tuning diverged at step {step}")));
        }
        for (c, gj) in centers.iter_mut().zip(&g) {
            *c -= cfg.learning_rate * gj;
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric(format!("fine-tuning diverged at step {step}")));
        }
    }

    let codebook = codebook.with_centers(centers)?;
    let w = scatter_dequantized(n, positions, assignment, &codebook)?;
    let accuracy = eval_accuracy(spec, &w, eval)?;
    Ok(FineTuned { codebook, accuracy })
}

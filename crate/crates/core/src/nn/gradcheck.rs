use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::LossWeights;
use super::model::Model;
use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Parameters compared per check.
pub const FD_SAMPLES: usize = 100;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// A batch of windows with their labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<[f64; 6]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares analytic parameter gradients of the combined loss against central
/// differences on a seeded random subsample of parameters.
pub fn grad_check(model: &Model, batch: &Batch, weights: &LossWeights, seed: u64) -> Result<GradCheck> {
    if batch.inputs.is_empty() {
        return Err(invalid("empty batch"));
    }
    let (_, grads) = model.loss_and_gradients(&batch.inputs, &batch.labels, weights)?;
    let flat: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |k| (i, k)))
        .collect();
    let n = FD_SAMPLES.min(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, flat.len(), n);

    let loss_at = |i: usize, k: usize, delta: f64| -> Result<f64> {
        let mut m = model.clone();
        m.params_mut()[i].data_mut()[k] += delta;
        Ok(m.loss_and_gradients(&batch.inputs, &batch.labels, weights)?.0.total)
    };
    let mut worst: f64 = 0.0;
    for idx in picks.iter() {
        let (i, k) = flat[idx];
        let numeric = (loss_at(i, k, FD_STEP)? - loss_at(i, k, -FD_STEP)?) / (2.0 * FD_STEP);
        let analytic = grads[i][k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked: n,
    })
}

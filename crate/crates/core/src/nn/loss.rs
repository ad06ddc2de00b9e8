//! Regression losses over a batch of six-component predictions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Below this population standard deviation a DOF's correlation is taken as 0.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// A loss value and its gradient with respect to every prediction entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<[f64; 6]>,
}

/// Weights of the combined objective `mse * L_mse + corr * L_corr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub corr: f64,
    /// Per-DOF factors applied inside the squared-error mean.
    #[serde(default = "unit_dof_weights")]
    pub dof: [f64; 6],
}

fn unit_dof_weights() -> [f64; 6] {
    [1.0; 6]
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::new(1.0, 1.0)
    }
}

impl LossWeights {
    pub fn new(mse: f64, corr: f64) -> Self {
        Self {
            mse,
            corr,
            dof: unit_dof_weights(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mse, self.corr].into_iter().chain(self.dof);
        if all.clone().any(|w| !w.is_finite() || w < 0.0) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Components of the combined loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub mse: f64,
    /// `NaN` when fewer than two rows make the correlation undefined.
    pub corr: f64,
    pub grad: Vec<[f64; 6]>,
}

fn check_shapes(preds: &[[f64; 6]], labels: &[[f64; 6]]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(invalid("empty batch"));
    }
    Ok(())
}

/// Mean squared error over all `K * 6` entries.
pub fn loss_mse(preds: &[[f64; 6]], labels: &[[f64; 6]]) -> Result<LossValue> {
    loss_mse_weighted(preds, labels, &[1.0; 6])
}

/// Squared error mean with per-DOF weights.
pub fn loss_mse_weighted(
    preds: &[[f64; 6]],
    labels: &[[f64; 6]],
    dof: &[f64; 6],
) -> Result<LossValue> {
    check_shapes(preds, labels)?;
    let n = (preds.len() * 6) as f64;
    let mut value = 0.0;
    let grad = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            std::array::from_fn(|d| {
                let e = p[d] - y[d];
                value += dof[d] * e * e;
                2.0 * dof[d] * e / n
            })
        })
        .collect();
    Ok(LossValue {
        value: value / n,
        grad,
    })
}

/// `1 - mean_d pearson(labels[:, d], preds[:, d])` across the batch rows.
pub fn loss_case_correlation(preds: &[[f64; 6]], labels: &[[f64; 6]]) -> Result<LossValue> {
    check_shapes(preds, labels)?;
    let k = preds.len();
    if k < 2 {
        return Err(invalid("case-wise correlation needs at least two rows"));
    }
    let kf = k as f64;
    let mut grad = vec![[0.0; 6]; k];
    let mut rho_sum = 0.0;
    for d in 0..6 {
        let pm = preds.iter().map(|r| r[d]).sum::<f64>() / kf;
        let ym = labels.iter().map(|r| r[d]).sum::<f64>() / kf;
        let (mut sp, mut sy, mut spy) = (0.0, 0.0, 0.0);
        for (p, y) in preds.iter().zip(labels) {
            let (a, b) = (p[d] - pm, y[d] - ym);
            sp += a * a;
            sy += b * b;
            spy += a * b;
        }
        if (sp / kf).sqrt() < SIGMA_FLOOR || (sy / kf).sqrt() < SIGMA_FLOOR {
            continue;
        }
        let root = (sp * sy).sqrt();
        let rho = spy / root;
        rho_sum += rho;
        // d rho / d p_k = y~_k / sqrt(Sp Sy) - rho p~_k / Sp; centring terms cancel.
        for ((g, p), y) in grad.iter_mut().zip(preds).zip(labels) {
            let drho = (y[d] - ym) / root - rho * (p[d] - pm) / sp;
            g[d] = -drho / 6.0;
        }
    }
    Ok(LossValue {
        value: 1.0 - rho_sum / 6.0,
        grad,
    })
}

/// Weighted sum of both losses. The correlation term is skipped (and reported
/// as `NaN`) when its weight is zero and the batch has a single row.
pub fn total_loss(
    preds: &[[f64; 6]],
    labels: &[[f64; 6]],
    weights: &LossWeights,
) -> Result<TotalLoss> {
    weights.validate()?;
    let mse = loss_mse_weighted(preds, labels, &weights.dof)?;
    let corr = if preds.len() >= 2 || weights.corr > 0.0 {
        Some(loss_case_correlation(preds, labels)?)
    } else {
        None
    };
    let mut grad: Vec<[f64; 6]> = mse
        .grad
        .iter()
        .map(|g| g.map(|v| weights.mse * v))
        .collect();
    let mut total = weights.mse * mse.value;
    if let Some(c) = &corr {
        total += weights.corr * c.value;
        for (g, cg) in grad.iter_mut().zip(&c.grad) {
            for d in 0..6 {
                g[d] += weights.corr * cg[d];
            }
        }
    }
    Ok(TotalLoss {
        total,
        mse: mse.value,
        corr: corr.map_or(f64::NAN, |c| c.value),
        grad,
    })
}

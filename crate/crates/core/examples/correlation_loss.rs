//! The case-wise correlation loss next to MSE on a hand-made batch.

use usrecon::nn::{loss_case_correlation, loss_mse, total_loss, LossWeights};

fn main() -> usrecon::Result<()> {
    // Four windows of one case: the true speed rises, the prediction tracks it
    // with an offset and a compressed range.
    let labels: Vec<[f64; 6]> = (0..4)
        .map(|k| {
            let s = 0.5 + 0.1 * k as f64;
            [0.0, 0.01 * k as f64, s, 0.1 * s, -0.05 * k as f64, 0.02]
        })
        .collect();
    let tracking: Vec<[f64; 6]> = labels.iter().map(|r| r.map(|v| 0.5 * v + 0.2)).collect();
    let flat = vec![[0.0, 0.015, 0.65, 0.065, -0.075, 0.02]; 4];

    for (name, preds) in [("tracking", &tracking), ("constant", &flat)] {
        let mse = loss_mse(preds, &labels)?;
        let corr = loss_case_correlation(preds, &labels)?;
        let both = total_loss(preds, &labels, &LossWeights::new(1.0, 1.0))?;
        println!(
            "{name:>9}: mse {:.4}  correlation loss {:.4}  total {:.4}",
            mse.value, corr.value, both.total
        );
    }
    // A constant prediction can have low MSE yet carries no within-case
    // information; the correlation term scores it at 1, tracking at 0.
    let g = loss_case_correlation(&tracking, &labels)?.grad;
    println!("gradient of the correlation loss, first row: {:?}", g[0]);
    Ok(())
}

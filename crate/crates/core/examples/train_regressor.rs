//! Trains a small multi-frame regressor, saves a checkpoint and reloads it.
//!
//! Pass an epoch count as the first argument (default 6).

use usrecon::benchmark::{case_windows, dataset_config, model_config, train_config};
use usrecon::metrics::evaluate_dataset;
use usrecon::nn::{init_model, load_checkpoint, save_checkpoint, train, LossWeights};
use usrecon::phantom::simulate_dataset;

fn main() -> usrecon::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(6);

    let training = simulate_dataset(&dataset_config(6), 1)?;
    let test = simulate_dataset(&dataset_config(3), 2)?;

    let model = init_model(&model_config(5))?;
    println!(
        "model: {} parameters, {} frames per window",
        model.param_count(),
        model.window_len()
    );

    let cases = case_windows(&training, 5)?;
    let mut cfg = train_config(LossWeights::new(1.0, 1.0));
    cfg.epochs = epochs;
    cfg.steps_per_epoch = Some(20);
    let (model, history) = train(model, &cases, &cfg)?;
    for h in &history {
        println!(
            "epoch {:>3}  lr {:.2e}  mse {:.5}  corr {:.4}  total {:.5}",
            h.epoch, h.lr, h.mse, h.corr, h.total
        );
    }

    let path = std::env::temp_dir().join("usrecon_example.ckpt");
    save_checkpoint(&path, &model, epochs, cfg.seed)?;
    let (reloaded, header) = load_checkpoint(&path)?;
    assert_eq!(reloaded.params(), model.params());
    println!(
        "checkpoint round-trip ok: {} (epoch {})",
        path.display(),
        header.epoch
    );

    let report = evaluate_dataset("regressor", &reloaded, &test)?;
    print!("{}", report.to_table());
    Ok(())
}

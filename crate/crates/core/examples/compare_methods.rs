//! Full synthetic comparison: linear motion, speckle decorrelation and
//! regressors with N = 2 and N = 5 frames, plus an MSE-only ablation.
//!
//! Takes several minutes in release mode.

use std::time::Instant;

use usrecon::baselines::{calibrate_decorrelation, fit_linear_motion, Decorrelation, LinearMotion};
use usrecon::baselines::{DecorrelationOptions, DEFAULT_PATCH};
use usrecon::benchmark::{
    case_windows, dataset_config, model_config, train_config, TEST_SCANS, TEST_SEED, TRAIN_SCANS,
    TRAIN_SEED,
};
use usrecon::metrics::{evaluate_dataset, EvalReport};
use usrecon::nn::{init_model, train, LossWeights};
use usrecon::phantom::simulate_dataset;

fn row(r: &EvalReport) {
    println!(
        "{:<22} {:>10.3} {:>10.3} {:>10.3}",
        r.method, r.distance_error.average, r.final_drift.average, r.correlation_overall.mean
    );
}

fn main() -> usrecon::Result<()> {
    let start = Instant::now();
    let training = simulate_dataset(&dataset_config(TRAIN_SCANS), TRAIN_SEED)?;
    let test = simulate_dataset(&dataset_config(TEST_SCANS), TEST_SEED)?;

    let mut reports = Vec::new();
    let linear = LinearMotion {
        motion: fit_linear_motion(&training)?,
    };
    reports.push(evaluate_dataset("linear motion", &linear, &test)?);
    let decorr = Decorrelation {
        curve: calibrate_decorrelation(&training, DEFAULT_PATCH)?,
        options: DecorrelationOptions::default(),
    };
    reports.push(evaluate_dataset("decorrelation", &decorr, &test)?);

    for (name, n, corr) in [
        ("regressor N=2", 2, 1.0),
        ("regressor N=5", 5, 1.0),
        ("regressor N=5 MSE only", 5, 0.0),
    ] {
        let cases = case_windows(&training, n)?;
        let cfg = train_config(LossWeights::new(1.0, corr));
        let (model, _) = train(init_model(&model_config(n))?, &cases, &cfg)?;
        reports.push(evaluate_dataset(name, &model, &test)?);
        println!("trained {name} ({:.0} s elapsed)", start.elapsed().as_secs_f64());
    }

    println!(
        "\n{:<22} {:>10} {:>10} {:>10}",
        "method", "dist (mm)", "drift (mm)", "corr"
    );
    for r in &reports {
        row(r);
    }
    Ok(())
}

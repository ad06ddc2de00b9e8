//! Speckle correlation maps and the calibrated decorrelation estimator.

use usrecon::baselines::{
    calibrate_decorrelation, speckle_correlation_map, Decorrelation, DecorrelationOptions,
    DEFAULT_PATCH,
};
use usrecon::metrics::evaluate_dataset;
use usrecon::phantom::{simulate_dataset, SimulationConfig};

fn main() -> usrecon::Result<()> {
    let mut cfg = SimulationConfig::desk_default();
    cfg.phantom.dims = [96, 80, 80];
    cfg.n_frames = 40;
    cfg.n_scans = 3;
    let training = simulate_dataset(&cfg, 1)?;
    let test = simulate_dataset(&cfg, 2)?;

    let scan = &training[0];
    for gap in [1, 2, 4] {
        let map = speckle_correlation_map(&scan.frames()[0], &scan.frames()[gap], DEFAULT_PATCH)?;
        println!("frame gap {gap}: mean patch correlation {:.3}", map.mean());
    }

    let curve = calibrate_decorrelation(&training, DEFAULT_PATCH)?;
    println!(
        "calibrated width w = {:.3} mm (rho = exp(-dz^2 / 2w^2)), usable up to {:.2} mm",
        curve.w, curve.max_dz
    );
    for rho in [0.9, 0.7, 0.5] {
        println!("  rho {rho:.1} -> dz {:.3} mm", curve.distance_for(rho));
    }

    let est = Decorrelation {
        curve,
        options: DecorrelationOptions::default(),
    };
    let report = evaluate_dataset("decorrelation", &est, &test)?;
    print!("{}", report.to_table());
    Ok(())
}

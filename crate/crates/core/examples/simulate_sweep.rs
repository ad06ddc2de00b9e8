//! Simulates a speckle phantom sweep, writes it to disk and reads it back.

use usrecon::geom::Pose;
use usrecon::io::{load_scan, make_windows, save_scan};
use usrecon::phantom::{
    centered_origin, generate_phantom, simulate_scan, PhantomParams, Sweep,
};
use usrecon::{DofVector, FrameGeometry, TrajectorySpec};

fn main() -> usrecon::Result<()> {
    let params = PhantomParams {
        dims: [96, 64, 64],
        spacing: 0.5,
        n_inclusions: 4,
    };
    let mut phantom = generate_phantom(&params, 42)?;
    phantom.origin = centered_origin(&params, 4.0);

    let sweep = Sweep {
        trajectory: TrajectorySpec::sinusoidal(
            DofVector::translation(0.0, 0.0, 0.6),
            DofVector::new(0.05, 0.0, 0.25, 0.3, 0.0, 0.0),
            20.0,
        ),
        n_frames: 40,
        geometry: FrameGeometry::new(48, 48, 0.5, 0.5)?,
        start: Pose::identity(),
        noise_sd: 0.02,
    };
    let scan = simulate_scan(&phantom, &sweep, 7, "demo")?;
    println!("simulated {} frames of {}x{}", scan.len(), sweep.geometry.width, sweep.geometry.height);

    let dir = std::env::temp_dir().join("usrecon_simulate_sweep");
    save_scan(&scan, &dir)?;
    let loaded = load_scan(&dir)?;
    println!("reloaded '{}' from {}", loaded.id, dir.display());

    for n in [2, 5] {
        let windows = make_windows(&loaded, n, 1)?;
        let first = windows[0].label.expect("simulated scans carry poses");
        println!(
            "N = {n}: {} windows, first label tz = {:.4} mm",
            windows.len(),
            first.tz
        );
    }
    Ok(())
}

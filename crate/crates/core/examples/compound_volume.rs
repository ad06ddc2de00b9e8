//! Compounds a simulated sweep with its true poses and compares the result
//! with the phantom it was sliced from.

use usrecon::geom::Pose;
use usrecon::metrics::normalized_cross_correlation;
use usrecon::phantom::{centered_origin, generate_phantom, simulate_scan, PhantomParams, Sweep};
use usrecon::reconstruct::{compound_with_coverage, Coverage};
use usrecon::{DofVector, FrameGeometry, TrajectorySpec};

fn main() -> usrecon::Result<()> {
    let params = PhantomParams {
        dims: [80, 64, 64],
        spacing: 0.5,
        n_inclusions: 4,
    };
    let mut phantom = generate_phantom(&params, 3)?;
    phantom.origin = centered_origin(&params, 4.0);
    let g = FrameGeometry::new(48, 48, 0.5, 0.5)?;
    let sweep = Sweep {
        trajectory: TrajectorySpec::sinusoidal(
            DofVector::translation(0.0, 0.0, 0.5),
            DofVector::new(0.05, 0.05, 0.2, 0.3, 0.3, 0.3),
            20.0,
        ),
        n_frames: 50,
        geometry: g,
        start: Pose::identity(),
        noise_sd: 0.02,
    };
    let scan = simulate_scan(&phantom, &sweep, 5, "sweep")?;
    let poses = scan.poses().expect("simulated scans carry poses");
    let c = compound_with_coverage(scan.frames(), poses, &g, 0.5)?;

    let (mut rec, mut truth) = (Vec::new(), Vec::new());
    let [d, h, w] = c.volume.dims;
    let mut counts = [0usize; 3];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = c.volume.index(z, y, x);
                counts[c.coverage[i] as usize] += 1;
                if c.coverage[i] == Coverage::Hit {
                    rec.push(c.volume.voxels[i] as f64);
                    truth.push(phantom.sample(&c.volume.voxel_center(z, y, x)));
                }
            }
        }
    }
    println!("volume {:?} voxels at {} mm", c.volume.dims, c.volume.spacing);
    println!("empty {}, hit {}, filled {}", counts[0], counts[1], counts[2]);
    let ncc = normalized_cross_correlation(&rec, &truth)?;
    println!("NCC against the phantom over hit voxels: {ncc:.4}");

    let out = std::env::temp_dir().join("usrecon_compound_volume");
    c.volume.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}


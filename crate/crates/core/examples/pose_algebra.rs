//! Rigid-transform algebra: 6-DOF round trips, relative motion, window labels
//! and trajectory accumulation.

use usrecon::geom::{
    accumulate_trajectory, dof_from_pose, frame_corners, mean_dof, pose_from_dof, relative_dofs,
    relative_pose,
};
use usrecon::{DofVector, FrameGeometry, Pose};

fn main() -> usrecon::Result<()> {
    let theta = DofVector::new(1.5, -0.4, 2.0, 3.0, -12.0, 25.0);
    let pose = pose_from_dof(&theta)?;
    let back = dof_from_pose(&pose)?;
    println!("dof       {:?}", theta.to_array());
    println!("recovered {:?}", back.to_array());
    println!("max round-trip error {:.2e}", theta.max_abs_diff(&back));

    // Motion of frame i+1 relative to frame i, expressed as a 6-DOF vector.
    let next = pose_from_dof(&DofVector::new(1.7, -0.3, 2.6, 3.2, -11.5, 25.4))?;
    let step = dof_from_pose(&relative_pose(&pose, &next))?;
    println!("relative step {:?}", step.to_array());

    // A sweep at varying speed and the mean-motion label of its first 5 frames.
    let steps: Vec<DofVector> = (0..8)
        .map(|i| DofVector::new(0.0, 0.05, 0.5 + 0.05 * i as f64, 0.2, 0.0, -0.1))
        .collect();
    let poses = accumulate_trajectory(&Pose::identity(), &steps)?;
    let rel = relative_dofs(&poses)?;
    let label = mean_dof(&rel[..4])?;
    println!("window label (N = 5) {:?}", label.to_array());

    let g = FrameGeometry::new(64, 64, 0.5, 0.5)?;
    for (k, c) in frame_corners(poses.last().expect("non-empty"), &g).iter().enumerate() {
        println!("last frame corner {k}: ({:.3}, {:.3}, {:.3}) mm", c.x, c.y, c.z);
    }
    Ok(())
}

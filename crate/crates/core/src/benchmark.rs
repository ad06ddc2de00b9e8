//! Fixed desk-scale comparison setup: sinusoidal-motion sweeps through
//! per-scan phantoms, a toy regressor and its training schedule.
//!
//! Used by the `compare_methods` example and the acceptance suite so both
//! run exactly the same experiment.

use crate::geom::{DofVector, FrameGeometry};
use crate::io::make_windows;
use crate::nn::{BlockConfig, CaseWindows, LossWeights, ModelConfig, TrainConfig};
use crate::phantom::{PhantomParams, SimulationConfig, TrajectoryKind, TrajectorySpec, Variation};
use crate::{Result, ScanSequence};

pub const TRAIN_SEED: u64 = 1;
pub const TEST_SEED: u64 = 2;
pub const TRAIN_SCANS: usize = 16;
pub const TEST_SCANS: usize = 10;
pub const FRAME_SIZE: usize = 32;

/// Simulation config for `n_scans` sweeps of 60 frames at 32x32.
pub fn dataset_config(n_scans: usize) -> SimulationConfig {
    SimulationConfig {
        phantom: PhantomParams {
            dims: [128, 64, 64],
            spacing: 0.5,
            n_inclusions: 4,
        },
        trajectory: TrajectorySpec {
            kind: TrajectoryKind::Sinusoidal,
            base: DofVector::new(0.0, 0.0, 0.6, 0.0, 0.0, 0.0),
            amplitude: DofVector::new(0.05, 0.05, 0.2, 0.2, 0.2, 0.2),
            period: 20.0,
            phase: 0.0,
            jitter: DofVector::ZERO,
        },
        variation: Variation {
            base_spread: DofVector::new(0.01, 0.01, 0.2, 0.02, 0.02, 0.02),
            period_range: Some([12.0, 40.0]),
            random_phase: true,
        },
        n_frames: 60,
        geometry: FrameGeometry {
            width: FRAME_SIZE,
            height: FRAME_SIZE,
            spacing_x: 0.5,
            spacing_y: 0.5,
        },
        noise_sd: 0.02,
        n_scans,
        start_margin_mm: 4.0,
        phantom_per_scan: true,
    }
}

/// Toy regressor taking `frames` consecutive frames.
pub fn model_config(frames: usize) -> ModelConfig {
    ModelConfig {
        frames,
        height: FRAME_SIZE,
        width: FRAME_SIZE,
        blocks: vec![
            BlockConfig::new(8, 2, 2),
            BlockConfig::new(12, 4, 2),
            BlockConfig::new(16, 4, 2),
        ],
        attention: true,
        attention_width: 8,
        head_width: 16,
        seed: 3,
    }
}

/// 40 epochs of 40 steps, K = 8 windows per step.
pub fn train_config(loss: LossWeights) -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 8,
        learning_rate: 3e-3,
        decay_factor: 0.9,
        decay_interval: 4,
        loss,
        seed: 4,
        steps_per_epoch: Some(40),
    }
}

/// Stride-1 windows of `n` frames for every scan.
pub fn case_windows(scans: &[ScanSequence], n: usize) -> Result<Vec<CaseWindows<'_>>> {
    scans
        .iter()
        .map(|scan| {
            Ok(CaseWindows {
                scan,
                windows: make_windows(scan, n, 1)?,
            })
        })
        .collect()
}

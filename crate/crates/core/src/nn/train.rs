use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use super::model::{window_tensor, Model};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};
use crate::io::{ScanSequence, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows drawn from one case per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub loss: LossWeights,
    pub seed: u64,
    /// Steps per epoch; by default enough to visit every window once on average.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 20,
            learning_rate: 5e-5,
            decay_factor: 0.9,
            decay_interval: 5,
            loss: LossWeights::default(),
            seed: 0,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid("learning rate must be finite and non-negative"));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(invalid("decay factor must be positive"));
        }
        if self.decay_interval == 0 {
            return Err(invalid("decay interval must be at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if self.loss.corr > 0.0 && self.batch_size < 2 {
            return Err(invalid("correlation loss needs a batch of at least 2"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(invalid("steps per epoch must be positive"));
        }
        self.loss.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }
}

/// Labelled windows of one scan.
#[derive(Debug, Clone)]
pub struct CaseWindows<'a> {
    pub scan: &'a ScanSequence,
    pub windows: Vec<Window>,
}

/// Per-epoch means of the loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mse: f64,
    pub corr: f64,
    pub total: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &Model) -> Self {
        let zeros = || model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Optimises `model` with Adam. Each step picks one eligible case uniformly,
/// then `batch_size` distinct windows from it.
pub fn train(
    mut model: Model,
    cases: &[CaseWindows<'_>],
    cfg: &TrainConfig,
) -> Result<(Model, Vec<EpochRecord>)> {
    cfg.validate()?;
    let k = cfg.batch_size;
    for c in cases {
        if c.windows.iter().any(|w| w.label.is_none()) {
            return Err(invalid(format!("case {} has unlabelled windows", c.scan.id)));
        }
        if c.windows.iter().any(|w| w.len != model.window_len()) {
            return Err(invalid(format!(
                "case {}: window length differs from the model's {}",
                c.scan.id,
                model.window_len()
            )));
        }
    }
    let eligible: Vec<&CaseWindows<'_>> = cases.iter().filter(|c| c.windows.len() >= k).collect();
    if eligible.is_empty() {
        return Err(invalid(format!("no case has at least {k} windows")));
    }
    let total_windows: usize = eligible.iter().map(|c| c.windows.len()).sum();
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| total_windows.div_ceil(k));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut mse, mut corr, mut total) = (0.0, 0.0, 0.0);
        for _ in 0..steps {
            let case = eligible[rng.random_range(0..eligible.len())];
            let picks = sample(&mut rng, case.windows.len(), k);
            let mut inputs = Vec::with_capacity(k);
            let mut labels = Vec::with_capacity(k);
            for i in picks.iter() {
                let w = &case.windows[i];
                inputs.push(window_tensor(w.frames(case.scan))?);
                labels.push(w.label.expect("checked above").to_array());
            }
            let (loss, grads) = model.loss_and_gradients(&inputs, &labels, &cfg.loss)?;
            if !loss.total.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "loss diverged at epoch {epoch}"
                )));
            }
            mse += loss.mse;
            corr += loss.corr;
            total += loss.total;
            adam.step(model.params_mut(), &grads, lr);
        }
        let n = steps as f64;
        history.push(EpochRecord {
            epoch,
            lr,
            mse: mse / n,
            corr: corr / n,
            total: total / n,
        });
    }
    Ok((model, history))
}

/// Writes `epoch,lr,mse,corr,total` rows.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// History rendered as CSV text.
pub fn history_csv(history: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in history {
        w.serialize(r)?;
    }
    let mut bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    bytes.flush()?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{DofVector, FrameGeometry, Pose};
    use crate::io::make_windows;
    use crate::nn::model::{init_model, BlockConfig, ModelConfig};
    use crate::phantom::{
        centered_origin, generate_phantom, simulate_scan, PhantomParams, Sweep, TrajectorySpec,
    };

    fn small_scan(tz: f64, seed: u64) -> ScanSequence {
        let params = PhantomParams {
            dims: [32, 32, 32],
            spacing: 0.5,
            n_inclusions: 2,
        };
        let mut phantom = generate_phantom(&params, seed).unwrap();
        phantom.origin = centered_origin(&params, 4.0);
        let sweep = Sweep {
            trajectory: TrajectorySpec::constant(DofVector::new(0.0, 0.0, tz, 0.0, 0.0, 0.0)),
            n_frames: 14,
            geometry: FrameGeometry::new(12, 12, 0.5, 0.5).unwrap(),
            start: Pose::identity(),
            noise_sd: 0.0,
        };
        simulate_scan(&phantom, &sweep, seed, "t").unwrap()
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            frames: 2,
            height: 12,
            width: 12,
            blocks: vec![BlockConfig::new(4, 2, 2)],
            attention: true,
            attention_width: 4,
            head_width: 0,
            seed: 1,
        }
    }

    fn quick(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: lr,
            decay_factor: 0.9,
            decay_interval: 5,
            loss: LossWeights::new(1.0, 0.0),
            seed: 7,
            steps_per_epoch: Some(2),
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let scan = small_scan(0.4, 1);
        let cases = [CaseWindows {
            scan: &scan,
            windows: make_windows(&scan, 2, 1).unwrap(),
        }];
        let m = init_model(&model_cfg()).unwrap();
        let (out, hist) = train(m.clone(), &cases, &quick(1, 0.0)).unwrap();
        assert_eq!(out.params(), m.params());
        assert_eq!(hist.len(), 1);
    }

    #[test]
    fn same_seed_same_result() {
        let scan = small_scan(0.4, 2);
        let cases = [CaseWindows {
            scan: &scan,
            windows: make_windows(&scan, 2, 1).unwrap(),
        }];
        let m = init_model(&model_cfg()).unwrap();
        let (a, ha) = train(m.clone(), &cases, &quick(3, 1e-3)).unwrap();
        let (b, hb) = train(m, &cases, &quick(3, 1e-3)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ha, hb);
    }

    #[test]
    fn too_few_windows_is_rejected() {
        let scan = small_scan(0.4, 3);
        let cases = [CaseWindows {
            scan: &scan,
            windows: make_windows(&scan, 2, 1).unwrap()[..3].to_vec(),
        }];
        let m = init_model(&model_cfg()).unwrap();
        assert!(train(m, &cases, &quick(1, 1e-3)).is_err());
    }

    #[test]
    fn correlation_needs_batch_of_two() {
        let mut cfg = quick(1, 1e-3);
        cfg.batch_size = 1;
        cfg.loss = LossWeights::new(1.0, 1.0);
        assert!(cfg.validate().is_err());
        cfg.loss = LossWeights::new(1.0, 0.0);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-5);
        assert_eq!(cfg.lr_at(4), 5e-5);
        assert!((cfg.lr_at(5) - 4.5e-5).abs() < 1e-18);
        assert!((cfg.lr_at(12) - 5e-5 * 0.81).abs() < 1e-18);
    }

    #[test]
    fn history_csv_round_trip() {
        let h = vec![
            EpochRecord { epoch: 0, lr: 1e-3, mse: 0.5, corr: 0.9, total: 1.4 },
            EpochRecord { epoch: 1, lr: 1e-3, mse: 0.25, corr: 0.8, total: 1.05 },
        ];
        let text = history_csv(&h).unwrap();
        assert!(text.starts_with("epoch,lr,mse,corr,total\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_history(&p, &h).unwrap();
        assert_eq!(read_history(&p).unwrap(), h);
    }
}

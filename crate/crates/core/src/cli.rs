//! Command-line front end. [`run`] parses arguments, dispatches to the
//! library, writes a `manifest.json` beside the outputs and maps failures to
//! exit codes: 2 for usage errors, 1 for runtime errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::{
    calibrate_decorrelation, fit_linear_motion, speckle_correlation_map, Decorrelation,
    DecorrelationOptions, LinearMotion, DEFAULT_PATCH,
};
use crate::error::{invalid, Error, Result};
use crate::geom::{DofVector, Pose};
use crate::io::{load_scans, make_windows, save_scan, ScanSequence};
use crate::metrics::{evaluate_dataset, evaluate_predictions, EvalReport};
use crate::nn::{
    init_model, load_checkpoint, save_checkpoint, train, write_history, CaseWindows, ModelConfig,
    TrainConfig,
};
use crate::phantom::{simulate_dataset, SimulationConfig};
use crate::reconstruct::{compound_volume, reconstruct_trajectory, sliding_window_predict, Estimator};

const PREDICTION_HEADER: [&str; 7] = ["interval", "tx", "ty", "tz", "ax", "ay", "az"];

#[derive(Debug, Parser)]
#[command(name = "usrecon", version, about = "Trackerless 3D ultrasound reconstruction toolkit")]
struct Cli {
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate scans of synthetic speckle phantoms.
    Simulate(SimulateArgs),
    /// Train the multi-frame regressor.
    Train(TrainArgs),
    /// Write per-interval motion estimates for every scan.
    Predict(PredictArgs),
    /// Compound scans into voxel volumes.
    Reconstruct(ReconstructArgs),
    /// Score an estimator against ground-truth poses.
    Evaluate(EvaluateArgs),
    /// Write speckle-correlation and attention maps as PGM images.
    Corrmap(CorrmapArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Simulation config JSON; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_scans: Option<usize>,
    #[arg(long)]
    n_frames: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    scans: PathBuf,
    /// Training config JSON with `model` and `train` sections.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path; history and manifest are written beside it.
    #[arg(long)]
    out: PathBuf,
    /// Overrides both the initialisation and the sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Linear,
    Decorrelation,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long, conflicts_with = "estimator")]
    model: Option<PathBuf>,
    #[arg(long, value_enum, required_unless_present = "model")]
    estimator: Option<Baseline>,
    /// Scans used to fit a baseline; the predicted scans when omitted.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    scans: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    scans: PathBuf,
    /// Directory of predicted motions; ground-truth poses when omitted.
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Output voxel spacing in mm; the pixel spacing when omitted.
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMethod {
    Linear,
    Decorrelation,
    Model,
    Predictions,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    estimator: EvalMethod,
    #[arg(long, required_if_eq("estimator", "model"))]
    model: Option<PathBuf>,
    #[arg(long, required_if_eq("estimator", "predictions"))]
    predictions: Option<PathBuf>,
    /// Scans used to fit a baseline; the evaluated scans when omitted.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    scans: PathBuf,
    /// Window length; must agree with the estimator.
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CorrmapArgs {
    #[arg(long)]
    scans: PathBuf,
    /// Case id; the first scan when omitted.
    #[arg(long)]
    case: Option<String>,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 1)]
    gap: usize,
    #[arg(long, default_value_t = DEFAULT_PATCH)]
    patch: usize,
    /// Also render the model's attention for the window starting at `--frame`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Training document: network shape, optimiser settings and window stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default = "one")]
    pub window_stride: usize,
}

fn one() -> usize {
    1
}

/// Provenance written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration_s: f64,
}

struct Outcome {
    config: Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let name = command_name(&cli.command);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(invalid("--workers must be at least 1"));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Corrmap(a) => corrmap(a),
    })?;
    let manifest = RunManifest {
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: outcome.config,
        seeds: outcome.seeds,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        duration_s: started.elapsed().as_secs_f64(),
    };
    write_atomic(&outcome.manifest, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Train(_) => "train",
        Command::Predict(_) => "predict",
        Command::Reconstruct(_) => "reconstruct",
        Command::Evaluate(_) => "evaluate",
        Command::Corrmap(_) => "corrmap",
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_nonempty(dir: &Path) -> Result<Vec<ScanSequence>> {
    let scans = load_scans(dir)?;
    if scans.is_empty() {
        return Err(invalid(format!("no scans found under {}", dir.display())));
    }
    Ok(scans)
}

fn simulate(a: SimulateArgs) -> Result<Outcome> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<SimulationConfig>(p)?,
        None => SimulationConfig::desk_default(),
    };
    if let Some(n) = a.n_scans {
        cfg.n_scans = n;
    }
    if let Some(n) = a.n_frames {
        cfg.n_frames = n;
    }
    if let Some(s) = a.noise {
        cfg.noise_sd = s;
    }
    let scans = simulate_dataset(&cfg, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    for s in &scans {
        let dir = a.out.join(&s.id);
        save_scan(s, &dir)?;
        outputs.push(dir);
    }
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        seeds: vec![a.seed],
        inputs: a.config.into_iter().collect(),
        outputs,
        manifest: a.out.join("manifest.json"),
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(a: TrainArgs) -> Result<Outcome> {
    let mut spec: TrainingSpec = read_json(&a.config)?;
    if let Some(s) = a.seed {
        spec.model.seed = s;
        spec.train.seed = s;
    }
    if let Some(e) = a.epochs {
        spec.train.epochs = e;
    }
    let scans = load_nonempty(&a.scans)?;
    let n = spec.model.frames;
    for s in &scans {
        if (s.geometry.width, s.geometry.height) != (spec.model.width, spec.model.height) {
            return Err(invalid(format!(
                "scan '{}' frames are {}x{}, the model expects {}x{}",
                s.id, s.geometry.width, s.geometry.height, spec.model.width, spec.model.height
            )));
        }
    }
    let cases = scans
        .iter()
        .map(|s| {
            Ok(CaseWindows {
                scan: s,
                windows: make_windows(s, n, spec.window_stride)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = init_model(&spec.model)?;
    let (model, history) = train(model, &cases, &spec.train)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&a.out, &model, spec.train.epochs, spec.train.seed)?;
    let hist = sibling(&a.out, ".history.csv");
    write_history(&hist, &history)?;
    Ok(Outcome {
        config: serde_json::to_value(&spec)?,
        seeds: vec![spec.model.seed, spec.train.seed],
        inputs: vec![a.scans, a.config],
        outputs: vec![a.out.clone(), hist],
        manifest: sibling(&a.out, ".manifest.json"),
    })
}

fn fit_baseline(kind: Baseline, fit_on: &[ScanSequence]) -> Result<(Estimator, Value)> {
    Ok(match kind {
        Baseline::Linear => {
            let motion = fit_linear_motion(fit_on)?;
            (
                Estimator::Linear(LinearMotion { motion }),
                json!({ "estimator": "linear", "motion": motion }),
            )
        }
        Baseline::Decorrelation => {
            let options = DecorrelationOptions::default();
            let curve = calibrate_decorrelation(fit_on, options.patch)?;
            (
                Estimator::Decorrelation(Decorrelation { curve, options }),
                json!({ "estimator": "decorrelation", "curve": curve, "options": options }),
            )
        }
    })
}

fn baseline_for(
    kind: Baseline,
    train_dir: Option<&Path>,
    scans: &[ScanSequence],
) -> Result<(Estimator, Value, Vec<PathBuf>)> {
    match train_dir {
        Some(dir) => {
            let fit = load_nonempty(dir)?;
            let (e, v) = fit_baseline(kind, &fit)?;
            Ok((e, v, vec![dir.to_path_buf()]))
        }
        None => {
            let (e, v) = fit_baseline(kind, scans)?;
            Ok((e, v, Vec::new()))
        }
    }
}

fn write_predictions(path: &Path, rel: &[DofVector]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PREDICTION_HEADER)?;
    for (i, d) in rel.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(d.to_array().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<DofVector>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::Format(format!(
                "{}: row {row} has {} columns",
                path.display(),
                rec.len()
            )));
        }
        let vals: Vec<f64> = (1..7)
            .map(|k| {
                rec[k].trim().parse::<f64>().map_err(|e| {
                    Error::Format(format!("{}: row {row}: {e}", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        out.push(DofVector::from_array(std::array::from_fn(|k| vals[k])));
    }
    Ok(out)
}

fn predict(a: PredictArgs) -> Result<Outcome> {
    let scans = load_nonempty(&a.scans)?;
    let mut inputs = vec![a.scans.clone()];
    let (est, config) = match (&a.model, a.estimator) {
        (Some(path), _) => {
            let (m, header) = load_checkpoint(path)?;
            inputs.push(path.clone());
            (
                Estimator::Neural(Box::new(m)),
                json!({ "estimator": "model", "model": header.config }),
            )
        }
        (None, Some(kind)) => {
            let (e, v, extra) = baseline_for(kind, a.train.as_deref(), &scans)?;
            inputs.extend(extra);
            (e, v)
        }
        (None, None) => return Err(invalid("either --model or --estimator is required")),
    };
    fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    for s in &scans {
        let rel = sliding_window_predict(&est, s)?;
        let path = a.out.join(format!("{}.csv", s.id));
        write_predictions(&path, &rel)?;
        outputs.push(path);
    }
    Ok(Outcome {
        config,
        seeds: Vec::new(),
        inputs,
        outputs,
        manifest: a.out.join("manifest.json"),
    })
}

fn reconstruct(a: ReconstructArgs) -> Result<Outcome> {
    let scans = load_nonempty(&a.scans)?;
    let mut inputs = vec![a.scans.clone()];
    if let Some(p) = &a.poses {
        inputs.push(p.clone());
    }
    fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    for s in &scans {
        let poses: Vec<Pose> = match &a.poses {
            Some(dir) => {
                let rel = read_predictions(&dir.join(format!("{}.csv", s.id)))?;
                if rel.len() + 1 != s.len() {
                    return Err(invalid(format!(
                        "scan '{}': {} motions for {} frames",
                        s.id,
                        rel.len(),
                        s.len()
                    )));
                }
                let start = s.poses().map_or_else(Pose::identity, |p| p[0]);
                reconstruct_trajectory(&rel, &start)?
            }
            None => s
                .poses()
                .ok_or_else(|| invalid(format!("scan '{}' has no poses; pass --poses", s.id)))?
                .to_vec(),
        };
        let spacing = a.spacing.unwrap_or(s.geometry.spacing_x.min(s.geometry.spacing_y));
        let vol = compound_volume(s.frames(), &poses, &s.geometry, spacing)?;
        let dir = a.out.join(&s.id);
        vol.save(&dir)?;
        outputs.push(dir);
    }
    Ok(Outcome {
        config: json!({ "spacing": a.spacing, "from_predictions": a.poses.is_some() }),
        seeds: Vec::new(),
        inputs,
        outputs,
        manifest: a.out.join("manifest.json"),
    })
}

fn check_window(requested: Option<usize>, actual: usize) -> Result<()> {
    match requested {
        Some(n) if n != actual => Err(invalid(format!(
            "--N {n} does not match the estimator's window of {actual} frames"
        ))),
        _ => Ok(()),
    }
}

fn evaluate(a: EvaluateArgs) -> Result<Outcome> {
    let scans = load_nonempty(&a.scans)?;
    let mut inputs = vec![a.scans.clone()];
    let (report, config): (EvalReport, Value) = match a.estimator {
        EvalMethod::Linear | EvalMethod::Decorrelation => {
            let kind = if a.estimator == EvalMethod::Linear {
                Baseline::Linear
            } else {
                Baseline::Decorrelation
            };
            let (est, v, extra) = baseline_for(kind, a.train.as_deref(), &scans)?;
            inputs.extend(extra);
            check_window(a.n, 2)?;
            let name = if kind == Baseline::Linear { "linear" } else { "decorrelation" };
            (evaluate_dataset(name, &est, &scans)?, v)
        }
        EvalMethod::Model => {
            let path = a.model.clone().ok_or_else(|| invalid("--model is required"))?;
            let (m, header) = load_checkpoint(&path)?;
            inputs.push(path);
            check_window(a.n, m.window_len())?;
            (
                evaluate_dataset("model", &m, &scans)?,
                json!({ "estimator": "model", "model": header.config }),
            )
        }
        EvalMethod::Predictions => {
            let dir = a.predictions.clone().ok_or_else(|| invalid("--predictions is required"))?;
            let preds = scans
                .iter()
                .map(|s| read_predictions(&dir.join(format!("{}.csv", s.id))))
                .collect::<Result<Vec<_>>>()?;
            inputs.push(dir);
            let n = a.n.unwrap_or(2);
            (
                evaluate_predictions("predictions", n, &scans, &preds)?,
                json!({ "estimator": "predictions" }),
            )
        }
    };
    fs::create_dir_all(&a.out)?;
    let json_path = a.out.join("report.json");
    let txt_path = a.out.join("report.txt");
    write_atomic(&json_path, report.to_json()?.as_bytes())?;
    write_atomic(&txt_path, report.to_table().as_bytes())?;
    Ok(Outcome {
        config,
        seeds: Vec::new(),
        inputs,
        outputs: vec![json_path, txt_path],
        manifest: a.out.join("manifest.json"),
    })
}

/// Binary 8-bit PGM of `values` mapped linearly from `[lo, hi]` to `[0, 255]`.
pub fn encode_pgm(width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(
        values
            .iter()
            .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Nearest-neighbour upsampling of a `rows x cols` grid to `height x width`.
fn upsample(values: &[f64], rows: usize, cols: usize, width: usize, height: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(width * height);
    for v in 0..height {
        let r = (v * rows / height).min(rows - 1);
        for u in 0..width {
            let c = (u * cols / width).min(cols - 1);
            out.push(values[r * cols + c]);
        }
    }
    out
}

fn corrmap(a: CorrmapArgs) -> Result<Outcome> {
    let scans = load_nonempty(&a.scans)?;
    let scan = match &a.case {
        Some(id) => scans
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| invalid(format!("no scan with id '{id}'")))?,
        None => &scans[0],
    };
    if a.gap == 0 || a.frame + a.gap >= scan.len() {
        return Err(invalid(format!(
            "frames {} and {} are not both in scan '{}' ({} frames)",
            a.frame,
            a.frame + a.gap,
            scan.id,
            scan.len()
        )));
    }
    let (w, h) = (scan.geometry.width, scan.geometry.height);
    let fa = &scan.frames()[a.frame];
    let fb = &scan.frames()[a.frame + a.gap];
    let map = speckle_correlation_map(fa, fb, a.patch)?;
    fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = a.out.join(name);
        write_atomic(&p, &bytes)?;
        outputs.push(p);
        Ok(())
    };
    let pixels: Vec<f64> = fa.pixels().iter().map(|&p| p as f64).collect();
    emit("frame.pgm", encode_pgm(w, h, &pixels, 0.0, 1.0))?;
    let up = upsample(&map.values, map.rows, map.cols, w, h);
    emit("correlation.pgm", encode_pgm(w, h, &up, 0.0, 1.0))?;
    let mut summary = json!({
        "case": scan.id,
        "frame": a.frame,
        "gap": a.gap,
        "patch": a.patch,
        "rows": map.rows,
        "cols": map.cols,
        "correlation": map.values,
        "mean_correlation": map.mean(),
    });
    let mut inputs = vec![a.scans.clone()];
    if let Some(path) = &a.model {
        let (m, _) = load_checkpoint(path)?;
        inputs.push(path.clone());
        let n = m.window_len();
        if a.frame + n > scan.len() {
            return Err(invalid("attention window runs past the end of the scan"));
        }
        let (_, att) = m.forward_frames(&scan.frames()[a.frame..a.frame + n])?;
        let peak = att.weights.iter().copied().fold(0.0, f64::max);
        let up = upsample(&att.weights, att.height, att.width, w, h);
        emit("attention.pgm", encode_pgm(w, h, &up, 0.0, peak))?;
        summary["attention"] = json!(att.weights);
        summary["attention_grid"] = json!([att.height, att.width]);
    }
    emit("corrmap.json", serde_json::to_string_pretty(&summary)?.into_bytes())?;
    Ok(Outcome {
        config: json!({ "case": scan.id, "frame": a.frame, "gap": a.gap, "patch": a.patch }),
        seeds: Vec::new(),
        inputs,
        outputs,
        manifest: a.out.join("manifest.json"),
    })
}

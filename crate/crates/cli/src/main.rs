//! Command-line front end: synthetic data, training, prediction, evaluation
//! and label signal utilities.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use evoked::dataio::{
    generate_synthetic, list_feature_files, load_checkpoint, read_dataset, read_features,
    read_labels, save_checkpoint, write_dataset, write_labels, LabelTrack, SyntheticSpec,
};
use evoked::gradcheck::{gradient_suite, TOLERANCE};
use evoked::losses::LossKind;
use evoked::metrics::{score_dataset, score_video, ScoreReport};
use evoked::model::{HeadOrder, ModelConfig};
use evoked::signal::{linear_interpolate, LabelFilter};
use evoked::trainer::{ensemble, predict_video, train, PredictionStrategy, TrainConfig};
use evoked::{Error, Result, EMOTIONS};

use manifest::{resolve, sibling, RunManifest};

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (formats: EEVF 1, EEVM 1, label CSV 1)"
);

#[derive(Parser, Debug)]
#[command(name = "evoked", version = LONG_VERSION, about = "Evoked-expression prediction toolkit")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON file of settings (flat object or a previous run manifest).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Where to write the run manifest (default: `<out>.manifest.json`).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset of feature and label files.
    GenData(GenArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Predict dense 6 Hz labels for one feature file or a directory.
    Predict(PredictArgs),
    /// Pearson-score predictions against labels.
    Evaluate(EvaluateArgs),
    /// Low-pass filter a label file.
    Filter(FilterArgs),
    /// Linearly interpolate a label file to a higher rate.
    Interpolate(InterpolateArgs),
    /// Average several prediction files.
    Ensemble(EnsembleArgs),
    /// Check every hand-written gradient against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    videos: Option<usize>,
    /// Video duration in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    visual_dim: Option<usize>,
    #[arg(long)]
    audio_dim: Option<usize>,
    /// Feature correlation time in seconds.
    #[arg(long)]
    smoothness: Option<f64>,
    /// Half-width of the uniform label noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Per-second probability of a zero-dropout event.
    #[arg(long)]
    dropout: Option<f64>,
    /// Trailing feature window driving each label, in seconds.
    #[arg(long)]
    label_window: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainRun {
    #[serde(flatten)]
    train: TrainConfig,
    hidden_dim: usize,
    head_order: HeadOrder,
    init_seed: u64,
}

impl Default for TrainRun {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            train: TrainConfig::default(),
            hidden_dim: m.hidden_dim,
            head_order: m.head_order,
            init_seed: m.init_seed,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory with `<id>.eevf` and `<id>.csv` pairs.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history CSV (default: `<out>.history.csv`).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(LossKind))]
    loss: Option<LossKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    clip_seconds: Option<f64>,
    /// Training sample rate in Hz.
    #[arg(long)]
    sample_rate: Option<f64>,
    #[arg(long)]
    batch_clips: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    val_strategy: Option<PredictionStrategy>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    head_order: Option<HeadOrder>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct PredictRun {
    strategy: PredictionStrategy,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A `.eevf` file or a directory of them.
    #[arg(long)]
    features: PathBuf,
    /// Output CSV, or a directory when `--features` is a directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    strategy: Option<PredictionStrategy>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Prediction CSV or directory of CSVs.
    pred: PathBuf,
    /// Label CSV or directory of CSVs.
    label: PathBuf,
    /// Optional JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
enum FilterKind {
    Butterworth,
    Median,
    Gaussian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct FilterRun {
    kind: FilterKind,
    cutoff_norm: f64,
    order: usize,
    window: usize,
    sigma_samples: f64,
}

impl Default for FilterRun {
    fn default() -> Self {
        Self {
            kind: FilterKind::Gaussian,
            cutoff_norm: 0.1,
            order: 2,
            window: 5,
            sigma_samples: 3.0,
        }
    }
}

impl FilterRun {
    fn filter(&self) -> LabelFilter {
        match self.kind {
            FilterKind::Butterworth => LabelFilter::Butterworth {
                cutoff_norm: self.cutoff_norm,
                order: self.order,
            },
            FilterKind::Median => LabelFilter::Median { window: self.window },
            FilterKind::Gaussian => LabelFilter::Gaussian {
                sigma_samples: self.sigma_samples,
            },
        }
    }
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    kind: Option<FilterKind>,
    /// Butterworth cutoff as a fraction of Nyquist.
    #[arg(long)]
    cutoff: Option<f64>,
    /// Butterworth order (1 or 2).
    #[arg(long)]
    order: Option<usize>,
    /// Median window in samples (odd).
    #[arg(long)]
    window: Option<usize>,
    /// Gaussian standard deviation in samples.
    #[arg(long)]
    sigma: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct InterpolateRun {
    rate_hz: f64,
}

impl Default for InterpolateRun {
    fn default() -> Self {
        Self {
            rate_hz: evoked::LABEL_RATE_HZ,
        }
    }
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target rate in Hz.
    #[arg(long)]
    rate: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Prediction CSVs to average.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Settings of commands without tunables.
#[derive(Debug, Default, Serialize, Deserialize)]
struct NoSettings {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for data and format problems, 3 for numeric failures.
fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    let started = Instant::now();
    match cmd {
        Command::GenData(a) => gen_data(a, started),
        Command::Train(a) => train_cmd(a, started),
        Command::Predict(a) => predict(a, started),
        Command::Evaluate(a) => evaluate(a, started),
        Command::Filter(a) => filter(a, started),
        Command::Interpolate(a) => interpolate(a, started),
        Command::Ensemble(a) => ensemble_cmd(a, started),
        Command::GradCheck(a) => grad_check(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn manifest_path(common: Option<&PathBuf>, out: &Path) -> PathBuf {
    common.cloned().unwrap_or_else(|| sibling(out, ".manifest.json"))
}

fn gen_data(a: GenArgs, started: Instant) -> Result<()> {
    let spec: SyntheticSpec = resolve(
        a.common.config.as_deref(),
        flags! {
            "n_videos" => a.videos,
            "duration_s" => a.duration,
            "visual_dim" => a.visual_dim,
            "audio_dim" => a.audio_dim,
            "label_smoothness" => a.smoothness,
            "noise_amp" => a.noise,
            "dropout_prob" => a.dropout,
            "label_window_s" => a.label_window,
            "seed" => a.seed,
        },
    )?;
    let videos = generate_synthetic(&spec)?;
    let mut m = RunManifest::new("gen-data", &spec, Some(spec.seed))?;
    m.outputs = write_dataset(&a.out, &videos)?;
    log::info!("wrote {} videos to {}", videos.len(), a.out.display());
    m.write(&manifest_path(a.common.manifest.as_ref(), &a.out), started.elapsed())
}

fn train_cmd(a: TrainArgs, started: Instant) -> Result<()> {
    let run: TrainRun = resolve(
        a.common.config.as_deref(),
        flags! {
            "loss_kind" => a.loss,
            "learning_rate" => a.lr,
            "epochs" => a.epochs,
            "clip_seconds" => a.clip_seconds,
            "sample_rate_hz" => a.sample_rate,
            "batch_clips" => a.batch_clips,
            "grad_clip_norm" => a.grad_clip,
            "seed" => a.seed,
            "validation_fraction" => a.val_fraction,
            "val_strategy" => a.val_strategy,
            "hidden_dim" => a.hidden,
            "head_order" => a.head_order,
            "init_seed" => a.init_seed,
        },
    )?;
    let videos = read_dataset(&a.data)?;
    let first = videos
        .first()
        .ok_or_else(|| Error::Input(format!("no .eevf files in {}", a.data.display())))?;
    let model = ModelConfig {
        visual_dim: first.features.visual.cols(),
        audio_dim: first.features.audio.cols(),
        hidden_dim: run.hidden_dim,
        emotions: EMOTIONS,
        init_seed: run.init_seed,
        head_order: run.head_order,
    };
    let (ckpt, history) = train(&videos, &model, &run.train)?;
    save_checkpoint(&a.out, &ckpt)?;
    let hist_path = a.history.unwrap_or_else(|| sibling(&a.out, ".history.csv"));
    write_file(&hist_path, history.to_csv().as_bytes())?;
    if let Some(best) = history.best_epoch {
        log::info!(
            "best epoch {} with validation pearson {:.6}",
            best + 1,
            history.val_pearson[best]
        );
    }
    let mut m = RunManifest::new("train", &run, Some(run.train.seed))?;
    m.inputs = vec![a.data.clone()];
    m.outputs = vec![a.out.clone(), hist_path];
    m.write(&manifest_path(a.common.manifest.as_ref(), &a.out), started.elapsed())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn predict(a: PredictArgs, started: Instant) -> Result<()> {
    let run: PredictRun = resolve(a.common.config.as_deref(), flags! { "strategy" => a.strategy })?;
    let params = load_checkpoint(&a.checkpoint)?.to_params()?;
    let (inputs, outputs) = if a.features.is_dir() {
        fs::create_dir_all(&a.out).map_err(|e| Error::Io {
            path: a.out.clone(),
            source: e,
        })?;
        let files = list_feature_files(&a.features)?;
        let outs = files
            .iter()
            .map(|f| a.out.join(f.with_extension("csv").file_name().expect("file name")))
            .collect();
        (files, outs)
    } else {
        (vec![a.features.clone()], vec![a.out.clone()])
    };
    inputs
        .par_iter()
        .zip(&outputs)
        .map(|(f, out)| {
            let features = read_features(f)?;
            let track = predict_video(&features, &params, run.strategy)?;
            write_labels(out, &LabelTrack::new(features.video_id, track)?)
        })
        .collect::<Result<Vec<()>>>()?;
    log::info!("wrote {} prediction files", outputs.len());
    let mut m = RunManifest::new("predict", &run, None)?;
    m.inputs = std::iter::once(a.checkpoint.clone()).chain(inputs).collect();
    m.outputs = outputs;
    m.write(&manifest_path(a.common.manifest.as_ref(), &a.out), started.elapsed())
}

/// Pairs of (prediction, label) files matched by file name.
fn pair_files(pred: &Path, label: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    match (pred.is_dir(), label.is_dir()) {
        (false, false) => Ok(vec![(pred.to_owned(), label.to_owned())]),
        (true, true) => {
            let mut labels: Vec<PathBuf> = fs::read_dir(label)
                .map_err(|e| Error::Io {
                    path: label.to_owned(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            labels.sort();
            if labels.is_empty() {
                return Err(Error::Input(format!("no label CSVs in {}", label.display())));
            }
            Ok(labels
                .into_iter()
                .map(|l| (pred.join(l.file_name().expect("file name")), l))
                .collect())
        }
        _ => Err(Error::Input(
            "predictions and labels must both be files or both be directories".into(),
        )),
    }
}

#[derive(Serialize)]
struct EvaluationReport {
    videos: Vec<(String, ScoreReport)>,
    dataset_mean_pearson: f64,
}

fn evaluate(a: EvaluateArgs, started: Instant) -> Result<()> {
    let pairs = pair_files(&a.pred, &a.label)?;
    let videos = pairs
        .par_iter()
        .map(|(p, l)| {
            let label = read_labels(l)?;
            let pred = read_labels(p)?;
            Ok((label.video_id, score_video(&pred.values, &label.values)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<ScoreReport> = videos.iter().map(|(_, r)| r.clone()).collect();
    let mean = score_dataset(&reports)?;
    for (id, r) in &videos {
        println!("{id}\t{:.6}", r.per_video_mean);
    }
    println!("dataset_mean_pearson\t{mean:.6}");
    if let Some(out) = &a.out {
        let report = EvaluationReport {
            videos,
            dataset_mean_pearson: mean,
        };
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?;
        write_file(out, (text + "\n").as_bytes())?;
        let mut m = RunManifest::new("evaluate", &NoSettings::default(), None)?;
        m.inputs = pairs.into_iter().flat_map(|(p, l)| [p, l]).collect();
        m.outputs = vec![out.clone()];
        m.write(&manifest_path(a.manifest.as_ref(), out), started.elapsed())?;
    }
    Ok(())
}

fn filter(a: FilterArgs, started: Instant) -> Result<()> {
    let run: FilterRun = resolve(
        a.common.config.as_deref(),
        flags! {
            "kind" => a.kind,
            "cutoff_norm" => a.cutoff,
            "order" => a.order,
            "window" => a.window,
            "sigma_samples" => a.sigma,
        },
    )?;
    let input = read_labels(&a.input)?;
    let mut out = run.filter().apply(&input.values)?;
    // IIR ringing can leave the unit interval; labels are stored clamped
    let mut clamped = 0usize;
    for v in out.values.data_mut() {
        if !(0.0..=1.0).contains(v) {
            clamped += 1;
            *v = v.clamp(0.0, 1.0);
        }
    }
    if clamped > 0 {
        log::warn!("clamped {clamped} filtered values to [0, 1]");
    }
    write_labels(&a.out, &LabelTrack::new(input.video_id, out)?)?;
    let mut m = RunManifest::new("filter", &run, None)?;
    m.inputs = vec![a.input];
    m.outputs = vec![a.out.clone()];
    m.write(&manifest_path(a.common.manifest.as_ref(), &a.out), started.elapsed())
}

fn interpolate(a: InterpolateArgs, started: Instant) -> Result<()> {
    let run: InterpolateRun = resolve(a.common.config.as_deref(), flags! { "rate_hz" => a.rate })?;
    let input = read_labels(&a.input)?;
    let out = linear_interpolate(&input.values, run.rate_hz)?;
    write_labels(&a.out, &LabelTrack::new(input.video_id, out)?)?;
    let mut m = RunManifest::new("interpolate", &run, None)?;
    m.inputs = vec![a.input];
    m.outputs = vec![a.out.clone()];
    m.write(&manifest_path(a.common.manifest.as_ref(), &a.out), started.elapsed())
}

fn ensemble_cmd(a: EnsembleArgs, started: Instant) -> Result<()> {
    let tracks = a
        .inputs
        .iter()
        .map(|p| read_labels(p).map(|l| l.values))
        .collect::<Result<Vec<_>>>()?;
    let id = a
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    write_labels(&a.out, &LabelTrack::new(id, ensemble(&tracks)?)?)?;
    let mut m = RunManifest::new("ensemble", &NoSettings::default(), None)?;
    m.inputs = a.inputs;
    m.outputs = vec![a.out.clone()];
    m.write(&manifest_path(a.manifest.as_ref(), &a.out), started.elapsed())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let checks = gradient_suite(a.seed)?;
    let mut failed = 0;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<24}{:.3e}\t{verdict}", c.layer, c.max_relative_error);
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        return Err(Error::Numeric(format!(
            "{failed} of {} gradient checks exceed {TOLERANCE:e}",
            checks.len()
        )));
    }
    Ok(())
}

//! Training loop, Adam, dense-prediction strategies and ensembling.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Checkpoint, FeatureSequence, LabeledVideo};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::{score_dataset, score_video};
use crate::model::{init_params, model_backward, model_forward, model_forward_cached, ModelConfig, ModelParams};
use crate::numerics::Matrix;
use crate::signal::{downsample, linear_interpolate_len, segment_clips, SampledTrack};
use crate::{EMOTIONS, LABEL_RATE_HZ};

/// How a trained model is turned into a dense 6 Hz prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictionStrategy {
    /// 60-frame windows at 6 Hz.
    #[serde(rename = "dense-6hz-10s")]
    Dense6Hz10s,
    /// 360-frame windows at 6 Hz.
    #[serde(rename = "dense-6hz-60s")]
    Dense6Hz60s,
    /// 60-frame windows at 1 Hz, linearly interpolated to 6 Hz.
    #[default]
    #[serde(rename = "sparse-1hz-interp")]
    Sparse1HzInterp,
}

impl PredictionStrategy {
    pub const ALL: [PredictionStrategy; 3] = [
        PredictionStrategy::Dense6Hz10s,
        PredictionStrategy::Dense6Hz60s,
        PredictionStrategy::Sparse1HzInterp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredictionStrategy::Dense6Hz10s => "dense-6hz-10s",
            PredictionStrategy::Dense6Hz60s => "dense-6hz-60s",
            PredictionStrategy::Sparse1HzInterp => "sparse-1hz-interp",
        }
    }

    /// Rate the model runs at.
    pub fn rate_hz(self) -> f64 {
        match self {
            PredictionStrategy::Sparse1HzInterp => 1.0,
            _ => LABEL_RATE_HZ,
        }
    }

    /// Frames per inference window.
    pub fn window(self) -> usize {
        match self {
            PredictionStrategy::Dense6Hz60s => 360,
            _ => 60,
        }
    }
}

impl fmt::Display for PredictionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PredictionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::input(format!(
                    "unknown strategy {s:?} (expected dense-6hz-10s, dense-6hz-60s or sparse-1hz-interp)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub clip_seconds: f64,
    pub sample_rate_hz: f64,
    pub batch_clips: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Strategy used to score the validation videos after each epoch.
    pub val_strategy: PredictionStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::L1,
            learning_rate: 1e-3,
            epochs: 30,
            clip_seconds: 60.0,
            sample_rate_hz: 1.0,
            batch_clips: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 5.0,
            seed: 0,
            validation_fraction: 0.2,
            val_strategy: PredictionStrategy::Sparse1HzInterp,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clip_seconds", self.clip_seconds),
            ("sample_rate_hz", self.sample_rate_hz),
            ("adam_eps", self.adam_eps),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::input(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::input(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.batch_clips == 0 {
            return Err(Error::input("batch_clips must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::input(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Adam moment estimates, flattened in canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.config.param_count();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Global-norm clipping followed by one bias-corrected Adam update.
/// Returns the gradient norm before clipping.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    if grads.config != params.config {
        return Err(Error::Internal("gradient config differs from parameters".into()));
    }
    let mut theta = params.to_flat();
    let g = grads.to_flat();
    if state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::Internal("optimizer state does not match parameters".into()));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite gradient at flat index {i} (step {})",
            state.step + 1
        )));
    }
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if norm > cfg.grad_clip_norm {
        cfg.grad_clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for i in 0..theta.len() {
        let gi = g[i] * scale;
        state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * gi;
        state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * gi * gi;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    *params = ModelParams::from_flat(&params.config, &theta)?;
    Ok(norm)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_pearson: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    /// `epoch,train_loss,val_pearson,best` rows, epochs counted from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_pearson,best\n");
        for (i, (l, p)) in self.train_loss.iter().zip(&self.val_pearson).enumerate() {
            let best = u8::from(self.best_epoch == Some(i));
            s.push_str(&format!("{},{l:.9},{p:.9},{best}\n", i + 1));
        }
        s
    }
}

/// Brings a track to `hz`, by integer-stride decimation or by linear
/// interpolation when `hz` is higher.
fn resample(track: &SampledTrack, hz: f64) -> Result<SampledTrack> {
    if track.rate_hz == hz {
        Ok(track.clone())
    } else if hz < track.rate_hz {
        downsample(track, hz)
    } else {
        let n = (track.span_s() * hz + 1e-9).floor() as usize + 1;
        linear_interpolate_len(track, hz, n)
    }
}

/// Number of samples of the 6 Hz grid covering the video.
fn label_grid_len(features: &FeatureSequence) -> Result<usize> {
    let span = features.visual_track()?.span_s();
    Ok((span * LABEL_RATE_HZ + 1e-9).floor() as usize + 1)
}

/// Runs the model on consecutive non-overlapping windows of `window` rows,
/// with fresh GRU state in each window.
fn predict_windows(
    visual: &Matrix,
    audio: &Matrix,
    params: &ModelParams,
    window: usize,
) -> Result<Matrix> {
    let t_len = visual.rows();
    let starts: Vec<usize> = (0..t_len).step_by(window).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let e = (s + window).min(t_len);
            model_forward(&visual.slice_rows(s, e), &audio.slice_rows(s, e), params)
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::vstack(&parts)
}

/// Dense 6 Hz, 15-channel prediction for one video.
pub fn predict_video(
    features: &FeatureSequence,
    params: &ModelParams,
    strategy: PredictionStrategy,
) -> Result<SampledTrack> {
    let visual = features.visual_track()?;
    if visual.span_s() < 2.0 - 1e-9 {
        return Err(Error::input(format!(
            "video {} covers {:.3} s; prediction needs at least 2 s",
            features.video_id,
            visual.span_s()
        )));
    }
    let rate = strategy.rate_hz();
    let v = resample(&visual, rate)?;
    let a = resample(&features.audio_track()?, rate)?;
    let n = v.len().min(a.len());
    let mut window = strategy.window();
    if window > n {
        log::debug!(
            "{}: {strategy} window of {window} frames exceeds the {n}-frame video; using {n}",
            features.video_id
        );
        window = n;
    }
    let out = predict_windows(
        &v.values.slice_rows(0, n),
        &a.values.slice_rows(0, n),
        params,
        window,
    )?;
    let track = SampledTrack::new(rate, features.start_time_s(), out)?;
    let n6 = label_grid_len(features)?;
    if rate == LABEL_RATE_HZ {
        Ok(track.truncated(n6))
    } else {
        linear_interpolate_len(&track, LABEL_RATE_HZ, n6)
    }
}

/// Per-timestamp, per-emotion mean of several 6 Hz tracks.
pub fn ensemble(predictions: &[SampledTrack]) -> Result<SampledTrack> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::input("ensemble needs at least one prediction"))?;
    for p in predictions {
        if p.channels() != first.channels() || p.rate_hz != first.rate_hz {
            return Err(Error::input(format!(
                "ensemble members disagree: {} ch @ {} Hz vs {} ch @ {} Hz",
                first.channels(),
                first.rate_hz,
                p.channels(),
                p.rate_hz
            )));
        }
    }
    let n = predictions.iter().map(SampledTrack::len).min().unwrap_or(0);
    if predictions.iter().any(|p| p.len() != n) {
        log::warn!("ensemble members differ in length; truncating to {n} samples");
    }
    // running mean, so identical members reproduce themselves exactly
    let mut mean = first.values.slice_rows(0, n);
    for (k, p) in predictions.iter().enumerate().skip(1) {
        let w = 1.0 / (k + 1) as f64;
        for (m, &v) in mean.data_mut().iter_mut().zip(p.values.slice_rows(0, n).data()) {
            *m += (v - *m) * w;
        }
    }
    SampledTrack::new(first.rate_hz, first.start_time_s, mean)
}

/// One training unit: aligned feature and label rows with fresh GRU state.
struct Clip {
    visual: Matrix,
    audio: Matrix,
    label: Matrix,
}

fn make_clips(video: &LabeledVideo, cfg: &TrainConfig) -> Result<Vec<Clip>> {
    let hz = cfg.sample_rate_hz;
    let v = resample(&video.features.visual_track()?, hz)?;
    let a = resample(&video.features.audio_track()?, hz)?;
    let y = resample(&video.labels.values, hz)?;
    let n = v.len().min(y.len());
    if n != v.len() || n != y.len() {
        log::warn!(
            "{}: {} feature rows vs {} label rows at {hz} Hz; truncating to {n}",
            video.features.video_id,
            v.len(),
            y.len()
        );
    }
    let joint = SampledTrack::new(
        hz,
        v.start_time_s,
        Matrix::hstack(
            &Matrix::hstack(&v.values.slice_rows(0, n), &a.values.slice_rows(0, n))?,
            &y.values.slice_rows(0, n),
        )?,
    )?;
    let dv = v.channels();
    let da = a.channels();
    let cols = |m: &Matrix, lo: usize, hi: usize| -> Result<Matrix> {
        let rows: Vec<&[f64]> = m.row_iter().map(|r| &r[lo..hi]).collect();
        Matrix::from_rows(&rows)
    };
    segment_clips(&joint, cfg.clip_seconds)?
        .into_iter()
        .map(|c| {
            Ok(Clip {
                visual: cols(&c.values, 0, dv)?,
                audio: cols(&c.values, dv, dv + da)?,
                label: cols(&c.values, dv + da, dv + da + EMOTIONS)?,
            })
        })
        .collect()
}

/// Indices of the validation videos: a seeded choice of whole videos. With a
/// single video, that video is used for both training and validation.
fn split_videos(n: usize, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    if n == 1 {
        return (vec![0], vec![0]);
    }
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Mean Pearson score of `params` on `videos` under `strategy`.
pub fn evaluate_videos(
    videos: &[&LabeledVideo],
    params: &ModelParams,
    strategy: PredictionStrategy,
) -> Result<f64> {
    let reports = videos
        .par_iter()
        .map(|v| score_video(&predict_video(&v.features, params, strategy)?, &v.labels.values))
        .collect::<Result<Vec<_>>>()?;
    score_dataset(&reports)
}

fn clip_gradient(clip: &Clip, params: &ModelParams, loss: LossKind) -> Result<(f64, ModelParams)> {
    let (pred, cache) = model_forward_cached(&clip.visual, &clip.audio, params)?;
    let report = loss.evaluate(&pred, &clip.label)?;
    if !report.value.is_finite() {
        return Err(Error::numeric(format!("non-finite {} loss", loss.name())));
    }
    Ok((report.value, model_backward(params, &cache, &report.d_pred)?.params))
}

fn check_dims(videos: &[LabeledVideo], model: &ModelConfig) -> Result<()> {
    for v in videos {
        let f = &v.features;
        if f.visual.cols() != model.visual_dim || f.audio.cols() != model.audio_dim {
            return Err(Error::input(format!(
                "video {} has feature dims {}/{} but the model expects {}/{}",
                f.video_id,
                f.visual.cols(),
                f.audio.cols(),
                model.visual_dim,
                model.audio_dim
            )));
        }
    }
    Ok(())
}

/// Trains a model from scratch and returns the checkpoint of the epoch with
/// the best validation score.
pub fn train(
    videos: &[LabeledVideo],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory)> {
    cfg.validate()?;
    model.validate()?;
    if videos.is_empty() {
        return Err(Error::input("training needs at least one video"));
    }
    check_dims(videos, model)?;

    let mut params = init_params(model)?;
    let mut history = TrainHistory::default();
    let (train_idx, val_idx) = split_videos(videos.len(), cfg);
    let mut meta = BTreeMap::new();
    meta.insert("loss".into(), cfg.loss_kind.name().into());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("sample_rate_hz".into(), cfg.sample_rate_hz.to_string());
    meta.insert("clip_seconds".into(), cfg.clip_seconds.to_string());
    meta.insert(
        "validation_videos".into(),
        val_idx
            .iter()
            .map(|&i| videos[i].features.video_id.as_str())
            .collect::<Vec<_>>()
            .join(" "),
    );
    if cfg.epochs == 0 {
        meta.insert("epochs".into(), "0".into());
        return Ok((Checkpoint::from_params(&params, meta), history));
    }

    let clips: Vec<Clip> = train_idx
        .iter()
        .map(|&i| make_clips(&videos[i], cfg))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if clips.is_empty() {
        return Err(Error::input("no training clips with at least two samples"));
    }
    let val: Vec<&LabeledVideo> = val_idx.iter().map(|&i| &videos[i]).collect();
    log::info!(
        "training on {} clips from {} videos, validating on {} videos",
        clips.len(),
        train_idx.len(),
        val.len()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_clips) {
            let results = batch
                .par_iter()
                .map(|&i| clip_gradient(&clips[i], &params, cfg.loss_kind))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = ModelParams::zeros(model);
            for (loss, g) in &results {
                loss_sum += loss;
                for (acc, t) in grad.tensors_mut().into_iter().zip(g.tensors()) {
                    acc.add_assign(t)?;
                }
            }
            let k = batch.len() as f64;
            for t in grad.tensors_mut() {
                *t = t.scale(1.0 / k);
            }
            adam_step(&mut params, &grad, &mut adam, cfg)?;
        }
        let train_loss = loss_sum / clips.len() as f64;
        let score = evaluate_videos(&val, &params, cfg.val_strategy)?;
        log::info!("epoch {}: train loss {train_loss:.6}, validation pearson {score:.6}", epoch + 1);
        history.train_loss.push(train_loss);
        history.val_pearson.push(score);
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            history.best_epoch = Some(epoch);
            best = Some((score, params.clone()));
        }
    }
    let (score, best_params) = best.expect("at least one epoch");
    meta.insert("epochs".into(), cfg.epochs.to_string());
    meta.insert("best_epoch".into(), (history.best_epoch.unwrap_or(0) + 1).to_string());
    meta.insert("best_val_pearson".into(), format!("{score:.9}"));
    Ok((Checkpoint::from_params(&best_params, meta), history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};
    use crate::model::HeadOrder;

    fn scalar_config() -> ModelConfig {
        ModelConfig {
            visual_dim: 1,
            audio_dim: 1,
            hidden_dim: 1,
            emotions: EMOTIONS,
            init_seed: 0,
            head_order: HeadOrder::GateProjectGate,
        }
    }

    #[test]
    fn adam_first_step() {
        let model = scalar_config();
        let mut p = ModelParams::zeros(&model);
        let mut g = ModelParams::zeros(&model);
        g.head.proj_b.set(0, 0, 1.0);
        let mut state = AdamState::new(&p);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        adam_step(&mut p, &g, &mut state, &cfg).unwrap();
        let w = p.head.proj_b.get(0, 0);
        assert!((w - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{w}");
        assert_eq!(state.step, 1);
        assert_eq!(p.to_flat().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let model = scalar_config();
        let mut p = init_params(&model).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &ModelParams::zeros(&model), &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_clips_global_norm() {
        let model = scalar_config();
        let mut p = ModelParams::zeros(&model);
        let mut g = ModelParams::zeros(&model);
        g.head.proj_b.set(0, 0, 6.0);
        g.head.proj_b.set(1, 0, 8.0);
        let mut state = AdamState::new(&p);
        let cfg = TrainConfig {
            grad_clip_norm: 1.0,
            ..TrainConfig::default()
        };
        let norm = adam_step(&mut p, &g, &mut state, &cfg).unwrap();
        assert!((norm - 10.0).abs() < 1e-12);
        // first moment holds (1 − β1) times the clipped gradient
        let m: f64 = state.m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((m / (1.0 - cfg.adam_beta1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let model = scalar_config();
        let mut p = ModelParams::zeros(&model);
        let mut g = ModelParams::zeros(&model);
        g.head.cg2_b.set(3, 0, f64::NAN);
        let mut state = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut state, &TrainConfig::default()).unwrap_err();
        assert!(err.is_numeric());
    }

    fn tiny_data(n: usize, noise: f64, seed: u64) -> Vec<LabeledVideo> {
        generate_synthetic(&SyntheticSpec {
            n_videos: n,
            duration_s: 40.0,
            visual_dim: 4,
            audio_dim: 2,
            noise_amp: noise,
            dropout_prob: 0.0,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            visual_dim: 4,
            audio_dim: 2,
            hidden_dim: 4,
            emotions: EMOTIONS,
            init_seed: 3,
            head_order: HeadOrder::GateProjectGate,
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let data = tiny_data(1, 0.0, 0);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (ckpt, hist) = train(&data, &tiny_model(), &cfg).unwrap();
        assert!(hist.is_empty());
        assert_eq!(hist.best_epoch, None);
        let init = Checkpoint::from_params(&init_params(&tiny_model()).unwrap(), BTreeMap::new());
        assert_eq!(ckpt.weights, init.weights);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(3, 0.1, 1);
        let cfg = TrainConfig {
            epochs: 3,
            clip_seconds: 10.0,
            batch_clips: 2,
            ..TrainConfig::default()
        };
        let a = train(&data, &tiny_model(), &cfg).unwrap();
        let b = train(&data, &tiny_model(), &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.len(), 3);
    }

    #[test]
    fn smoothed_loss_decreases() {
        let data = tiny_data(1, 0.0, 2);
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 3e-3,
            clip_seconds: 60.0,
            batch_clips: 8,
            ..TrainConfig::default()
        };
        let (_, hist) = train(&data, &tiny_model(), &cfg).unwrap();
        let smooth: Vec<f64> = hist.train_loss.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        for w in smooth.windows(2) {
            assert!(w[1] < w[0], "{smooth:?}");
        }
    }

    #[test]
    fn empty_dataset_and_bad_dims_are_rejected() {
        assert!(train(&[], &tiny_model(), &TrainConfig::default()).is_err());
        let data = tiny_data(1, 0.0, 0);
        let model = ModelConfig {
            visual_dim: 5,
            ..tiny_model()
        };
        assert!(train(&data, &model, &TrainConfig::default()).is_err());
    }

    #[test]
    fn validation_split_is_by_whole_videos() {
        let cfg = TrainConfig::default();
        let (train_idx, val_idx) = split_videos(10, &cfg);
        assert_eq!(val_idx.len(), 2);
        assert_eq!(train_idx.len(), 8);
        assert!(val_idx.iter().all(|i| !train_idx.contains(i)));
        assert_eq!(split_videos(10, &cfg), (train_idx, val_idx));
    }

    fn constant_output_params() -> ModelParams {
        // zero weights with biases give a constant, known output
        let mut p = ModelParams::zeros(&tiny_model());
        for e in 0..EMOTIONS {
            p.head.cg2_b.set(e, 0, 50.0);
            p.head.proj_b.set(e, 0, 0.1 * e as f64 - 0.7);
        }
        p
    }

    #[test]
    fn sparse_prediction_contract() {
        let data = tiny_data(1, 0.0, 4);
        let f = &data[0].features;
        let p = init_params(&tiny_model()).unwrap();
        let out = predict_video(f, &p, PredictionStrategy::Sparse1HzInterp).unwrap();
        assert_eq!(out.rate_hz, 6.0);
        assert_eq!(out.len(), f.len());
        assert!(out.values.data().iter().all(|&v| v > 0.0 && v < 1.0));

        // knots equal the raw 1 Hz predictions
        let v1 = downsample(&f.visual_track().unwrap(), 1.0).unwrap();
        let a1 = downsample(&f.audio_track().unwrap(), 1.0).unwrap();
        let raw = model_forward(&v1.values, &a1.values, &p).unwrap();
        for k in 0..raw.rows() {
            assert_eq!(out.values.row(6 * k), raw.row(k));
        }
        // piecewise linear between knots
        for k in 0..raw.rows() - 1 {
            for j in 1..6 {
                for c in 0..EMOTIONS {
                    let want = raw.get(k, c) + (raw.get(k + 1, c) - raw.get(k, c)) * j as f64 / 6.0;
                    assert!((out.values.get(6 * k + j, c) - want).abs() < 1e-12);
                }
            }
        }

        let out = predict_video(f, &constant_output_params(), PredictionStrategy::Sparse1HzInterp).unwrap();
        for c in 0..EMOTIONS {
            let col = out.channel(c);
            assert!(col.iter().all(|&v| v == col[0]));
        }
    }

    #[test]
    fn dense_strategies_cover_the_label_grid() {
        let data = tiny_data(1, 0.0, 5);
        let f = &data[0].features;
        let p = init_params(&tiny_model()).unwrap();
        for s in [PredictionStrategy::Dense6Hz10s, PredictionStrategy::Dense6Hz60s] {
            // 40 s video: the 60 s window shrinks to the video length
            let out = predict_video(f, &p, s).unwrap();
            assert_eq!(out.len(), f.len());
            assert_eq!(out.rate_hz, 6.0);
        }
        let whole = model_forward(&f.visual, &f.audio, &p).unwrap();
        let long = predict_video(f, &p, PredictionStrategy::Dense6Hz60s).unwrap();
        assert_eq!(long.values, whole);
        let short = predict_video(f, &p, PredictionStrategy::Dense6Hz10s).unwrap();
        let first = model_forward(&f.visual.slice_rows(60, 120), &f.audio.slice_rows(60, 120), &p).unwrap();
        assert_eq!(short.values.slice_rows(60, 120), first);
    }

    #[test]
    fn short_videos_are_rejected() {
        let data = generate_synthetic(&SyntheticSpec {
            n_videos: 1,
            duration_s: 1.0,
            visual_dim: 4,
            audio_dim: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let p = init_params(&tiny_model()).unwrap();
        assert!(predict_video(&data[0].features, &p, PredictionStrategy::Dense6Hz10s).is_err());
    }

    fn flat(v: f64, n: usize) -> SampledTrack {
        SampledTrack::new(6.0, 0.0, Matrix::filled(n, EMOTIONS, v)).unwrap()
    }

    #[test]
    fn ensemble_examples() {
        let out = ensemble(&[flat(0.2, 10), flat(0.4, 10)]).unwrap();
        assert!(out.values.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let a = flat(0.7, 4);
        assert_eq!(ensemble(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        assert_eq!(ensemble(&[flat(0.2, 10), flat(0.4, 7)]).unwrap().len(), 7);
        assert!(ensemble(&[]).is_err());
    }

    #[test]
    fn ensemble_is_bounded_and_order_free() {
        let data = tiny_data(1, 0.0, 6);
        let tracks: Vec<SampledTrack> = (0..4)
            .map(|s| {
                let p = init_params(&ModelConfig {
                    init_seed: s,
                    ..tiny_model()
                })
                .unwrap();
                predict_video(&data[0].features, &p, PredictionStrategy::Sparse1HzInterp).unwrap()
            })
            .collect();
        let out = ensemble(&tracks).unwrap();
        let mut rev = tracks.clone();
        rev.reverse();
        let out_rev = ensemble(&rev).unwrap();
        for (i, &v) in out.values.data().iter().enumerate() {
            let lo = tracks.iter().map(|t| t.values.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = tracks.iter().map(|t| t.values.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
            assert!((v - out_rev.values.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in PredictionStrategy::ALL {
            assert_eq!(s.name().parse::<PredictionStrategy>().unwrap(), s);
        }
        assert!("dense".parse::<PredictionStrategy>().is_err());
    }
}

//! File formats and the synthetic dataset generator.
//!
//! * Features (`.eevf`, binary, little-endian):
//!   `"EEVF"`, u32 version = 1, u16 id length + UTF-8 id, u32 T,
//!   u32 visual_dim, u32 audio_dim, then T records of
//!   (i64 timestamp_ms, visual_dim × f32, audio_dim × f32).
//! * Labels and predictions (`.csv`): header `timestamp_ms,e01,…,e15`, one row
//!   per sample, values with six decimals.
//! * Checkpoints (`.eevm`, binary, little-endian): `"EEVM"`, u32 version = 1,
//!   u32 metadata length + UTF-8 JSON (`config`, `training_meta`,
//!   `weight_count`), then `weight_count` × f32 in canonical parameter order
//!   (see [`ModelParams::tensors`]).
//!
//! Values are single precision on disk and double precision in memory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{sigmoid, Matrix};
use crate::signal::SampledTrack;
use crate::{EMOTIONS, LABEL_RATE_HZ};

pub const FEATURE_MAGIC: [u8; 4] = *b"EEVF";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EEVM";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Version of the label/prediction CSV schema.
pub const LABEL_CSV_VERSION: u32 = 1;

/// Rate of the synthetic feature rows.
pub const SYNTHETIC_RATE_HZ: f64 = 6.0;

/// Sample rate implied by millisecond timestamps, snapped to a whole number
/// of hertz when within 1%. Single-sample tracks default to the label rate.
pub fn infer_rate_hz(timestamps_ms: &[i64]) -> f64 {
    if timestamps_ms.len() < 2 {
        return LABEL_RATE_HZ;
    }
    let span = (timestamps_ms[timestamps_ms.len() - 1] - timestamps_ms[0]) as f64;
    let rate = (timestamps_ms.len() - 1) as f64 * 1000.0 / span;
    let whole = rate.round();
    if whole >= 1.0 && (rate - whole).abs() <= 0.01 * whole {
        whole
    } else {
        rate
    }
}

fn timestamp_ms(start_s: f64, k: usize, rate_hz: f64) -> i64 {
    ((start_s + k as f64 / rate_hz) * 1000.0).round() as i64
}

fn quantize(m: &Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

/// Timestamped visual and audio feature rows of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub timestamps_ms: Vec<i64>,
    pub visual: Matrix,
    pub audio: Matrix,
}

impl FeatureSequence {
    /// Validates the rows and rounds every value to single precision.
    pub fn new(
        video_id: impl Into<String>,
        timestamps_ms: Vec<i64>,
        visual: Matrix,
        audio: Matrix,
    ) -> Result<Self> {
        let t = timestamps_ms.len();
        if visual.rows() != t || audio.rows() != t {
            return Err(Error::input(format!(
                "{t} timestamps but {} visual and {} audio rows",
                visual.rows(),
                audio.rows()
            )));
        }
        if let Some(row) = (1..t).find(|&i| timestamps_ms[i] <= timestamps_ms[i - 1]) {
            return Err(FormatError::NonAscending {
                row,
                timestamp_ms: timestamps_ms[row],
            }
            .into());
        }
        Ok(Self {
            video_id: video_id.into(),
            timestamps_ms,
            visual: quantize(&visual),
            audio: quantize(&audio),
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps_ms.is_empty()
    }

    pub fn rate_hz(&self) -> f64 {
        infer_rate_hz(&self.timestamps_ms)
    }

    pub fn start_time_s(&self) -> f64 {
        self.timestamps_ms.first().map_or(0.0, |&t| t as f64 / 1000.0)
    }

    pub fn visual_track(&self) -> Result<SampledTrack> {
        SampledTrack::new(self.rate_hz(), self.start_time_s(), self.visual.clone())
    }

    pub fn audio_track(&self) -> Result<SampledTrack> {
        SampledTrack::new(self.rate_hz(), self.start_time_s(), self.audio.clone())
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(FormatError::Truncated {
                offset: self.buf.len(),
                needed: end - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        self.array().map(u32::from_le_bytes)
    }

    fn i64(&mut self) -> Result<i64, FormatError> {
        self.array().map(i64::from_le_bytes)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found = self.array::<4>()?;
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self, expected: u32) -> Result<(), FormatError> {
        let found = self.u32()?;
        if found != expected {
            return Err(FormatError::Version { expected, found });
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Integrity(format!(
                "{} trailing bytes after offset {}",
                self.buf.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::input(format!("{what} {n} does not fit in 32 bits")))
}

pub fn encode_features(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let id = seq.video_id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::input("video id longer than 65535 bytes"))?;
    let (t, dv, da) = (seq.len(), seq.visual.cols(), seq.audio.cols());
    let mut out = Vec::with_capacity(22 + id.len() + t * (8 + 4 * (dv + da)));
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&u32_len(t, "row count")?.to_le_bytes());
    out.extend_from_slice(&u32_len(dv, "visual dim")?.to_le_bytes());
    out.extend_from_slice(&u32_len(da, "audio dim")?.to_le_bytes());
    for k in 0..t {
        out.extend_from_slice(&seq.timestamps_ms[k].to_le_bytes());
        for &v in seq.visual.row(k).iter().chain(seq.audio.row(k)) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    let mut r = ByteReader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    r.version(FEATURE_VERSION)?;
    let id_len = r.u16()? as usize;
    let video_id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|e| FormatError::Metadata(format!("video id is not UTF-8: {e}")))?
        .to_owned();
    let t = r.u32()? as usize;
    let dv = r.u32()? as usize;
    let da = r.u32()? as usize;
    // Header fields come from the file, so size the body in u128.
    let body = t as u128 * (8 + 4 * (dv as u128 + da as u128));
    let available = (r.buf.len() - r.pos) as u128;
    if body > available {
        return Err(FormatError::Truncated {
            offset: r.buf.len(),
            needed: (body - available).min(usize::MAX as u128) as usize,
        }
        .into());
    }
    let mut timestamps = Vec::with_capacity(t);
    let mut visual = Vec::with_capacity(t * dv);
    let mut audio = Vec::with_capacity(t * da);
    for _ in 0..t {
        timestamps.push(r.i64()?);
        visual.extend(r.f32s(dv)?.into_iter().map(f64::from));
        audio.extend(r.f32s(da)?.into_iter().map(f64::from));
    }
    r.finish()?;
    let visual = Matrix::new(t, dv, visual)
        .map_err(|_| FormatError::Integrity("non-finite visual feature".into()))?;
    let audio = Matrix::new(t, da, audio)
        .map_err(|_| FormatError::Integrity("non-finite audio feature".into()))?;
    FeatureSequence::new(video_id, timestamps, visual, audio)
}

pub fn write_features(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(seq)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    decode_features(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Per-emotion scores of one video, also used for predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTrack {
    pub video_id: String,
    pub values: SampledTrack,
}

impl LabelTrack {
    pub fn new(video_id: impl Into<String>, values: SampledTrack) -> Result<Self> {
        if values.channels() != EMOTIONS {
            return Err(Error::input(format!(
                "label tracks have {EMOTIONS} channels, got {}",
                values.channels()
            )));
        }
        check_unit_range(&values.values)?;
        Ok(Self {
            video_id: video_id.into(),
            values,
        })
    }
}

fn column_name(c: usize) -> String {
    format!("e{:02}", c + 1)
}

fn check_unit_range(values: &Matrix) -> Result<(), FormatError> {
    for (t, row) in values.row_iter().enumerate() {
        if let Some((c, &v)) = row.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(FormatError::Range {
                row: t + 1,
                column: column_name(c),
                value: v,
            });
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Input(e.to_string()),
        _ => FormatError::Header(e.to_string()).into(),
    }
}

pub fn encode_labels(track: &LabelTrack) -> Result<Vec<u8>> {
    let v = &track.values;
    check_unit_range(&v.values)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["timestamp_ms".to_owned()];
    header.extend((0..v.channels()).map(column_name));
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..v.len() {
        let mut rec = vec![timestamp_ms(v.start_time_s, k, v.rate_hz).to_string()];
        rec.extend(v.values.row(k).iter().map(|x| format!("{x:.6}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Internal(format!("flushing CSV buffer: {e}")))
}

/// Parses a label CSV. Rows are numbered from 1 for the first data row.
pub fn decode_labels(text: &[u8], video_id: &str) -> Result<LabelTrack> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text);
    let header = r.headers().map_err(csv_err)?.clone();
    let expected: Vec<String> = std::iter::once("timestamp_ms".to_owned())
        .chain((0..EMOTIONS).map(column_name))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(FormatError::Header(format!(
            "expected {:?}, found {:?}",
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        ))
        .into());
    }
    let mut timestamps: Vec<i64> = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(csv_err)?;
        if rec.len() != EMOTIONS + 1 {
            return Err(FormatError::ColumnCount {
                row,
                expected: EMOTIONS + 1,
                found: rec.len(),
            }
            .into());
        }
        let ts: i64 = rec[0].parse().map_err(|_| FormatError::NonNumeric {
            row,
            column: "timestamp_ms".into(),
            cell: rec[0].to_owned(),
        })?;
        if timestamps.last().is_some_and(|&prev| ts <= prev) {
            return Err(FormatError::NonAscending {
                row,
                timestamp_ms: ts,
            }
            .into());
        }
        timestamps.push(ts);
        for c in 0..EMOTIONS {
            let cell = &rec[c + 1];
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| FormatError::NonNumeric {
                    row,
                    column: column_name(c),
                    cell: cell.to_owned(),
                })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(FormatError::Range {
                    row,
                    column: column_name(c),
                    value: v,
                }
                .into());
            }
            data.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(FormatError::Empty.into());
    }
    let values = Matrix::new(timestamps.len(), EMOTIONS, data)?;
    let track = SampledTrack::new(
        infer_rate_hz(&timestamps),
        timestamps[0] as f64 / 1000.0,
        values,
    )?;
    LabelTrack::new(video_id, track)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn write_labels(path: impl AsRef<Path>, track: &LabelTrack) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_labels(track)?).map_err(|e| Error::io(path, e))
}

/// Reads a label CSV; the video id is the file stem.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelTrack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, &file_stem(path))
}

/// Serialized model weights plus configuration and free-form training notes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub weights: Vec<f32>,
    pub training_meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    training_meta: BTreeMap<String, String>,
    weight_count: usize,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, training_meta: BTreeMap<String, String>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: params.config.clone(),
            weights: params.to_flat().into_iter().map(|v| v as f32).collect(),
            training_meta,
        }
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        let flat: Vec<f64> = self.weights.iter().map(|&v| f64::from(v)).collect();
        ModelParams::from_flat(&self.config, &flat)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            training_meta: self.training_meta.clone(),
            weight_count: self.weights.len(),
        };
        let json = serde_json::to_vec(&meta)
            .map_err(|e| Error::Internal(format!("serializing checkpoint metadata: {e}")))?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.weights.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&u32_len(json.len(), "metadata length")?.to_le_bytes());
        out.extend_from_slice(&json);
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
            .map_err(|e| FormatError::Metadata(e.to_string()))?;
        meta.config
            .validate()
            .map_err(|e| FormatError::Integrity(format!("invalid config: {e}")))?;
        let implied = meta.config.param_count();
        if meta.weight_count != implied {
            return Err(FormatError::Integrity(format!(
                "header declares {} weights but the config implies {implied}",
                meta.weight_count
            ))
            .into());
        }
        let weights = r.f32s(implied)?;
        r.finish()?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(FormatError::Integrity("non-finite weight".into()).into());
        }
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            config: meta.config,
            weights,
            training_meta: meta.training_meta,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.encode()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Features and labels of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVideo {
    pub features: FeatureSequence,
    pub labels: LabelTrack,
}

/// Writes `<id>.eevf` and `<id>.csv` for every video into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, videos: &[LabeledVideo]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for v in videos {
        let f = dir.join(format!("{}.eevf", v.features.video_id));
        let l = dir.join(format!("{}.csv", v.features.video_id));
        write_features(&f, &v.features)?;
        write_labels(&l, &v.labels)?;
        written.push(f);
        written.push(l);
    }
    Ok(written)
}

/// Feature files in a directory, sorted by name.
pub fn list_feature_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "eevf"))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every `<id>.eevf` with its `<id>.csv` label file from `dir`.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledVideo>> {
    list_feature_files(&dir)?
        .into_iter()
        .map(|f| {
            let features = read_features(&f)?;
            let mut labels = read_labels(f.with_extension("csv"))?;
            labels.video_id = features.video_id.clone();
            Ok(LabeledVideo { features, labels })
        })
        .collect()
}

/// Parameters of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub duration_s: f64,
    pub visual_dim: usize,
    pub audio_dim: usize,
    /// Correlation time of the feature random walks, in seconds.
    pub label_smoothness: f64,
    pub noise_amp: f64,
    pub dropout_prob: f64,
    /// Length of the trailing feature window that drives each label.
    pub label_window_s: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_videos: 8,
            duration_s: 120.0,
            visual_dim: 32,
            audio_dim: 8,
            label_smoothness: 3.0,
            noise_amp: 0.15,
            dropout_prob: 0.02,
            label_window_s: 5.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.visual_dim == 0 || self.audio_dim == 0 {
            return Err(Error::input("synthetic counts and dims must be positive"));
        }
        if !(self.duration_s >= 1.0 / SYNTHETIC_RATE_HZ) {
            return Err(Error::input("synthetic duration must cover at least one frame"));
        }
        if !(self.label_smoothness > 0.0 && self.label_window_s > 0.0) {
            return Err(Error::input("smoothness and window must be positive"));
        }
        for (name, p) in [("noise_amp", self.noise_amp), ("dropout_prob", self.dropout_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::input(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// The fixed label-generating functionals shared by all synthetic videos.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    /// One row of weights over `[visual ‖ audio]` per emotion.
    weights: Matrix,
    bias: Vec<f64>,
    gain: f64,
    window: usize,
}

impl SyntheticTask {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.visual_dim + spec.audio_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let w: Vec<f64> = (0..EMOTIONS * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        let bias = (0..EMOTIONS).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let window = ((spec.label_window_s * SYNTHETIC_RATE_HZ).round() as usize).max(1);
        // Variance of a window mean of a unit AR(1) process; the gain brings
        // the logits to a standard deviation of about 1.5.
        let a = ar_coefficient(spec.label_smoothness);
        let wf = window as f64;
        let acc: f64 = (1..window).map(|k| (wf - k as f64) * a.powi(k as i32)).sum();
        let var_mean = (wf + 2.0 * acc) / (wf * wf);
        Ok(Self {
            weights: Matrix::new(EMOTIONS, d, w)?,
            bias,
            gain: 1.5 / var_mean.sqrt(),
            window,
        })
    }

    /// Noise-free labels: sigmoids of linear functionals of the trailing
    /// window mean of the features.
    pub fn clean_labels(&self, features: &FeatureSequence) -> Result<SampledTrack> {
        let t_len = features.len();
        let full = Matrix::hstack(&features.visual, &features.audio)?;
        if full.cols() != self.weights.cols() {
            return Err(Error::Dimension {
                op: "synthetic labels",
                left: self.weights.shape(),
                right: full.shape(),
            });
        }
        let d = full.cols();
        let mut out = Matrix::zeros(t_len, EMOTIONS);
        let mut running = vec![0.0; d];
        for t in 0..t_len {
            for (s, v) in running.iter_mut().zip(full.row(t)) {
                *s += v;
            }
            if t >= self.window {
                for (s, v) in running.iter_mut().zip(full.row(t - self.window)) {
                    *s -= v;
                }
            }
            let count = (t + 1).min(self.window) as f64;
            let mean: Vec<f64> = running.iter().map(|s| s / count).collect();
            for e in 0..EMOTIONS {
                let dot: f64 = self.weights.row(e).iter().zip(&mean).map(|(w, m)| w * m).sum();
                out.set(t, e, sigmoid(self.gain * dot + self.bias[e]));
            }
        }
        SampledTrack::new(features.rate_hz(), features.start_time_s(), out)
    }
}

fn ar_coefficient(smoothness_s: f64) -> f64 {
    (-1.0 / (SYNTHETIC_RATE_HZ * smoothness_s)).exp()
}

/// Deterministic synthetic videos with learnable labels, uniform
/// high-frequency label noise and per-second zero-dropout events.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<LabeledVideo>> {
    let task = SyntheticTask::new(spec)?;
    let t_len = ((spec.duration_s * SYNTHETIC_RATE_HZ).round() as usize).max(1);
    let a = ar_coefficient(spec.label_smoothness);
    let innov = (1.0 - a * a).sqrt();
    let mut videos = Vec::with_capacity(spec.n_videos);
    for i in 0..spec.n_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let walk = |dim: usize, rng: &mut ChaCha8Rng| {
            let mut m = Matrix::zeros(t_len, dim);
            let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for t in 0..t_len {
                if t > 0 {
                    for v in x.iter_mut() {
                        *v = a * *v + innov * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                m.row_mut(t).copy_from_slice(&x);
            }
            m
        };
        let visual = walk(spec.visual_dim, &mut rng);
        let audio = walk(spec.audio_dim, &mut rng);
        let timestamps = (0..t_len).map(|k| timestamp_ms(0.0, k, SYNTHETIC_RATE_HZ)).collect();
        let features = FeatureSequence::new(format!("syn{i:04}"), timestamps, visual, audio)?;

        let clean = task.clean_labels(&features)?;
        let mut values = clean.values.clone();
        if spec.noise_amp > 0.0 {
            for v in values.data_mut() {
                *v += rng.gen_range(-spec.noise_amp..=spec.noise_amp);
            }
        }
        values.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let per_second = SYNTHETIC_RATE_HZ as usize;
        for second_start in (0..t_len).step_by(per_second) {
            if spec.dropout_prob > 0.0 && rng.gen_bool(spec.dropout_prob) {
                let second_end = (second_start + per_second).min(t_len);
                let start = rng.gen_range(second_start..second_end);
                let end = (start + rng.gen_range(1..=3)).min(second_end);
                for t in start..end {
                    values.row_mut(t).fill(0.0);
                }
            }
        }
        let labels = LabelTrack::new(
            features.video_id.clone(),
            SampledTrack::new(clean.rate_hz, clean.start_time_s, values)?,
        )?;
        videos.push(LabeledVideo { features, labels });
    }
    Ok(videos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{pearson, score_video};
    use crate::model::init_params;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_videos: 2,
            duration_s: 20.0,
            visual_dim: 6,
            audio_dim: 3,
            noise_amp: 0.0,
            dropout_prob: 0.0,
            seed: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn features_round_trip_and_truncation() {
        let v = generate_synthetic(&small_spec()).unwrap();
        let bytes = encode_features(&v[0].features).unwrap();
        assert_eq!(decode_features(&bytes).unwrap(), v[0].features);

        let cut = bytes.len() - 7;
        match decode_features(&bytes[..cut]) {
            Err(Error::Format(FormatError::Truncated { offset, needed })) => {
                assert_eq!(offset, cut);
                assert_eq!(needed, 7);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_features(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(
            decode_features(&bad),
            Err(Error::Format(FormatError::Version { expected: 1, found: 2 }))
        ));
    }

    #[test]
    fn labels_round_trip_within_quantization() {
        let v = generate_synthetic(&small_spec()).unwrap();
        let text = encode_labels(&v[0].labels).unwrap();
        let back = decode_labels(&text, "syn0000").unwrap();
        assert_eq!(back.values.rate_hz, 6.0);
        assert_eq!(back.values.len(), v[0].labels.values.len());
        for (a, b) in back.values.values.data().iter().zip(v[0].labels.values.values.data()) {
            assert!((a - b).abs() <= 5e-7);
        }
        let header = String::from_utf8(text[..text.iter().position(|&b| b == b'\n').unwrap()].to_vec()).unwrap();
        assert!(header.starts_with("timestamp_ms,e01,e02"));
        assert!(header.ends_with(",e15"));
    }

    fn csv_with_rows(rows: &[&str]) -> Vec<u8> {
        let header = std::iter::once("timestamp_ms".to_owned())
            .chain((1..=15).map(|i| format!("e{i:02}")))
            .collect::<Vec<_>>()
            .join(",");
        let mut s = header;
        for r in rows {
            s.push('\n');
            s.push_str(r);
        }
        s.push('\n');
        s.into_bytes()
    }

    #[test]
    fn label_reader_errors() {
        let ok = format!("0{}", ",0.5".repeat(15));
        let high = format!("167,1.2{}", ",0.5".repeat(14));
        match decode_labels(&csv_with_rows(&[&ok, &high]), "x") {
            Err(Error::Format(FormatError::Range { row, value, .. })) => {
                assert_eq!(row, 2);
                assert_eq!(value, 1.2);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_labels(&csv_with_rows(&[]), "x"),
            Err(Error::Format(FormatError::Empty))
        ));
        let word = format!("0,abc{}", ",0.5".repeat(14));
        assert!(matches!(
            decode_labels(&csv_with_rows(&[&word]), "x"),
            Err(Error::Format(FormatError::NonNumeric { row: 1, .. }))
        ));
        assert!(matches!(
            decode_labels(&csv_with_rows(&[&ok, &ok]), "x"),
            Err(Error::Format(FormatError::NonAscending { row: 2, .. }))
        ));
        assert!(matches!(
            decode_labels(b"time,a,b\n0,1,2\n", "x"),
            Err(Error::Format(FormatError::Header(_)))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = ModelConfig {
            visual_dim: 4,
            audio_dim: 3,
            hidden_dim: 2,
            init_seed: 3,
            ..ModelConfig::default()
        };
        let mut meta = BTreeMap::new();
        meta.insert("loss".to_owned(), "l1".to_owned());
        let ckpt = Checkpoint::from_params(&init_params(&cfg).unwrap(), meta);
        let bytes = ckpt.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn checkpoint_detects_edited_config() {
        let cfg = ModelConfig {
            visual_dim: 4,
            audio_dim: 3,
            hidden_dim: 2,
            ..ModelConfig::default()
        };
        let bytes = Checkpoint::from_params(&init_params(&cfg).unwrap(), BTreeMap::new())
            .encode()
            .unwrap();
        let needle = b"\"hidden_dim\":2";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut edited = bytes.clone();
        edited[at + needle.len() - 1] = b'3';
        assert!(matches!(
            Checkpoint::decode(&edited),
            Err(Error::Format(FormatError::Integrity(_)))
        ));
    }

    #[test]
    fn noiseless_labels_are_exactly_learnable() {
        let spec = small_spec();
        let task = SyntheticTask::new(&spec).unwrap();
        for v in generate_synthetic(&spec).unwrap() {
            let clean = task.clean_labels(&v.features).unwrap();
            assert_eq!(clean, v.labels.values);
            let r = score_video(&clean, &v.labels.values).unwrap();
            assert!((r.per_video_mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_dropout_hits_every_second() {
        let spec = SyntheticSpec {
            dropout_prob: 1.0,
            ..small_spec()
        };
        for v in generate_synthetic(&spec).unwrap() {
            let vals = &v.labels.values.values;
            for s in 0..vals.rows() / 6 {
                let hit = (6 * s..6 * s + 6).any(|t| vals.row(t).iter().all(|&x| x == 0.0));
                assert!(hit, "second {s} has no drop");
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            noise_amp: 0.1,
            dropout_prob: 0.1,
            ..small_spec()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            encode_features(&a[1].features).unwrap(),
            encode_features(&b[1].features).unwrap()
        );
        assert_ne!(a[0].features, a[1].features);
    }

    #[test]
    fn noise_lowers_correlation_with_clean_labels() {
        let task = SyntheticTask::new(&small_spec()).unwrap();
        let noisy = generate_synthetic(&SyntheticSpec {
            noise_amp: 0.2,
            ..small_spec()
        })
        .unwrap();
        let v = &noisy[0];
        let clean = task.clean_labels(&v.features).unwrap();
        for e in 0..EMOTIONS {
            let r = pearson(&clean.channel(e), &v.labels.values.channel(e)).unwrap();
            assert!(r < 1.0 - 1e-6);
        }
    }

    #[test]
    fn rate_inference() {
        assert_eq!(infer_rate_hz(&[0, 167]), 6.0);
        assert_eq!(infer_rate_hz(&[0, 167, 333, 500, 667]), 6.0);
        assert_eq!(infer_rate_hz(&[1000, 2000, 3000]), 1.0);
        assert_eq!(infer_rate_hz(&[5]), LABEL_RATE_HZ);
    }
}

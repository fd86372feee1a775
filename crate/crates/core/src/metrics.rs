//! Correlation metrics with population (1/n) moments.
//!
//! Videos are scored per emotion with Pearson's correlation, averaged over all
//! emotion channels, then averaged over videos. Emotions whose prediction or
//! label is constant score 0 and still count in the mean.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::signal::SampledTrack;

/// Variances at or below this are treated as zero.
pub const DEGENERATE_VARIANCE: f64 = 1e-20;

/// First and second moments of a pair of series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentSummary {
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
    pub n: usize,
}

impl MomentSummary {
    pub fn compute(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::input(format!(
                "series lengths differ: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        let n = x.len();
        if n < 2 {
            return Err(Error::input(format!("need at least 2 samples, got {n}")));
        }
        let nf = n as f64;
        let mean_x = x.iter().sum::<f64>() / nf;
        let mean_y = y.iter().sum::<f64>() / nf;
        let (mut var_x, mut var_y, mut cov_xy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            let dx = a - mean_x;
            let dy = b - mean_y;
            var_x += dx * dx;
            var_y += dy * dy;
            cov_xy += dx * dy;
        }
        Ok(Self {
            mean_x,
            mean_y,
            var_x: var_x / nf,
            var_y: var_y / nf,
            cov_xy: cov_xy / nf,
            n,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.var_x <= DEGENERATE_VARIANCE || self.var_y <= DEGENERATE_VARIANCE
    }
}

/// Pearson's correlation coefficient, clamped to [−1, 1].
///
/// Returns [`Error::DegenerateVariance`] when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let m = MomentSummary::compute(x, y)?;
    if m.var_x <= DEGENERATE_VARIANCE {
        return Err(Error::DegenerateVariance("first series"));
    }
    if m.var_y <= DEGENERATE_VARIANCE {
        return Err(Error::DegenerateVariance("second series"));
    }
    Ok((m.cov_xy / (m.var_x.sqrt() * m.var_y.sqrt())).clamp(-1.0, 1.0))
}

/// Concordance correlation coefficient of `x` against `y` together with its
/// gradient with respect to `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct CccTerm {
    pub value: f64,
    pub d_x: Vec<f64>,
}

/// `ρ_c = 2 cov / (σ_x² + σ_y² + (μ_x − μ_y)²)`. Degenerate pairs give
/// `ρ_c = 0` with a zero gradient.
pub fn ccc_with_grad(x: &[f64], y: &[f64]) -> Result<CccTerm> {
    let m = MomentSummary::compute(x, y)?;
    let n = m.n as f64;
    if m.is_degenerate() {
        return Ok(CccTerm {
            value: 0.0,
            d_x: vec![0.0; x.len()],
        });
    }
    let shift = m.mean_x - m.mean_y;
    let num = 2.0 * m.cov_xy;
    let den = m.var_x + m.var_y + shift * shift;
    let d_x = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let d_num = 2.0 * (yi - m.mean_y) / n;
            let d_den = 2.0 * (xi - m.mean_x) / n + 2.0 * shift / n;
            (d_num * den - num * d_den) / (den * den)
        })
        .collect();
    Ok(CccTerm {
        value: num / den,
        d_x,
    })
}

pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    ccc_with_grad(x, y).map(|t| t.value)
}

/// Per-video correlation scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub per_emotion: Vec<f64>,
    pub per_video_mean: f64,
    pub n_valid_emotions: usize,
}

/// Scores a prediction track against a label track channel by channel.
pub fn score_video(pred: &SampledTrack, label: &SampledTrack) -> Result<ScoreReport> {
    if pred.channels() != label.channels() {
        return Err(Error::input(format!(
            "prediction has {} channels, label has {}",
            pred.channels(),
            label.channels()
        )));
    }
    let n = pred.len().min(label.len());
    if pred.len() != label.len() {
        log::warn!(
            "truncating prediction ({}) and label ({}) to {n} samples",
            pred.len(),
            label.len()
        );
    }
    if n < 2 {
        return Err(Error::input(format!("need at least 2 samples to score, got {n}")));
    }
    let mut per_emotion = Vec::with_capacity(pred.channels());
    let mut n_valid = 0;
    for c in 0..pred.channels() {
        let p = &pred.channel(c)[..n];
        let l = &label.channel(c)[..n];
        match pearson(p, l) {
            Ok(r) => {
                n_valid += 1;
                per_emotion.push(r);
            }
            Err(Error::DegenerateVariance(_)) => per_emotion.push(0.0),
            Err(e) => return Err(e),
        }
    }
    let per_video_mean = per_emotion.iter().sum::<f64>() / per_emotion.len() as f64;
    Ok(ScoreReport {
        per_emotion,
        per_video_mean,
        n_valid_emotions: n_valid,
    })
}

/// Unweighted mean of per-video means.
pub fn score_dataset(reports: &[ScoreReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::input("no videos to score"));
    }
    Ok(reports.iter().map(|r| r.per_video_mean).sum::<f64>() / reports.len() as f64)
}

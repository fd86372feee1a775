//! Uniformly sampled multi-channel tracks: clip segmentation, rate conversion,
//! linear interpolation and low-pass filters for label smoothing.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A uniformly sampled multi-channel signal. Sample `k` sits at
/// `start_time_s + k / rate_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrack {
    pub rate_hz: f64,
    pub start_time_s: f64,
    pub values: Matrix,
}

impl SampledTrack {
    pub fn new(rate_hz: f64, start_time_s: f64, values: Matrix) -> Result<Self> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::input(format!("sample rate must be positive, got {rate_hz}")));
        }
        if !start_time_s.is_finite() {
            return Err(Error::input("start time must be finite"));
        }
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::input("a track needs at least one sample and one channel"));
        }
        if !values.is_finite() {
            return Err(Error::numeric("track contains non-finite values"));
        }
        Ok(Self {
            rate_hz,
            start_time_s,
            values,
        })
    }

    /// Single-channel track from a series.
    pub fn from_series(rate_hz: f64, series: &[f64]) -> Result<Self> {
        Self::new(rate_hz, 0.0, Matrix::new(series.len(), 1, series.to_vec())?)
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn time_of(&self, k: usize) -> f64 {
        self.start_time_s + k as f64 / self.rate_hz
    }

    /// Duration covered from the first to the last sample.
    pub fn span_s(&self) -> f64 {
        (self.len() - 1) as f64 / self.rate_hz
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.col(c)
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> SampledTrack {
        SampledTrack {
            rate_hz: self.rate_hz,
            start_time_s: self.start_time_s,
            values: self.values.slice_rows(0, n.min(self.len())),
        }
    }

    /// Applies `f` to every channel independently, in parallel.
    fn map_channels<F>(&self, f: F) -> Result<SampledTrack>
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync,
    {
        let cols: Vec<Vec<f64>> = (0..self.channels())
            .into_par_iter()
            .map(|c| f(&self.channel(c)))
            .collect();
        let n = cols.first().map_or(0, Vec::len);
        let mut out = Matrix::zeros(n, self.channels());
        for (c, col) in cols.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                out.set(t, c, v);
            }
        }
        SampledTrack::new(self.rate_hz, self.start_time_s, out)
    }
}

/// Splits a track into consecutive non-overlapping clips of
/// `round(clip_seconds · rate)` samples. A trailing partial clip is kept only
/// when it has at least two samples.
pub fn segment_clips(track: &SampledTrack, clip_seconds: f64) -> Result<Vec<SampledTrack>> {
    if !(clip_seconds > 0.0) {
        return Err(Error::input("clip length must be positive"));
    }
    let n = (clip_seconds * track.rate_hz).round() as usize;
    if n == 0 {
        return Err(Error::input(format!(
            "clips of {clip_seconds} s hold no samples at {} Hz",
            track.rate_hz
        )));
    }
    let mut clips = Vec::new();
    let mut start = 0;
    while start < track.len() {
        let end = (start + n).min(track.len());
        if end - start == n || end - start >= 2 {
            clips.push(SampledTrack {
                rate_hz: track.rate_hz,
                start_time_s: track.time_of(start),
                values: track.values.slice_rows(start, end),
            });
        }
        start = end;
    }
    Ok(clips)
}

/// Integer ratio `a / b`, if it is one.
fn integer_ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let k = r.round();
    (k >= 1.0 && (r - k).abs() <= 1e-9 * k).then_some(k as usize)
}

/// Keeps every `rate / target`-th sample starting at index 0.
pub fn downsample(track: &SampledTrack, target_hz: f64) -> Result<SampledTrack> {
    let stride = integer_ratio(track.rate_hz, target_hz).ok_or_else(|| {
        Error::input(format!(
            "cannot downsample {} Hz to {target_hz} Hz: stride is not a positive integer",
            track.rate_hz
        ))
    })?;
    Ok(SampledTrack {
        rate_hz: target_hz,
        start_time_s: track.start_time_s,
        values: track.values.select_rows((0..track.len()).step_by(stride)),
    })
}

/// Upsamples by linear interpolation over the track's own span. Output sample
/// `j` lies at `start + j / target_hz`; the output ends at the last sample
/// time that does not pass the input's last sample.
pub fn linear_interpolate(track: &SampledTrack, target_hz: f64) -> Result<SampledTrack> {
    if !(target_hz >= track.rate_hz) {
        return Err(Error::input(format!(
            "interpolation target {target_hz} Hz is below the source rate {} Hz",
            track.rate_hz
        )));
    }
    let n_out = ((track.len() - 1) as f64 * target_hz / track.rate_hz + 1e-9).floor() as usize + 1;
    linear_interpolate_len(track, target_hz, n_out)
}

/// Like [`linear_interpolate`] but produces exactly `n_out` samples; points
/// past the last input sample take the last input value.
pub fn linear_interpolate_len(
    track: &SampledTrack,
    target_hz: f64,
    n_out: usize,
) -> Result<SampledTrack> {
    if !(target_hz >= track.rate_hz) {
        return Err(Error::input(format!(
            "interpolation target {target_hz} Hz is below the source rate {} Hz",
            track.rate_hz
        )));
    }
    if n_out == 0 {
        return Err(Error::input("interpolation needs at least one output sample"));
    }
    let last = track.len() - 1;
    let up = integer_ratio(target_hz, track.rate_hz);
    let mut out = Matrix::zeros(n_out, track.channels());
    for j in 0..n_out {
        // Bracketing input index and fractional offset.
        let (k, frac) = match up {
            Some(m) => (j / m, (j % m) as f64 / m as f64),
            None => {
                let u = j as f64 * track.rate_hz / target_hz;
                let snapped = u.round();
                if (u - snapped).abs() <= 1e-9 {
                    (snapped as usize, 0.0)
                } else {
                    (u.floor() as usize, u - u.floor())
                }
            }
        };
        let row = out.row_mut(j);
        if k >= last {
            row.copy_from_slice(track.values.row(last));
        } else if frac == 0.0 {
            row.copy_from_slice(track.values.row(k));
        } else {
            let a = track.values.row(k);
            let b = track.values.row(k + 1);
            for c in 0..row.len() {
                row[c] = a[c] + (b[c] - a[c]) * frac;
            }
        }
    }
    SampledTrack::new(target_hz, track.start_time_s, out)
}

/// Transfer-function coefficients of a digital Butterworth low-pass,
/// `a[0] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IirCoefficients {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl IirCoefficients {
    /// Bilinear transform of the analog Butterworth prototype with
    /// frequency pre-warping. `cutoff_norm` is a fraction of Nyquist.
    pub fn butterworth(cutoff_norm: f64, order: usize) -> Result<Self> {
        if !(cutoff_norm > 0.0 && cutoff_norm < 1.0) {
            return Err(Error::input(format!(
                "Butterworth cutoff must be in (0, 1) of Nyquist, got {cutoff_norm}"
            )));
        }
        let k = (std::f64::consts::FRAC_PI_2 * cutoff_norm).tan();
        match order {
            1 => {
                let b0 = k / (1.0 + k);
                Ok(Self {
                    b: vec![b0, b0],
                    a: vec![1.0, (k - 1.0) / (k + 1.0)],
                })
            }
            2 => {
                let sqrt2 = std::f64::consts::SQRT_2;
                let norm = 1.0 / (1.0 + sqrt2 * k + k * k);
                let b0 = k * k * norm;
                Ok(Self {
                    b: vec![b0, 2.0 * b0, b0],
                    a: vec![1.0, 2.0 * (k * k - 1.0) * norm, (1.0 - sqrt2 * k + k * k) * norm],
                })
            }
            _ => Err(Error::input(format!("Butterworth order must be 1 or 2, got {order}"))),
        }
    }

    /// Magnitude squared of the frequency response at `omega` rad/sample.
    pub fn gain_squared(&self, omega: f64) -> f64 {
        let eval = |c: &[f64]| {
            c.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &v)| {
                let ph = -(n as f64) * omega;
                (re + v * ph.cos(), im + v * ph.sin())
            })
        };
        let (nr, ni) = eval(&self.b);
        let (dr, di) = eval(&self.a);
        (nr * nr + ni * ni) / (dr * dr + di * di)
    }

    /// Steady-state filter state for a unit step input.
    fn step_state(&self) -> Vec<f64> {
        let n = self.a.len() - 1;
        let dc = self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>();
        let mut z = vec![0.0; n];
        for i in (0..n).rev() {
            let next = if i + 1 < n { z[i + 1] } else { 0.0 };
            z[i] = self.b[i + 1] - self.a[i + 1] * dc + next;
        }
        z
    }

    /// Direct-form II transposed filtering starting from state `zi`.
    pub fn lfilter(&self, x: &[f64], zi: &[f64]) -> Vec<f64> {
        let n = self.a.len() - 1;
        let mut z = zi.to_vec();
        z.resize(n, 0.0);
        x.iter()
            .map(|&xv| {
                let y = self.b[0] * xv + z.first().copied().unwrap_or(0.0);
                for i in 0..n {
                    let next = if i + 1 < n { z[i + 1] } else { 0.0 };
                    z[i] = self.b[i + 1] * xv - self.a[i + 1] * y + next;
                }
                y
            })
            .collect()
    }

    /// Zero-phase forward-backward filtering with odd reflection padding of
    /// `pad` samples at each end (capped at `len − 1`).
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = pad.min(n - 1);
        let (first, last) = (x[0], x[n - 1]);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

        let zi = self.step_state();
        let scaled = |v: f64| zi.iter().map(|z| z * v).collect::<Vec<_>>();
        let mut y = self.lfilter(&ext, &scaled(ext[0]));
        y.reverse();
        let mut y = self.lfilter(&y, &scaled(y[0]));
        y.reverse();
        y[pad..pad + n].to_vec()
    }
}

/// Zero-phase Butterworth low-pass applied per channel.
pub fn butterworth_filter(track: &SampledTrack, cutoff_norm: f64, order: usize) -> Result<SampledTrack> {
    let coeffs = IirCoefficients::butterworth(cutoff_norm, order)?;
    track.map_channels(|x| coeffs.filtfilt(x, 3 * order))
}

fn replicate(x: &[f64], i: isize) -> f64 {
    x[i.clamp(0, x.len() as isize - 1) as usize]
}

/// Sliding median with replicate padding of `(window − 1) / 2` at both ends.
pub fn median_filter(track: &SampledTrack, window: usize) -> Result<SampledTrack> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::input(format!(
            "median window must be odd and at least 3, got {window}"
        )));
    }
    let half = (window / 2) as isize;
    track.map_channels(|x| {
        let mut buf = vec![0.0; window];
        (0..x.len() as isize)
            .map(|t| {
                for (j, slot) in buf.iter_mut().enumerate() {
                    *slot = replicate(x, t - half + j as isize);
                }
                let (_, m, _) = buf.select_nth_unstable_by(half as usize, f64::total_cmp);
                *m
            })
            .collect()
    })
}

/// Normalized discrete Gaussian kernel over `[-ceil(4σ), ceil(4σ)]`.
pub fn gaussian_kernel(sigma_samples: f64) -> Result<Vec<f64>> {
    if !(sigma_samples > 0.0 && sigma_samples.is_finite()) {
        return Err(Error::input(format!("Gaussian sigma must be positive, got {sigma_samples}")));
    }
    let radius = (4.0 * sigma_samples).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma_samples * sigma_samples)).exp())
        .collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// Gaussian smoothing with replicate edge padding.
pub fn gaussian_filter(track: &SampledTrack, sigma_samples: f64) -> Result<SampledTrack> {
    let kernel = gaussian_kernel(sigma_samples)?;
    let radius = (kernel.len() / 2) as isize;
    track.map_channels(|x| {
        (0..x.len() as isize)
            .map(|t| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * replicate(x, t + j as isize - radius))
                    .sum()
            })
            .collect()
    })
}

/// Label low-pass filter selection with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelFilter {
    Butterworth { cutoff_norm: f64, order: usize },
    Median { window: usize },
    Gaussian { sigma_samples: f64 },
}

impl LabelFilter {
    pub const DEFAULT_BUTTERWORTH: LabelFilter = LabelFilter::Butterworth {
        cutoff_norm: 0.1,
        order: 2,
    };
    pub const DEFAULT_MEDIAN: LabelFilter = LabelFilter::Median { window: 5 };
    pub const DEFAULT_GAUSSIAN: LabelFilter = LabelFilter::Gaussian { sigma_samples: 3.0 };

    pub fn apply(&self, track: &SampledTrack) -> Result<SampledTrack> {
        match *self {
            LabelFilter::Butterworth { cutoff_norm, order } => {
                butterworth_filter(track, cutoff_norm, order)
            }
            LabelFilter::Median { window } => median_filter(track, window),
            LabelFilter::Gaussian { sigma_samples } => gaussian_filter(track, sigma_samples),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(rate: f64, v: &[f64]) -> SampledTrack {
        SampledTrack::from_series(rate, v).unwrap()
    }

    fn ramp(n: usize, rate: f64) -> SampledTrack {
        series(rate, &(0..n).map(|k| k as f64).collect::<Vec<_>>())
    }

    #[test]
    fn segment_examples() {
        let clips = segment_clips(&ramp(250, 1.0), 60.0).unwrap();
        let lens: Vec<_> = clips.iter().map(SampledTrack::len).collect();
        assert_eq!(lens, vec![60, 60, 60, 60, 10]);
        assert_eq!(clips[2].start_time_s, 120.0);
        assert_eq!(clips[4].values.get(0, 0), 240.0);

        let t = ramp(60, 1.0);
        let one = segment_clips(&t, 60.0).unwrap();
        assert_eq!(one, vec![t]);

        let lens: Vec<_> = segment_clips(&ramp(61, 1.0), 60.0)
            .unwrap()
            .iter()
            .map(SampledTrack::len)
            .collect();
        assert_eq!(lens, vec![60]);
        assert!(segment_clips(&ramp(5, 1.0), 0.0).is_err());
    }

    #[test]
    fn downsample_examples() {
        let t = ramp(12, 6.0);
        let d = downsample(&t, 1.0).unwrap();
        assert_eq!(d.values.data(), &[0.0, 6.0]);
        assert_eq!(d.rate_hz, 1.0);
        assert_eq!(downsample(&t, 6.0).unwrap(), t);
        assert!(matches!(downsample(&t, 4.0), Err(Error::Input(_))));
    }

    #[test]
    fn interpolation_examples() {
        let out = linear_interpolate(&series(1.0, &[0.0, 0.6]), 6.0).unwrap();
        let text: Vec<String> = out.values.data().iter().map(|v| format!("{v:.1}")).collect();
        assert_eq!(text, ["0.0", "0.1", "0.2", "0.3", "0.4", "0.5", "0.6"]);
        assert_eq!(out.rate_hz, 6.0);

        let t = series(2.0, &[0.3, -1.0, 4.0]);
        assert_eq!(linear_interpolate(&t, 2.0).unwrap(), t);
        assert!(linear_interpolate(&t, 1.0).is_err());

        let single = linear_interpolate_len(&series(1.0, &[0.4]), 6.0, 6).unwrap();
        assert!(single.values.data().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn interpolation_clamps_past_the_end() {
        let out = linear_interpolate_len(&series(1.0, &[0.0, 1.0]), 6.0, 10).unwrap();
        assert_eq!(out.values.get(6, 0), 1.0);
        assert_eq!(out.values.get(9, 0), 1.0);
    }

    #[test]
    fn non_integer_ratio_interpolation() {
        let t = series(2.0, &[1.0, 2.0, 3.0, 4.0]);
        let out = linear_interpolate(&t, 3.0).unwrap();
        // span 1.5 s at 3 Hz → 5 points at input positions 0, 2/3, 4/3, 2, 8/3
        assert_eq!(out.len(), 5);
        for (j, v) in out.values.data().iter().enumerate() {
            assert!((v - (1.0 + j as f64 * 2.0 / 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn butterworth_coefficients() {
        // order 1, cutoff 0.5: K = tan(π/4) = 1 → y[n] = (x[n] + x[n−1]) / 2
        let c = IirCoefficients::butterworth(0.5, 1).unwrap();
        assert!((c.b[0] - 0.5).abs() < 1e-15 && (c.b[1] - 0.5).abs() < 1e-15);
        assert!(c.a[1].abs() < 1e-15);
        let mut impulse = vec![0.0; 5];
        impulse[0] = 1.0;
        let h = c.lfilter(&impulse, &[0.0]);
        for (got, want) in h.iter().zip([0.5, 0.5, 0.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-15);
        }

        // Reference values for a 2nd-order design at 0.1 Nyquist.
        let c = IirCoefficients::butterworth(0.1, 2).unwrap();
        let b = [0.020083365564211, 0.040166731128422, 0.020083365564211];
        let a = [1.0, -1.561018075800718, 0.641351538057563];
        for (x, y) in c.b.iter().zip(b).chain(c.a.iter().zip(a)) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        assert!(IirCoefficients::butterworth(1.0, 2).is_err());
        assert!(IirCoefficients::butterworth(0.2, 3).is_err());
    }

    #[test]
    fn butterworth_rejects_alternating_signal() {
        let c = IirCoefficients::butterworth(0.1, 2).unwrap();
        assert!(c.gain_squared(std::f64::consts::PI) < 1e-20);
        assert!((c.gain_squared(0.0) - 1.0).abs() < 1e-12);
        let alt: Vec<f64> = (0..200).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let out = butterworth_filter(&series(6.0, &alt), 0.1, 2).unwrap();
        // Odd reflection of an alternating signal has a nonzero local mean,
        // so the edge transient is excluded here.
        let interior = &out.values.data()[30..170];
        assert!(interior.iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn filters_preserve_constants() {
        let t = series(6.0, &[0.37; 40]);
        for f in [
            LabelFilter::DEFAULT_BUTTERWORTH,
            LabelFilter::Butterworth { cutoff_norm: 0.3, order: 1 },
            LabelFilter::DEFAULT_MEDIAN,
            LabelFilter::DEFAULT_GAUSSIAN,
        ] {
            let out = f.apply(&t).unwrap();
            assert!(out.values.data().iter().all(|v| (v - 0.37).abs() <= 1e-9), "{f:?}");
        }
    }

    #[test]
    fn median_examples() {
        let out = median_filter(&series(1.0, &[1.0, 9.0, 1.0, 1.0, 1.0]), 3).unwrap();
        assert_eq!(out.values.data(), &[1.0; 5]);
        let r = ramp(20, 1.0);
        let out = median_filter(&r, 5).unwrap();
        assert_eq!(&out.values.data()[2..18], &r.values.data()[2..18]);
        assert!(median_filter(&r, 4).is_err());
        assert!(median_filter(&r, 1).is_err());
    }

    #[test]
    fn gaussian_impulse_response() {
        let mut x = vec![0.0; 21];
        x[10] = 1.0;
        let out = gaussian_filter(&series(1.0, &x), 1.0).unwrap();
        // exp(−k²/2) for k = −4..4, normalized
        let weights: Vec<f64> = (-4i32..=4).map(|k| (-(k * k) as f64 / 2.0).exp()).collect();
        let z: f64 = weights.iter().sum();
        assert!((out.values.get(10, 0) - 1.0 / z).abs() < 1e-15);
        assert!((out.values.get(12, 0) - weights[6] / z).abs() < 1e-15);
        assert_eq!(out.values.get(15, 0), 0.0);
        assert!(gaussian_filter(&series(1.0, &x), 0.0).is_err());
    }

    #[test]
    fn filters_are_channel_independent() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|t| vec![(t as f64 * 0.3).sin(), (t as f64 * 0.7).cos(), (t % 4) as f64])
            .collect();
        let multi = SampledTrack::new(6.0, 0.0, Matrix::from_rows(&rows).unwrap()).unwrap();
        for f in [
            LabelFilter::DEFAULT_BUTTERWORTH,
            LabelFilter::DEFAULT_MEDIAN,
            LabelFilter::DEFAULT_GAUSSIAN,
        ] {
            let out = f.apply(&multi).unwrap();
            for c in 0..3 {
                let alone = f.apply(&series(6.0, &multi.channel(c))).unwrap();
                assert_eq!(out.channel(c), alone.channel(0));
            }
        }
    }

    proptest! {
        #[test]
        fn affine_signals_interpolate_exactly(
            a in -2.0f64..2.0, b in -2.0f64..2.0, n in 1usize..40, up in 1usize..8
        ) {
            let v: Vec<f64> = (0..n).map(|k| a * k as f64 + b).collect();
            let out = linear_interpolate(&series(1.0, &v), up as f64).unwrap();
            prop_assert_eq!(out.len(), (n - 1) * up + 1);
            for (j, y) in out.values.data().iter().enumerate() {
                prop_assert!((y - (a * j as f64 / up as f64 + b)).abs() <= 1e-12);
            }
            for k in 0..n {
                prop_assert_eq!(out.values.get(k * up, 0), v[k]);
            }
            let back = downsample(&out, 1.0).unwrap();
            prop_assert_eq!(back.values.data(), &v[..]);
        }

        #[test]
        fn smoothing_stays_in_range(v in proptest::collection::vec(-1.0f64..1.0, 3..60), sigma in 0.3f64..6.0) {
            let t = series(6.0, &v);
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for f in [LabelFilter::Gaussian { sigma_samples: sigma }, LabelFilter::DEFAULT_MEDIAN] {
                let out = f.apply(&t).unwrap();
                prop_assert!(out.values.data().iter().all(|&y| y >= lo - 1e-12 && y <= hi + 1e-12));
            }
        }
    }
}

//! Time-frequency analysis and synthesis, mel compression and network input
//! features.
//!
//! Spectrograms are stored frame-major: frame `t` occupies the contiguous
//! slice `bins[t * n_bins .. (t + 1) * n_bins]`. Analysis and synthesis both
//! use a periodic square-root Hann window, so at 50% overlap the squared
//! windows sum to one and the weighted overlap-add inverts the transform.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis};
use rustfft::FftPlanner;

pub use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// Floor added to mel magnitudes before the log.
pub const LOG_FLOOR: f64 = 1e-6;
/// Smallest standard deviation used for feature normalization.
pub const STD_FLOOR: f64 = 1e-8;
/// Ridge term of the normal equations used for the mel pseudo-inverse.
pub const PINV_RIDGE: f64 = 1e-8;

/// A mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.energy() / self.samples.len() as f64
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One-sided short-time spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    bins: Vec<Complex64>,
    n_bins: usize,
    n_frames: usize,
    frame_len: usize,
    hop: usize,
    sample_rate: u32,
    signal_len: usize,
}

impl Spectrogram {
    /// Builds a spectrogram from frame-major bins, validating the framing.
    pub fn new(
        bins: Vec<Complex64>,
        n_frames: usize,
        frame_len: usize,
        hop: usize,
        sample_rate: u32,
        signal_len: usize,
    ) -> Result<Self> {
        let n_bins = frame_len / 2 + 1;
        if frame_len < 2 || n_frames == 0 || hop == 0 {
            return Err(Error::FrameMetadata(format!(
                "frame_len={frame_len} hop={hop} frames={n_frames}"
            )));
        }
        if bins.len() != n_bins * n_frames {
            return Err(Error::Shape(format!(
                "{} bins for {n_frames} frames of {n_bins}",
                bins.len()
            )));
        }
        if bins.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram"));
        }
        Ok(Self {
            bins,
            n_bins,
            n_frames,
            frame_len,
            hop,
            sample_rate,
            signal_len,
        })
    }

    /// A single-frame-length, arbitrary-bin spectrogram without a waveform
    /// behind it. Used for toy problems that never call [`istft`].
    pub fn from_bins(bins: Vec<Complex64>, n_bins: usize, n_frames: usize) -> Result<Self> {
        if n_bins == 0 || n_frames == 0 || bins.len() != n_bins * n_frames {
            return Err(Error::Shape(format!(
                "{} bins for {n_frames} frames of {n_bins}",
                bins.len()
            )));
        }
        Ok(Self {
            bins,
            n_bins,
            n_frames,
            frame_len: 2 * (n_bins - 1),
            hop: (n_bins - 1).max(1),
            sample_rate: 1,
            signal_len: 0,
        })
    }

    /// Same framing, new contents.
    pub fn with_bins(&self, bins: Vec<Complex64>) -> Result<Self> {
        if bins.len() != self.bins.len() {
            return Err(Error::Shape(format!(
                "{} bins, expected {}",
                bins.len(),
                self.bins.len()
            )));
        }
        Ok(Self {
            bins,
            ..self.clone()
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            bins: vec![Complex64::new(0.0, 0.0); self.bins.len()],
            ..self.clone()
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Length of the waveform this spectrogram was computed from.
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex64] {
        &mut self.bins
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.bins[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.bins[frame * self.n_bins + bin]
    }

    pub fn same_shape(&self, other: &Spectrogram) -> bool {
        self.n_bins == other.n_bins && self.n_frames == other.n_frames
    }

    /// Total energy over the stored (one-sided) bins.
    pub fn energy(&self) -> f64 {
        self.bins.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Magnitudes as a `frames x bins` matrix.
    pub fn magnitudes(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_frames, self.n_bins), |(t, k)| self.get(k, t).norm())
    }
}

/// Periodic square-root Hann window of length `n`.
pub fn sqrt_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt())
        .collect()
}

fn check_framing(frame_len: usize, hop: usize) -> Result<()> {
    if !frame_len.is_power_of_two() || frame_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "frame length {frame_len} is not a power of two"
        )));
    }
    if hop != frame_len / 2 {
        return Err(Error::InvalidArgument(format!(
            "hop {hop} must be half the frame length {frame_len}"
        )));
    }
    Ok(())
}

/// Number of full frames that fit in `len` samples.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len {
        0
    } else {
        (len - frame_len) / hop + 1
    }
}

/// Short-time Fourier transform without padding.
pub fn stft(w: &Waveform, frame_len: usize, hop: usize) -> Result<Spectrogram> {
    check_framing(frame_len, hop)?;
    if w.len() < frame_len {
        return Err(Error::InputTooShort {
            needed: frame_len,
            got: w.len(),
        });
    }
    let n_frames = frame_count(w.len(), frame_len, hop);
    let n_bins = frame_len / 2 + 1;
    let window = sqrt_hann(frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_len);

    let mut bins = Vec::with_capacity(n_bins * n_frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); frame_len];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        bins.extend_from_slice(&buf[..n_bins]);
    }
    Spectrogram::new(bins, n_frames, frame_len, hop, w.sample_rate, w.len())
}

/// Weighted overlap-add inverse of [`stft`].
///
/// The output is normalized by the summed squared synthesis window wherever
/// that sum is nonzero, so every sample covered by at least one frame with a
/// nonzero window value is reconstructed. Samples past the last frame are
/// zero.
pub fn istft(spec: &Spectrogram) -> Result<Waveform> {
    let frame_len = spec.frame_len;
    let hop = spec.hop;
    check_framing(frame_len, hop).map_err(|e| Error::FrameMetadata(e.to_string()))?;
    if spec.n_bins != frame_len / 2 + 1 {
        return Err(Error::FrameMetadata(format!(
            "{} bins for frame length {frame_len}",
            spec.n_bins
        )));
    }
    let covered = (spec.n_frames - 1) * hop + frame_len;
    if spec.signal_len < covered || frame_count(spec.signal_len, frame_len, hop) != spec.n_frames
    {
        return Err(Error::FrameMetadata(format!(
            "signal length {} inconsistent with {} frames",
            spec.signal_len, spec.n_frames
        )));
    }

    let window = sqrt_hann(frame_len);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(frame_len);
    let mut out = vec![0.0; spec.signal_len];
    let mut wsum = vec![0.0; covered];
    let mut buf = vec![Complex64::new(0.0, 0.0); frame_len];
    let half = frame_len / 2;
    let scale = 1.0 / frame_len as f64;

    for t in 0..spec.n_frames {
        let frame = spec.frame(t);
        buf[0] = Complex64::new(frame[0].re, 0.0);
        buf[half] = Complex64::new(frame[half].re, 0.0);
        for k in 1..half {
            buf[k] = frame[k];
            buf[frame_len - k] = frame[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..frame_len {
            out[start + i] += buf[i].re * scale * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    for (y, &s) in out.iter_mut().zip(&wsum) {
        if s > 1e-10 {
            *y /= s;
        }
    }
    Waveform::new(out, spec.sample_rate)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank with a pseudo-inverse for expanding mel-domain
/// vectors back to linear frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `bands x bins`, nonnegative.
    pub forward: Array2<f64>,
    /// `bins x bands`.
    pub inverse: Array2<f64>,
}

impl MelFilterbank {
    pub fn bands(&self) -> usize {
        self.forward.nrows()
    }

    pub fn bins(&self) -> usize {
        self.forward.ncols()
    }

    /// Pass-through "filterbank" with one band per bin.
    pub fn identity(n: usize) -> Self {
        Self {
            forward: Array2::eye(n),
            inverse: Array2::eye(n),
        }
    }

    /// `frames x bins` -> `frames x bands`.
    pub fn project_frames(&self, v: ArrayView2<f64>) -> Array2<f64> {
        v.dot(&self.forward.t())
    }

    /// `frames x bands` -> `frames x bins`, unclamped.
    pub fn expand_frames(&self, m: ArrayView2<f64>) -> Array2<f64> {
        m.dot(&self.inverse.t())
    }
}

/// Builds `bands` triangular filters whose centers are equally spaced on the
/// HTK mel scale from 0 Hz to Nyquist inclusive. Each filter rises from the
/// previous center to its own and falls to the next, so the filters form a
/// partition of unity over frequency; rows are then scaled to unit sum so a
/// mel-domain gain of `g` expands to a linear gain of `g` in every bin.
pub fn make_mel_filterbank(bands: usize, frame_len: usize, sample_rate: u32) -> Result<MelFilterbank> {
    let bins = frame_len / 2 + 1;
    if bands < 2 {
        return Err(Error::InvalidArgument("need at least 2 mel bands".into()));
    }
    if bands >= bins {
        return Err(Error::FilterbankTooWide { bands, bins });
    }
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let centers: Vec<f64> = (0..bands)
        .map(|b| mel_to_hz(mel_max * b as f64 / (bands - 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / frame_len as f64;

    let mut forward = Array2::<f64>::zeros((bands, bins));
    for b in 0..bands {
        let c = centers[b];
        let lo = if b > 0 { Some(centers[b - 1]) } else { None };
        let hi = if b + 1 < bands { Some(centers[b + 1]) } else { None };
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let v = if f == c {
                1.0
            } else if f < c {
                lo.map_or(0.0, |lo| if f > lo { (f - lo) / (c - lo) } else { 0.0 })
            } else {
                hi.map_or(0.0, |hi| if f < hi { (hi - f) / (hi - c) } else { 0.0 })
            };
            forward[[b, k]] = v;
        }
        let sum: f64 = forward.row(b).sum();
        if sum <= 0.0 {
            // Narrower than a bin: fall back to the nearest bin.
            let k = ((c / bin_hz).round() as usize).min(bins - 1);
            forward[[b, k]] = 1.0;
        }
    }
    for mut row in forward.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    let inverse = pseudo_inverse(&forward)?;
    Ok(MelFilterbank { forward, inverse })
}

/// Right pseudo-inverse `F^T (F F^T)^-1` of a full-row-rank matrix, solved
/// through ridge-regularized normal equations with two rounds of iterative
/// refinement against the unregularized system.
fn pseudo_inverse(f: &Array2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = f.dim();
    let fm = DMatrix::from_fn(rows, cols, |i, j| f[[i, j]]);
    let gram = &fm * fm.transpose();
    let ridged = &gram + DMatrix::identity(rows, rows) * PINV_RIDGE;
    let chol = ridged
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("mel normal equations not positive definite".into()))?;
    let mut y = chol.solve(&fm);
    for _ in 0..2 {
        let residual = &fm - &gram * &y;
        y += chol.solve(&residual);
    }
    Ok(Array2::from_shape_fn((cols, rows), |(i, j)| y[(j, i)]))
}

/// Compresses a linear-frequency vector to mel bands.
pub fn mel_project(fb: &MelFilterbank, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != fb.bins() {
        return Err(Error::Shape(format!(
            "vector of length {} for {} bins",
            v.len(),
            fb.bins()
        )));
    }
    Ok(fb
        .forward
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect())
}

pub fn clamp_range(x: f64, lo: f64, hi: Option<f64>) -> f64 {
    let x = x.max(lo);
    match hi {
        Some(hi) => x.min(hi),
        None => x,
    }
}

/// Expands a mel vector to linear frequency and clamps it to `[lo, hi]`.
pub fn mel_reconstruct(fb: &MelFilterbank, m: &[f64], lo: f64, hi: Option<f64>) -> Result<Vec<f64>> {
    if m.len() != fb.bands() {
        return Err(Error::Shape(format!(
            "vector of length {} for {} bands",
            m.len(),
            fb.bands()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("mel vector"));
    }
    Ok(fb
        .inverse
        .rows()
        .into_iter()
        .map(|row| clamp_range(row.iter().zip(m).map(|(a, b)| a * b).sum(), lo, hi))
        .collect())
}

/// One context-stacked network input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub values: Vec<f64>,
    pub frame_index: usize,
}

/// Per-dimension normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Population mean and standard deviation over the rows of all given
    /// matrices. The mean is accumulated relative to the first row so a
    /// dimension that never changes gets exactly that value as its mean.
    pub fn estimate<'a, I>(matrices: I) -> Result<Self>
    where
        I: IntoIterator<Item = ArrayView2<'a, f64>>,
    {
        let mut count = 0usize;
        let mut origin: Option<Vec<f64>> = None;
        let mut sum = Vec::new();
        let mut sum_sq = Vec::new();
        for m in matrices {
            for row in m.rows() {
                let o = origin.get_or_insert_with(|| {
                    sum = vec![0.0; row.len()];
                    sum_sq = vec![0.0; row.len()];
                    row.to_vec()
                });
                if row.len() != o.len() {
                    return Err(Error::Shape("feature rows of differing length".into()));
                }
                for (j, &x) in row.iter().enumerate() {
                    let d = x - o[j];
                    sum[j] += d;
                    sum_sq[j] += d * d;
                }
                count += 1;
            }
        }
        let origin = origin.ok_or_else(|| Error::InvalidArgument("no feature frames".into()))?;
        let n = count as f64;
        let mut mean = Vec::with_capacity(origin.len());
        let mut std = Vec::with_capacity(origin.len());
        for j in 0..origin.len() {
            let m = sum[j] / n;
            mean.push(origin[j] + m);
            std.push((sum_sq[j] / n - m * m).max(0.0).sqrt().max(STD_FLOOR));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Log-mel context-stacked features as a `frames x (2q+1)*bands` matrix.
pub fn feature_matrix(
    spec: &Spectrogram,
    fb: &MelFilterbank,
    q: usize,
    stats: Option<&FeatureStats>,
) -> Result<Array2<f64>> {
    if spec.n_bins() != fb.bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, filterbank {}",
            spec.n_bins(),
            fb.bins()
        )));
    }
    let bands = fb.bands();
    let dim = (2 * q + 1) * bands;
    if let Some(s) = stats {
        if s.mean.len() != dim || s.std.len() != dim {
            return Err(Error::Shape(format!(
                "stats of dimension {} for features of dimension {dim}",
                s.mean.len()
            )));
        }
    }
    let log_mel = fb
        .project_frames(spec.magnitudes().view())
        .mapv(|x| (x + LOG_FLOOR).ln());
    let t_max = spec.n_frames() as isize - 1;
    let mut out = Array2::<f64>::zeros((spec.n_frames(), dim));
    for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        for (c, offset) in (-(q as isize)..=q as isize).enumerate() {
            let src = (t as isize + offset).clamp(0, t_max) as usize;
            row.slice_mut(ndarray::s![c * bands..(c + 1) * bands])
                .assign(&log_mel.row(src));
        }
        if let Some(s) = stats {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - s.mean[j]) / s.std[j];
            }
        }
    }
    Ok(out)
}

/// Log-mel context-stacked features, one [`FeatureFrame`] per frame.
pub fn make_features(
    spec: &Spectrogram,
    fb: &MelFilterbank,
    q: usize,
    stats: Option<&FeatureStats>,
) -> Result<Vec<FeatureFrame>> {
    let m = feature_matrix(spec, fb, q, stats)?;
    Ok(m.rows()
        .into_iter()
        .enumerate()
        .map(|(frame_index, row)| FeatureFrame {
            values: row.to_vec(),
            frame_index,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap()
    }

    /// Direct O(N^2) DFT of a real sequence.
    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (i, &v)| {
                    let ang = -2.0 * PI * (k * i % n) as f64 / n as f64;
                    acc + Complex64::new(v * ang.cos(), v * ang.sin())
                })
            })
            .collect()
    }

    #[test]
    fn zero_waveform_gives_zero_spectrogram() {
        let s = stft(&Waveform::zeros(2000, 16000), 512, 256).unwrap();
        assert!(s.bins().iter().all(|c| c.norm() == 0.0));
        let w = istft(&s).unwrap();
        assert_eq!(w.len(), 2000);
        assert!(w.samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn frame_count_matches_formula() {
        let s = stft(&Waveform::zeros(1024, 16000), 512, 256).unwrap();
        assert_eq!(s.n_frames(), 3);
        assert_eq!(s.n_bins(), 257);
    }

    #[test]
    fn too_short_is_rejected() {
        let err = stft(&Waveform::zeros(511, 16000), 512, 256).unwrap_err();
        assert!(err.to_string().contains("input too short"));
    }

    #[test]
    fn bad_framing_is_rejected() {
        assert!(stft(&Waveform::zeros(2048, 16000), 500, 250).is_err());
        assert!(stft(&Waveform::zeros(2048, 16000), 512, 128).is_err());
    }

    #[test]
    fn cosine_bin_matches_direct_dft() {
        let n = 512;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * 8.0 * i as f64 / n as f64).cos())
            .collect();
        let s = stft(&Waveform::new(x.clone(), 16000).unwrap(), n, n / 2).unwrap();
        assert_eq!(s.n_frames(), 1);
        let win = sqrt_hann(n);
        let windowed: Vec<f64> = x.iter().zip(&win).map(|(a, b)| a * b).collect();
        let oracle = naive_dft(&windowed)[8].norm();
        let got = s.get(8, 0).norm();
        assert!((got - oracle).abs() <= 1e-9 * oracle, "{got} vs {oracle}");
    }

    #[test]
    fn round_trip_reconstructs_interior() {
        let w = noise(16000, 3);
        let back = istft(&stft(&w, 512, 256).unwrap()).unwrap();
        assert_eq!(back.len(), w.len());
        let end = w.len() - 512;
        for i in 512..end {
            assert!((back.samples[i] - w.samples[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn round_trip_covers_edges_except_first_sample() {
        // 16000 = 61 * 256 + 384: the last 128 samples are never analysed.
        let w = noise(16000, 4);
        let back = istft(&stft(&w, 512, 256).unwrap()).unwrap();
        let covered = 61 * 256 + 256;
        for i in 1..covered {
            assert!((back.samples[i] - w.samples[i]).abs() <= 1e-9, "sample {i}");
        }
        assert!(back.samples[covered..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn parseval_within_3_db() {
        let w = noise(8192, 9);
        let s = stft(&w, 512, 256).unwrap();
        let half = s.n_bins() - 1;
        let mut spec_e = 0.0;
        for t in 0..s.n_frames() {
            for (k, c) in s.frame(t).iter().enumerate() {
                let mult = if k == 0 || k == half { 1.0 } else { 2.0 };
                spec_e += mult * c.norm_sqr();
            }
        }
        spec_e /= 512.0;
        let dft = naive_dft(&w.samples);
        let oracle: f64 = dft.iter().map(|c| c.norm_sqr()).sum::<f64>() / w.len() as f64;
        let db = 10.0 * (spec_e / oracle).log10();
        assert!(db.abs() <= 3.0, "{db} dB");
    }

    #[test]
    fn istft_rejects_inconsistent_metadata() {
        let s = stft(&noise(2048, 1), 512, 256).unwrap();
        let bad = Spectrogram {
            signal_len: 100,
            ..s.clone()
        };
        assert!(matches!(istft(&bad), Err(Error::FrameMetadata(_))));
        let toy = Spectrogram::from_bins(vec![Complex64::new(1.0, 0.0)], 1, 1).unwrap();
        assert!(istft(&toy).is_err());
    }

    #[test]
    fn identity_mask_path_is_exact() {
        let w = noise(4000, 5);
        let s = stft(&w, 512, 256).unwrap();
        let ones: Vec<Complex64> = s.bins().iter().map(|c| c * 1.0).collect();
        let masked = s.with_bins(ones).unwrap();
        assert_eq!(istft(&masked).unwrap(), istft(&s).unwrap());
    }

    #[test]
    fn filterbank_shape_and_rows() {
        let fb = make_mel_filterbank(64, 512, 16000).unwrap();
        assert_eq!(fb.forward.dim(), (64, 257));
        assert_eq!(fb.inverse.dim(), (257, 64));
        for row in fb.forward.rows() {
            assert!(row.iter().any(|&x| x > 0.0));
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn filterbank_pseudo_inverse_identity() {
        for bands in [8, 16, 64] {
            let fb = make_mel_filterbank(bands, 512, 16000).unwrap();
            let fgf = fb.forward.dot(&fb.inverse).dot(&fb.forward);
            let max = fb.forward.iter().cloned().fold(0.0, f64::max);
            let err = (&fgf - &fb.forward).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(err <= 1e-8 * max, "bands={bands} err={err}");
        }
    }

    #[test]
    fn constant_mel_gain_expands_to_constant_linear_gain() {
        let fb = make_mel_filterbank(64, 512, 16000).unwrap();
        let lin = mel_reconstruct(&fb, &[0.5; 64], 0.0, Some(1.0)).unwrap();
        for x in lin {
            assert!((x - 0.5).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn filterbank_too_wide() {
        let err = make_mel_filterbank(257, 512, 16000).unwrap_err();
        assert!(err.to_string().contains("filterbank wider than spectrum"));
        assert!(make_mel_filterbank(1, 512, 16000).is_err());
    }

    #[test]
    fn row_space_round_trip() {
        let fb = make_mel_filterbank(64, 512, 16000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coeffs: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        // v = F^T c lies in the row space of F.
        let v: Vec<f64> = (0..257)
            .map(|k| (0..64).map(|b| fb.forward[[b, k]] * coeffs[b]).sum())
            .collect();
        let m = mel_project(&fb, &v).unwrap();
        let back = mel_reconstruct(&fb, &m, f64::NEG_INFINITY, None).unwrap();
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() <= 1e-6);
        }
        let m2 = mel_project(&fb, &back).unwrap();
        for (a, b) in m.iter().zip(&m2) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn mel_project_basic_cases() {
        let fb = make_mel_filterbank(16, 512, 16000).unwrap();
        assert!(mel_project(&fb, &[0.0; 257]).unwrap().iter().all(|&x| x == 0.0));
        let ones = mel_project(&fb, &[1.0; 257]).unwrap();
        for (b, x) in ones.iter().enumerate() {
            assert!((x - fb.forward.row(b).sum()).abs() < 1e-12);
        }
        assert!(mel_project(&fb, &[1.0; 10]).is_err());
    }

    #[test]
    fn mel_project_matches_double_loop() {
        let fb = make_mel_filterbank(64, 512, 16000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..257).map(|_| rng.random_range(0.0..10.0)).collect();
        let got = mel_project(&fb, &v).unwrap();
        for b in 0..64 {
            let mut acc = 0.0;
            for k in 0..257 {
                acc += fb.forward[[b, k]] * v[k];
            }
            assert!((got[b] - acc).abs() <= 1e-12);
        }
    }

    #[test]
    fn mel_reconstruct_clamps() {
        let fb = make_mel_filterbank(64, 512, 16000).unwrap();
        assert!(mel_reconstruct(&fb, &[0.0; 64], 0.0, Some(1.0))
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let ones = mel_reconstruct(&fb, &[1.0; 64], 0.0, Some(1.0)).unwrap();
        assert!(ones.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let var = mel_reconstruct(&fb, &[-1.0; 64], 1e-4, None).unwrap();
        assert!(var.iter().all(|&x| x >= 1e-4));
        assert!(mel_reconstruct(&fb, &[0.0; 3], 0.0, None).is_err());
    }

    #[test]
    fn feature_dimensions() {
        let fb = make_mel_filterbank(64, 512, 16000).unwrap();
        let s = stft(&noise(4096, 1), 512, 256).unwrap();
        let f = make_features(&s, &fb, 5, None).unwrap();
        assert_eq!(f.len(), s.n_frames());
        assert!(f.iter().all(|x| x.values.len() == 704));
    }

    #[test]
    fn zero_context_is_log_mel() {
        let fb = make_mel_filterbank(16, 512, 16000).unwrap();
        let s = stft(&noise(2048, 7), 512, 256).unwrap();
        let f = make_features(&s, &fb, 0, None).unwrap();
        for (t, frame) in f.iter().enumerate() {
            let mags: Vec<f64> = s.frame(t).iter().map(|c| c.norm()).collect();
            let mel = mel_project(&fb, &mags).unwrap();
            for (a, m) in frame.values.iter().zip(mel) {
                assert!((a - (m + LOG_FLOOR).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_repeats_edge_frames() {
        let fb = make_mel_filterbank(8, 64, 16000).unwrap();
        let s = stft(&noise(64 * 4, 8), 64, 32).unwrap();
        let f0 = make_features(&s, &fb, 0, None).unwrap();
        let f2 = make_features(&s, &fb, 2, None).unwrap();
        let last = s.n_frames() - 1;
        // First frame: slots -2 and -1 repeat frame 0.
        for slot in 0..3 {
            assert_eq!(&f2[0].values[slot * 8..(slot + 1) * 8], &f0[0].values[..]);
        }
        for slot in 2..5 {
            assert_eq!(&f2[last].values[slot * 8..(slot + 1) * 8], &f0[last].values[..]);
        }
    }

    #[test]
    fn normalizing_by_own_stats_of_constant_input_gives_zero() {
        let fb = make_mel_filterbank(16, 512, 16000).unwrap();
        let frame: Vec<Complex64> = (0..257).map(|k| Complex64::new(1.0 + k as f64, 0.5)).collect();
        let bins: Vec<Complex64> = (0..6).flat_map(|_| frame.clone()).collect();
        let s = Spectrogram::new(bins, 6, 512, 256, 16000, 512 + 5 * 256).unwrap();
        let raw = feature_matrix(&s, &fb, 2, None).unwrap();
        let stats = FeatureStats::estimate([raw.view()]).unwrap();
        assert!(stats.std.iter().all(|&s| s == STD_FLOOR));
        let norm = feature_matrix(&s, &fb, 2, Some(&stats)).unwrap();
        assert!(norm.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stats_dimension_mismatch() {
        let fb = make_mel_filterbank(16, 512, 16000).unwrap();
        let s = stft(&noise(2048, 7), 512, 256).unwrap();
        let stats = FeatureStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        assert!(make_features(&s, &fb, 0, Some(&stats)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn stft_istft_round_trip(seed in any::<u64>(), len in 1024usize..6000, amp in 1e-3f64..100.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = Waveform::new((0..len).map(|_| amp * rng.random_range(-1.0..1.0)).collect(), 16000).unwrap();
                let back = istft(&stft(&w, 256, 128).unwrap()).unwrap();
                for i in 256..len.saturating_sub(256) {
                    prop_assert!((back.samples[i] - w.samples[i]).abs() <= 1e-6);
                }
            }

            #[test]
            fn mel_project_is_linear(seed in any::<u64>(), a in -5.0f64..5.0, b in -5.0f64..5.0) {
                let fb = make_mel_filterbank(16, 256, 16000).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let u: Vec<f64> = (0..129).map(|_| rng.random_range(0.0..3.0)).collect();
                let v: Vec<f64> = (0..129).map(|_| rng.random_range(0.0..3.0)).collect();
                let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
                let pu = mel_project(&fb, &u).unwrap();
                let pv = mel_project(&fb, &v).unwrap();
                let pm = mel_project(&fb, &mix).unwrap();
                for i in 0..16 {
                    prop_assert!((pm[i] - (a * pu[i] + b * pv[i])).abs() <= 1e-9);
                }
            }

            #[test]
            fn features_are_finite(seed in any::<u64>(), scale in 0.0f64..1e3) {
                let fb = make_mel_filterbank(16, 256, 16000).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bins: Vec<Complex64> = (0..129 * 4)
                    .map(|_| Complex64::new(scale * rng.random_range(0.0..1.0), 0.0))
                    .collect();
                let s = Spectrogram::new(bins, 4, 256, 128, 16000, 256 + 3 * 128).unwrap();
                let f = feature_matrix(&s, &fb, 3, None).unwrap();
                prop_assert!(f.iter().all(|x| x.is_finite()));
            }
        }
    }
}

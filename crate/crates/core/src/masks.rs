//! Time-frequency masks: oracle definitions, application, and musical-noise
//! post-processing.

use crate::dsp::{Complex64, Spectrogram};
use crate::error::{Error, Result};

/// Real gains in `[0, 1]`, frame-major like [`Spectrogram`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    gains: Vec<f64>,
    n_bins: usize,
    n_frames: usize,
}

impl MaskMatrix {
    pub fn new(gains: Vec<f64>, n_bins: usize, n_frames: usize) -> Result<Self> {
        if gains.len() != n_bins * n_frames {
            return Err(Error::Shape(format!(
                "{} gains for {n_frames} frames of {n_bins}",
                gains.len()
            )));
        }
        if let Some(g) = gains.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::InvalidArgument(format!("mask gain {g} outside [0, 1]")));
        }
        Ok(Self {
            gains,
            n_bins,
            n_frames,
        })
    }

    pub fn filled(value: f64, n_bins: usize, n_frames: usize) -> Result<Self> {
        Self::new(vec![value; n_bins * n_frames], n_bins, n_frames)
    }

    pub fn ones_like(spec: &Spectrogram) -> Self {
        Self {
            gains: vec![1.0; spec.n_bins() * spec.n_frames()],
            n_bins: spec.n_bins(),
            n_frames: spec.n_frames(),
        }
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn into_gains(self) -> Vec<f64> {
        self.gains
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.gains[frame * self.n_bins + bin]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.gains[t * self.n_bins..(t + 1) * self.n_bins]
    }

    fn check_shape(&self, spec: &Spectrogram) -> Result<()> {
        if self.n_bins != spec.n_bins() || self.n_frames != spec.n_frames() {
            return Err(Error::Shape(format!(
                "mask {}x{} vs spectrogram {}x{}",
                self.n_bins,
                self.n_frames,
                spec.n_bins(),
                spec.n_frames()
            )));
        }
        Ok(())
    }
}

/// Musical-noise post-processing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostProcessConfig {
    pub g_min: f64,
    pub beta: f64,
}

impl Default for PostProcessConfig {
    fn default() -> Self {
        Self {
            g_min: 0.158,
            beta: 0.3,
        }
    }
}

impl PostProcessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.g_min) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "post-processing needs g_min and beta in [0, 1], got {} and {}",
                self.g_min, self.beta
            )));
        }
        Ok(())
    }
}

fn check_pair(a: &Spectrogram, b: &Spectrogram) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.n_bins(),
            a.n_frames(),
            b.n_bins(),
            b.n_frames()
        )));
    }
    Ok(())
}

/// Ideal ratio mask `|S| / (|S| + |N|)`.
pub fn compute_irm(s: &Spectrogram, n: &Spectrogram) -> Result<MaskMatrix> {
    check_pair(s, n)?;
    let gains = s
        .bins()
        .iter()
        .zip(n.bins())
        .map(|(s, n)| {
            let (a, b) = (s.norm(), n.norm());
            if a + b == 0.0 {
                0.0
            } else {
                a / (a + b)
            }
        })
        .collect();
    MaskMatrix::new(gains, s.n_bins(), s.n_frames())
}

/// Phase-sensitive gain for one bin: the real gain in `[0, 1]` minimizing
/// `|s - g x|^2`. Zero where `x` is zero.
pub fn psa_gain(s: Complex64, x: Complex64) -> f64 {
    let xx = x.norm_sqr();
    if xx == 0.0 {
        return 0.0;
    }
    // |S|/|X| cos(theta_S - theta_X) = Re(S X*) / |X|^2
    ((s * x.conj()).re / xx).clamp(0.0, 1.0)
}

/// Phase-sensitive spectrum approximation mask.
pub fn compute_psa(s: &Spectrogram, x: &Spectrogram) -> Result<MaskMatrix> {
    check_pair(s, x)?;
    let gains = s
        .bins()
        .iter()
        .zip(x.bins())
        .map(|(&s, &x)| psa_gain(s, x))
        .collect();
    MaskMatrix::new(gains, s.n_bins(), s.n_frames())
}

/// `G * X`, bin by bin.
pub fn apply_mask(g: &MaskMatrix, x: &Spectrogram) -> Result<Spectrogram> {
    g.check_shape(x)?;
    let bins = g.gains.iter().zip(x.bins()).map(|(&g, &x)| x * g).collect();
    x.with_bins(bins)
}

/// Floors every gain at `g_min`, then smooths each bin over time with
/// `G[t] = beta * G[t] + (1 - beta) * G[t-1]`, where `G[t-1]` is the already
/// smoothed previous frame. The first frame is only floored.
pub fn postprocess_mask(g: &MaskMatrix, cfg: &PostProcessConfig) -> MaskMatrix {
    let n = g.n_bins;
    let mut out: Vec<f64> = g.gains.iter().map(|&x| x.max(cfg.g_min)).collect();
    for t in 1..g.n_frames {
        for k in 0..n {
            let prev = out[(t - 1) * n + k];
            let cur = &mut out[t * n + k];
            *cur = cfg.beta * *cur + (1.0 - cfg.beta) * prev;
        }
    }
    MaskMatrix {
        gains: out,
        n_bins: g.n_bins,
        n_frames: g.n_frames,
    }
}

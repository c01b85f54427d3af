//! WAV I/O, SNR-controlled mixing and a synthetic corpus generator.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16000;
/// Training SNR grid in dB.
pub const SNR_GRID: [f64; 4] = [-6.0, 0.0, 6.0, 12.0];
/// Frame length whose bin centers the synthetic fundamentals sit on.
pub const SYNTH_FRAME: usize = 512;
pub const SYNTH_POLE_RANGE: (f64, f64) = (0.5, 0.9);

fn wav_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads 16-bit PCM mono, scaling by `1/32768`. With `expected_rate` set,
/// any other rate is an error.
pub fn load_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(path, format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(
            path,
            format!("expected 16-bit PCM, found {}-bit {:?}", spec.bits_per_sample, spec.sample_format),
        ));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(wav_err(
                path,
                format!("expected sample rate {rate} Hz, found {} Hz", spec.sample_rate),
            ));
        }
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e.to_string()))?;
    Waveform::new(samples, spec.sample_rate)
}

pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes 16-bit PCM mono, rounding to nearest and clipping at full scale.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if w.samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("waveform samples"));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e.to_string()))?;
    for &x in &w.samples {
        writer.write_sample(quantize(x)).map_err(|e| wav_err(path, e.to_string()))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e.to_string()))
}

/// Clean speech, the noise actually added to it, and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub clean: Waveform,
    pub noise: Waveform,
    pub mixture: Waveform,
    pub snr_db: f64,
}

impl Utterance {
    pub fn measured_snr_db(&self) -> f64 {
        10.0 * (self.clean.power() / self.noise.power()).log10()
    }
}

/// Scales `noise` to the requested SNR, adds it, then scales all three
/// signals by `1 / max(1, peak)`. The stored noise is the scaled one.
pub fn mix_at_snr(id: &str, clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Utterance> {
    if clean.len() != noise.len() || clean.sample_rate != noise.sample_rate {
        return Err(Error::Shape(format!(
            "clean has {} samples at {} Hz, noise has {} at {} Hz",
            clean.len(),
            clean.sample_rate,
            noise.len(),
            noise.sample_rate
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::NonFinite("snr"));
    }
    let (pc, pn) = (clean.power(), noise.power());
    if !(pc > 0.0) || !(pn > 0.0) {
        return Err(Error::InvalidArgument("clean and noise need nonzero energy".into()));
    }
    let g = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = noise.samples.iter().map(|n| g * n).collect();
    let mixture: Vec<f64> = clean.samples.iter().zip(&scaled).map(|(c, n)| c + n).collect();
    let peak = clean
        .samples
        .iter()
        .chain(&scaled)
        .chain(&mixture)
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let norm = 1.0 / peak.max(1.0);
    let sr = clean.sample_rate;
    let scale = |v: &[f64]| Waveform::new(v.iter().map(|x| x * norm).collect(), sr);
    Ok(Utterance {
        id: id.to_string(),
        clean: scale(&clean.samples)?,
        noise: scale(&scaled)?,
        mixture: scale(&mixture)?,
        snr_db,
    })
}

/// Synthetic (clean, noise) pair.
///
/// Clean: three harmonics of a fundamental placed on a bin center of a
/// 512-point frame between 100 and 300 Hz, under a raised-cosine envelope
/// at 2 to 8 Hz. Noise: white Gaussian noise through a one-pole lowpass.
pub fn synth_utterance(seed: u64, duration_s: f64, sample_rate: u32) -> Result<(Waveform, Waveform)> {
    if !(duration_s >= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "synthetic utterances need at least 0.5 s, got {duration_s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let bin_hz = sr / SYNTH_FRAME as f64;
    let lo_bin = (100.0 / bin_hz).ceil() as usize;
    let hi_bin = (300.0 / bin_hz).floor() as usize;
    let f0 = rng.random_range(lo_bin..=hi_bin) as f64 * bin_hz;
    let am_rate = rng.random_range(2.0..8.0);
    let am_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let gains = [0.3, 0.15, 0.08];
    let clean = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.5 * (1.0 - (std::f64::consts::TAU * am_rate * t + am_phase).cos());
            env * (0..3)
                .map(|h| gains[h] * (std::f64::consts::TAU * f0 * (h + 1) as f64 * t + phases[h]).sin())
                .sum::<f64>()
        })
        .collect();

    let pole = rng.random_range(SYNTH_POLE_RANGE.0..=SYNTH_POLE_RANGE.1);
    let mut state = 0.0;
    let noise = (0..n)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            state = pole * state + (1.0 - pole) * x;
            state
        })
        .collect();
    Ok((Waveform::new(clean, sample_rate)?, Waveform::new(noise, sample_rate)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Resolved against the manifest's directory.
    pub clean_path: PathBuf,
    pub noise_path: PathBuf,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub sample_rate: u32,
    pub entries: Vec<ManifestEntry>,
}

/// Parses `sample_rate=<int>` followed by `id,clean_path,noise_path,snr_db`
/// lines. Blank lines and `#` comments are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hl, header) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
    let sample_rate = header
        .strip_prefix("sample_rate=")
        .and_then(|v| v.trim().parse::<u32>().ok())
        .filter(|&r| r > 0)
        .ok_or_else(|| err(hl, format!("expected header sample_rate=<int>, found {header:?}")))?;
    let mut entries = Vec::new();
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(ln, format!("expected 4 comma-separated fields, found {}", fields.len())));
        }
        let snr_db = fields[3]
            .parse::<f64>()
            .ok()
            .filter(|s| s.is_finite())
            .ok_or_else(|| err(ln, format!("bad snr {:?}", fields[3])))?;
        let clean_path = base.join(fields[1]);
        let noise_path = base.join(fields[2]);
        for p in [&clean_path, &noise_path] {
            if !p.is_file() {
                return Err(err(ln, format!("cannot find {}", p.display())));
            }
        }
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            clean_path,
            noise_path,
            snr_db,
        });
    }
    if entries.is_empty() {
        return Err(err(hl, "manifest lists no utterances".into()));
    }
    Ok(CorpusManifest { sample_rate, entries })
}

/// Writes `manifest` with paths relative to the file's directory where possible.
pub fn save_manifest(path: impl AsRef<Path>, manifest: &CorpusManifest) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = format!("sample_rate={}\n", manifest.sample_rate);
    for e in &manifest.entries {
        for field in [&e.id, &rel(&e.clean_path), &rel(&e.noise_path)] {
            if field.contains([',', '\n']) {
                return Err(Error::InvalidArgument(format!("manifest field {field:?} contains a separator")));
            }
        }
        writeln!(out, "{},{},{},{}", e.id, rel(&e.clean_path), rel(&e.noise_path), e.snr_db).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads both signals of an entry and mixes them.
pub fn load_utterance(entry: &ManifestEntry, sample_rate: u32) -> Result<Utterance> {
    let clean = load_wav(&entry.clean_path, Some(sample_rate))?;
    let noise = load_wav(&entry.noise_path, Some(sample_rate))?;
    mix_at_snr(&entry.id, &clean, &noise, entry.snr_db)
}

pub fn load_corpus(manifest: &CorpusManifest) -> Result<Vec<Utterance>> {
    manifest
        .entries
        .iter()
        .map(|e| load_utterance(e, manifest.sample_rate))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusOptions {
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            duration_s: 2.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

/// Seed of the `index`-th utterance of a corpus generated from `seed`.
pub fn utterance_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes `n` synthetic pairs and `manifest.txt` into `out_dir`, cycling
/// through `snrs`.
pub fn generate_corpus(
    n: usize,
    seed: u64,
    snrs: &[f64],
    out_dir: impl AsRef<Path>,
    opts: &CorpusOptions,
) -> Result<(PathBuf, CorpusManifest)> {
    if n == 0 || snrs.is_empty() {
        return Err(Error::InvalidArgument("corpus needs at least one utterance and one SNR".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let (clean, noise) = synth_utterance(utterance_seed(seed, i), opts.duration_s, opts.sample_rate)?;
        // Peak-normalize so quantization never clips.
        let fit = |w: Waveform| {
            let p = w.peak();
            let c = if p > 0.9 { 0.9 / p } else { 1.0 };
            Waveform::new(w.samples.iter().map(|x| x * c).collect(), w.sample_rate)
        };
        let clean_path = out_dir.join(format!("clean_{i:04}.wav"));
        let noise_path = out_dir.join(format!("noise_{i:04}.wav"));
        save_wav(&clean_path, &fit(clean)?)?;
        save_wav(&noise_path, &fit(noise)?)?;
        entries.push(ManifestEntry {
            id: format!("utt{i:04}"),
            clean_path,
            noise_path,
            snr_db: snrs[i % snrs.len()],
        });
    }
    let manifest = CorpusManifest {
        sample_rate: opts.sample_rate,
        entries,
    };
    let path = out_dir.join("manifest.txt");
    save_manifest(&path, &manifest)?;
    Ok((path, manifest))
}

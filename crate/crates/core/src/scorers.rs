//! Black-box quality scores, their affine normalization to `[0, 100]`, and
//! a line protocol for delegating to external scoring programs.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use crate::data::save_wav;
use crate::dsp::{make_mel_filterbank, stft, MelFilterbank, Waveform};
use crate::error::{Error, Result};

/// STFT used by the built-in scorers.
pub const SCORE_FRAME: usize = 512;
pub const SCORE_HOP: usize = 256;
pub const SDR_CAP_DB: f64 = 60.0;

const BANDS: usize = 64;
const GROUP: usize = 4;
const SEGMENT: usize = 30;
const SEGMENT_HOP: usize = 15;
const MIN_DURATION_S: f64 = 0.384;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub enhanced: &'a Waveform,
    pub clean: &'a Waveform,
    pub mixture: &'a Waveform,
}

impl<'a> ScoreRequest<'a> {
    pub fn new(enhanced: &'a Waveform, clean: &'a Waveform, mixture: &'a Waveform) -> Result<Self> {
        let n = clean.len();
        let sr = clean.sample_rate;
        for (name, w) in [("enhanced", enhanced), ("mixture", mixture)] {
            if w.len() != n || w.sample_rate != sr {
                return Err(Error::Shape(format!(
                    "{name} signal has {} samples at {} Hz, clean has {n} at {sr} Hz",
                    w.len(),
                    w.sample_rate
                )));
            }
        }
        Ok(Self {
            enhanced,
            clean,
            mixture,
        })
    }
}

pub trait Scorer: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> Result<f64>;

    fn name(&self) -> String;

    /// Whether `score` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

impl Scorer for Box<dyn Scorer> {
    fn score(&self, req: &ScoreRequest) -> Result<f64> {
        (**self).score(req)
    }

    fn name(&self) -> String {
        (**self).name()
    }

    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
}

/// `10 log10(sum |S|^2 / sum |S - S_hat|^2)` over STFT coefficients, capped
/// at [`SDR_CAP_DB`].
pub fn sdr_score(req: &ScoreRequest) -> Result<f64> {
    let s = stft(req.clean, SCORE_FRAME, SCORE_HOP)?;
    let e = stft(req.enhanced, SCORE_FRAME, SCORE_HOP)?;
    // One-sided spectra: bins strictly between DC and Nyquist count twice.
    let n = s.n_bins();
    let weight = |i: usize| if i % n == 0 || i % n == n - 1 { 1.0 } else { 2.0 };
    let signal: f64 = s.bins().iter().enumerate().map(|(i, a)| weight(i) * a.norm_sqr()).sum();
    if !(signal > 0.0) {
        return Err(Error::InvalidArgument("clean signal has zero energy".into()));
    }
    let distortion: f64 = s
        .bins()
        .iter()
        .zip(e.bins())
        .enumerate()
        .map(|(i, (a, b))| weight(i) * (a - b).norm_sqr())
        .sum();
    if distortion < 1e-12 * signal {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (signal / distortion).log10()).min(SDR_CAP_DB))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let (sa, sb) = ((saa / n).sqrt(), (sbb / n).sqrt());
    if sa < 1e-10 || sb < 1e-10 {
        return 0.0;
    }
    (sab / n / (sa * sb)).clamp(-1.0, 1.0)
}

/// Grouped mel envelopes, `groups x frames`.
fn group_envelopes(w: &Waveform, fb: &MelFilterbank) -> Result<Vec<Vec<f64>>> {
    let spec = stft(w, SCORE_FRAME, SCORE_HOP)?;
    let mel = fb.project_frames(spec.magnitudes().view());
    let mut out = vec![vec![0.0; mel.nrows()]; BANDS / GROUP];
    for (t, row) in mel.rows().into_iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            out[b / GROUP][t] += v;
        }
    }
    Ok(out)
}

/// Intelligibility stand-in: mean positive Pearson correlation of grouped
/// mel envelopes over 30-frame segments. Inputs shorter than one segment
/// but at least 384 ms are scored as a single segment.
pub fn band_correlation_score(req: &ScoreRequest) -> Result<f64> {
    let sr = req.clean.sample_rate;
    let needed = (MIN_DURATION_S * sr as f64).ceil() as usize;
    if req.clean.len() < needed || req.enhanced.len() < needed {
        return Err(Error::InputTooShort {
            needed,
            got: req.clean.len().min(req.enhanced.len()),
        });
    }
    let fb = make_mel_filterbank(BANDS, SCORE_FRAME, sr)?;
    let clean = group_envelopes(req.clean, &fb)?;
    let enh = group_envelopes(req.enhanced, &fb)?;
    let frames = clean[0].len().min(enh[0].len());
    let starts: Vec<usize> = if frames < SEGMENT {
        vec![0]
    } else {
        (0..=(frames - SEGMENT) / SEGMENT_HOP).map(|i| i * SEGMENT_HOP).collect()
    };
    let len = SEGMENT.min(frames);
    let mut total = 0.0;
    let mut count = 0usize;
    for (c, e) in clean.iter().zip(&enh) {
        for &s in &starts {
            total += pearson(&c[s..s + len], &e[s..s + len]).max(0.0);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `clamp(gain * z + offset, lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreScale {
    pub gain: f64,
    pub offset: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ScoreScale {
    pub fn new(gain: f64, offset: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !gain.is_finite() || !offset.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "score scale needs finite gain/offset and lo < hi, got gain {gain} offset {offset} range [{lo}, {hi}]"
            )));
        }
        Ok(Self { gain, offset, lo, hi })
    }

    /// PESQ in [-0.5, 4.5] onto [0, 100].
    pub fn pesq() -> Self {
        Self::new(20.0, 10.0, 0.0, 100.0).unwrap()
    }

    /// STOI in [0, 1] onto [0, 100].
    pub fn stoi() -> Self {
        Self::new(100.0, 0.0, 0.0, 100.0).unwrap()
    }

    /// SDR in [-10, 30] dB onto [0, 100].
    pub fn sdr() -> Self {
        Self::new(2.5, 25.0, 0.0, 100.0).unwrap()
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, f64::NEG_INFINITY, f64::INFINITY).unwrap()
    }
}

pub fn scale_score(z: f64, scale: &ScoreScale) -> f64 {
    (scale.gain * z + scale.offset).clamp(scale.lo, scale.hi)
}

pub fn mix_scores(z1: f64, z2: f64, gamma: f64) -> f64 {
    gamma * z1 + (1.0 - gamma) * z2
}

pub struct SdrScorer;

impl Scorer for SdrScorer {
    fn score(&self, req: &ScoreRequest) -> Result<f64> {
        sdr_score(req)
    }

    fn name(&self) -> String {
        "sdr".into()
    }
}

pub struct BandCorrelationScorer;

impl Scorer for BandCorrelationScorer {
    fn score(&self, req: &ScoreRequest) -> Result<f64> {
        band_correlation_score(req)
    }

    fn name(&self) -> String {
        "bandcorr".into()
    }
}

pub struct ScaledScorer {
    pub inner: Box<dyn Scorer>,
    pub scale: ScoreScale,
}

impl Scorer for ScaledScorer {
    fn score(&self, req: &ScoreRequest) -> Result<f64> {
        Ok(scale_score(self.inner.score(req)?, &self.scale))
    }

    fn name(&self) -> String {
        format!("scaled({})", self.inner.name())
    }

    fn concurrent(&self) -> bool {
        self.inner.concurrent()
    }
}

/// `gamma * a + (1 - gamma) * b`.
pub struct MixedScorer {
    pub a: Box<dyn Scorer>,
    pub b: Box<dyn Scorer>,
    pub gamma: f64,
}

impl MixedScorer {
    pub fn new(a: Box<dyn Scorer>, b: Box<dyn Scorer>, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("mixing weight {gamma} outside [0, 1]")));
        }
        Ok(Self { a, b, gamma })
    }
}

impl Scorer for MixedScorer {
    fn score(&self, req: &ScoreRequest) -> Result<f64> {
        Ok(mix_scores(self.a.score(req)?, self.b.score(req)?, self.gamma))
    }

    fn name(&self) -> String {
        format!("mix({},{},{})", self.a.name(), self.b.name(), self.gamma)
    }

    fn concurrent(&self) -> bool {
        self.a.concurrent() && self.b.concurrent()
    }
}

/// Where an external scorer lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Program and arguments, split on whitespace; kept running between requests.
    Command(Vec<String>),
    /// `host:port` of a listening scorer.
    Tcp(String),
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    /// `cmd:<program> [args...]` or `tcp:<host>:<port>`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("cmd:") {
            let argv: Vec<String> = rest.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                return Err(Error::InvalidArgument("empty scorer command".into()));
            }
            Ok(Endpoint::Command(argv))
        } else if let Some(rest) = s.strip_prefix("tcp:") {
            if !rest.contains(':') {
                return Err(Error::InvalidArgument(format!("expected tcp:host:port, got {s:?}")));
            }
            Ok(Endpoint::Tcp(rest.to_string()))
        } else {
            Err(Error::InvalidArgument(format!(
                "scorer endpoint must start with cmd: or tcp:, got {s:?}"
            )))
        }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    // Shut down on drop so the reader thread's clone does not keep it open.
    socket: Option<TcpStream>,
}

impl Connection {
    fn open(endpoint: &Endpoint) -> Result<Self> {
        let (tx, rx) = mpsc::channel();
        let spawn_reader = |reader: Box<dyn std::io::Read + Send>| {
            std::thread::spawn(move || {
                for line in BufReader::new(reader).lines() {
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            });
        };
        match endpoint {
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Scorer(format!("cannot start {:?}: {e}", argv[0])))?;
                let stdin = child.stdin.take().unwrap();
                spawn_reader(Box::new(child.stdout.take().unwrap()));
                Ok(Self {
                    writer: Box::new(stdin),
                    lines: rx,
                    child: Some(child),
                    socket: None,
                })
            }
            Endpoint::Tcp(addr) => {
                let stream =
                    TcpStream::connect(addr).map_err(|e| Error::Scorer(format!("cannot connect to {addr}: {e}")))?;
                spawn_reader(Box::new(stream.try_clone()?));
                Ok(Self {
                    writer: Box::new(stream.try_clone()?),
                    lines: rx,
                    child: None,
                    socket: Some(stream),
                })
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
        if let Some(s) = &self.socket {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }
}

/// Parses one response line.
pub fn parse_response(line: &str) -> Result<f64> {
    let line = line.trim_end_matches(['\n', '\r']);
    if let Some(v) = line.strip_prefix("OK ") {
        match v.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(Error::ScorerMalformed(line.to_string())),
        }
    } else if let Some(msg) = line.strip_prefix("ERR") {
        Err(Error::ScorerRemote(msg.trim_start().to_string()))
    } else {
        Err(Error::ScorerMalformed(line.to_string()))
    }
}

/// Client for an external scorer speaking
/// `SCORE <enhanced> <clean> <mixture>` / `OK <x>` | `ERR <msg>`.
/// Calls are serialized; any failure drops the connection so the next
/// request starts fresh.
pub struct ExternalScorer {
    endpoint: Endpoint,
    timeout: Duration,
    temp_root: Option<PathBuf>,
    conn: Mutex<Option<Connection>>,
}

impl ExternalScorer {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            timeout: DEFAULT_TIMEOUT,
            temp_root: None,
            conn: Mutex::new(None),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Parent directory for request-scoped temp directories.
    pub fn with_temp_root(mut self, dir: impl Into<PathBuf>) -> Self {
        self.temp_root = Some(dir.into());
        self
    }

    fn request(&self, conn: &mut Connection, req: &ScoreRequest) -> Result<f64> {
        let dir = match &self.temp_root {
            Some(root) => tempfile::Builder::new().prefix("score").tempdir_in(root)?,
            None => tempfile::Builder::new().prefix("score").tempdir()?,
        };
        let paths = ["enhanced.wav", "clean.wav", "mixture.wav"].map(|n| dir.path().join(n));
        save_wav(&paths[0], req.enhanced)?;
        save_wav(&paths[1], req.clean)?;
        save_wav(&paths[2], req.mixture)?;
        for p in &paths {
            if p.to_string_lossy().contains(char::is_whitespace) {
                return Err(Error::Scorer(format!("temp path {} contains whitespace", p.display())));
            }
        }
        let line = format!(
            "SCORE {} {} {}\n",
            paths[0].display(),
            paths[1].display(),
            paths[2].display()
        );
        conn.writer
            .write_all(line.as_bytes())
            .and_then(|_| conn.writer.flush())
            .map_err(|e| Error::Scorer(format!("writing request: {e}")))?;
        let result = match conn.lines.recv_timeout(self.timeout) {
            Ok(Ok(resp)) => parse_response(&resp),
            Ok(Err(e)) => Err(Error::Scorer(format!("reading response: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::ScorerTimeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Scorer("endpoint closed the connection".into())),
        };
        drop(dir);
        result
    }
}

impl Scorer for ExternalScorer {
    fn score(&self, req: &ScoreRequest) -> Result<f64> {
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(Connection::open(&self.endpoint)?);
        }
        let result = self.request(guard.as_mut().unwrap(), req);
        // A remote ERR leaves the stream in sync; anything else may not.
        if matches!(&result, Err(e) if !matches!(e, Error::ScorerRemote(_))) {
            *guard = None;
        }
        result
    }

    fn name(&self) -> String {
        match &self.endpoint {
            Endpoint::Command(argv) => format!("cmd:{}", argv.join(" ")),
            Endpoint::Tcp(a) => format!("tcp:{a}"),
        }
    }

    fn concurrent(&self) -> bool {
        false
    }
}

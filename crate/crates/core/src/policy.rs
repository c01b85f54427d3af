//! Policy-gradient fine-tuning against a black-box score.
//!
//! Each update draws `K` constrained output candidates per utterance from
//! the network's complex-Gaussian posterior, scores them, subtracts the
//! batch-mean baseline, and ascends the score-weighted log-likelihood of the
//! candidates (treated as fixed labels).

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dsp::{istft, Complex64, MelFilterbank, Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::masks::{apply_mask, psa_gain, MaskMatrix};
use crate::nn::{
    adam_step, backward, forward_batch, AdamState, ForwardCache, Gradients, NetworkParams, TrainHyper,
    UtterancePosterior,
};
use crate::scorers::{ScoreRequest, Scorer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PGConfig {
    /// Candidates per utterance.
    pub k: usize,
    /// Utterances per update.
    pub utterances: usize,
    /// Per-bin probability of keeping the sampled gain.
    pub epsilon: f64,
    /// Largest allowed deviation from the MAP gain.
    pub lambda: f64,
    pub step_size: f64,
    pub seed: u64,
    pub updates: usize,
    /// Run the network with dropout while sampling and differentiating.
    pub dropout: bool,
}

impl Default for PGConfig {
    fn default() -> Self {
        Self {
            k: 20,
            utterances: 10,
            epsilon: 0.05,
            lambda: 0.05,
            step_size: 1e-6,
            seed: 0,
            updates: 200,
            dropout: false,
        }
    }
}

impl PGConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("K must be at least 2, got {}", self.k)));
        }
        if self.utterances == 0 {
            return Err(Error::InvalidArgument("need at least one utterance per update".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {} must be nonnegative", self.lambda)));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument(format!("step size {} must be positive", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub mask: MaskMatrix,
    pub output: Spectrogram,
    pub raw_score: Option<f64>,
    pub adv_score: Option<f64>,
}

/// An utterance ready for training: normalized features and spectra, with
/// waveforms when the scorer needs audio.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedUtterance {
    pub id: String,
    pub snr_db: f64,
    /// `frames x input_dim`.
    pub features: Array2<f64>,
    pub mixture: Spectrogram,
    pub clean: Spectrogram,
    pub mixture_wave: Option<Waveform>,
    pub clean_wave: Option<Waveform>,
}

/// Scores a candidate output spectrum of an utterance.
pub trait OutputScorer: Send + Sync {
    fn score_output(&self, utt: &PreparedUtterance, output: &Spectrogram) -> Result<f64>;

    fn concurrent(&self) -> bool {
        true
    }
}

impl<F> OutputScorer for F
where
    F: Fn(&PreparedUtterance, &Spectrogram) -> Result<f64> + Send + Sync,
{
    fn score_output(&self, utt: &PreparedUtterance, output: &Spectrogram) -> Result<f64> {
        self(utt, output)
    }
}

/// Resynthesizes the candidate and hands audio to a waveform scorer.
pub struct WaveformScorer<S>(pub S);

impl<S: Scorer> OutputScorer for WaveformScorer<S> {
    fn score_output(&self, utt: &PreparedUtterance, output: &Spectrogram) -> Result<f64> {
        let (Some(clean), Some(mix)) = (&utt.clean_wave, &utt.mixture_wave) else {
            return Err(Error::InvalidArgument(format!("utterance {} has no waveforms", utt.id)));
        };
        let enhanced = istft(output)?;
        self.0.score(&ScoreRequest::new(&enhanced, clean, mix)?)
    }

    fn concurrent(&self) -> bool {
        self.0.concurrent()
    }
}

fn check_posterior(post: &UtterancePosterior, x: &Spectrogram) -> Result<()> {
    if post.n_frames() != x.n_frames() || post.n_bins() != x.n_bins() {
        return Err(Error::Shape(format!(
            "posterior is {}x{} but the mixture has {} frames of {} bins",
            post.n_frames(),
            post.n_bins(),
            x.n_frames(),
            x.n_bins()
        )));
    }
    Ok(())
}

/// Draws `cfg.k` candidates around the MAP mask. Per bin: sample
/// `S~ = G X + sigma (n1 + i n2)`, project to a phase-sensitive gain, keep it
/// with probability `epsilon` (otherwise use `G`), then clip the deviation
/// from `G` to `[-lambda, lambda]`.
pub fn sample_output_candidates(
    post: &UtterancePosterior,
    x: &Spectrogram,
    cfg: &PGConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<ScoredCandidate>> {
    cfg.validate()?;
    check_posterior(post, x)?;
    let map = post.mask_lin.as_slice().expect("standard layout");
    let var = post.var_lin.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let mut gains = Vec::with_capacity(map.len());
        for ((&g, &v), &xb) in map.iter().zip(var).zip(x.bins()) {
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            let keep = rng.random::<f64>() < cfg.epsilon;
            let sd = v.sqrt();
            let sampled = xb * g + Complex64::new(sd * n1, sd * n2);
            let gk = if keep { psa_gain(sampled, xb) } else { g };
            let delta = (gk - g).clamp(-cfg.lambda, cfg.lambda);
            gains.push((g + delta).clamp(0.0, 1.0));
        }
        let mask = MaskMatrix::new(gains, x.n_bins(), x.n_frames())?;
        let output = apply_mask(&mask, x)?;
        out.push(ScoredCandidate {
            mask,
            output,
            raw_score: None,
            adv_score: None,
        });
    }
    Ok(out)
}

/// `B_k = Z_k - mean(Z)`, computed relative to the first score so that all
/// equal inputs give exact zeros.
pub fn baseline_subtract(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "baseline needs at least 2 scores, got {}",
            raw.len()
        )));
    }
    if raw.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("raw scores"));
    }
    let d: Vec<f64> = raw.iter().map(|z| z - raw[0]).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Ok(d.iter().map(|x| x - mean).collect())
}

/// Partials of `sum_k B_k / (K T) sum_t ln p(S_k | X, G, sigma^2)` with
/// respect to the linear mask and variance, `frames x bins`.
pub fn pg_head_grads(
    candidates: &[ScoredCandidate],
    post: &UtterancePosterior,
    x: &Spectrogram,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_posterior(post, x)?;
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    let (t, nb) = (x.n_frames(), x.n_bins());
    let norm = 1.0 / (candidates.len() * t) as f64;
    let map = post.mask_lin.as_slice().expect("standard layout");
    let var = post.var_lin.as_slice().expect("standard layout");
    let mut dm = vec![0.0; t * nb];
    let mut dv = vec![0.0; t * nb];
    for c in candidates {
        let b = c.adv_score.ok_or_else(|| Error::InvalidArgument("candidate has no advantage score".into()))?;
        if c.mask.n_bins() != nb || c.mask.n_frames() != t {
            return Err(Error::Shape("candidate mask shape".into()));
        }
        let w = b * norm;
        if w == 0.0 {
            continue;
        }
        for (i, (&gk, &xb)) in c.mask.gains().iter().zip(x.bins()).enumerate() {
            let (g, v) = (map[i], var[i]);
            let xx = xb.norm_sqr();
            let diff = gk - g;
            // d/dG ln p = (Gk - G)|X|^2 / v, d/dv ln p = e / (2 v^2) - 1 / v
            dm[i] += w * diff * xx / v;
            dv[i] += w * (diff * diff * xx / (2.0 * v * v) - 1.0 / v);
        }
    }
    let shape = (t, nb);
    Ok((
        Array2::from_shape_vec(shape, dm).unwrap(),
        Array2::from_shape_vec(shape, dv).unwrap(),
    ))
}

/// Gradient to *ascend* for one utterance, chained through the heads of
/// the forward pass that produced `post` and `cache`. No L2 term.
pub fn pg_utterance_grads(
    candidates: &[ScoredCandidate],
    post: &UtterancePosterior,
    cache: &ForwardCache,
    x: &Spectrogram,
    fb: &MelFilterbank,
    params: &NetworkParams,
    hyper: &TrainHyper,
) -> Result<Gradients> {
    let (dm, dv) = pg_head_grads(candidates, post, x)?;
    let (gm, gv) = post.grads_to_mel(fb, dm.view(), dv.view())?;
    let no_l2 = TrainHyper { l2: 0.0, ..*hyper };
    backward(params, cache, gm.view(), gv.view(), &no_l2)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct PgLogRecord {
    pub update: usize,
    /// Mean score of the MAP-mask outputs.
    pub map_score: f64,
    /// Mean raw score over all candidates.
    pub candidate_score: f64,
    /// Mean over utterances of the variance of the advantages.
    pub adv_variance: f64,
    /// Mean squared error of the MAP output against the clean spectrum.
    pub mse: f64,
    pub elapsed_s: f64,
    pub raw_scores: Vec<Vec<f64>>,
    pub adv_scores: Vec<Vec<f64>>,
}

pub const PG_LOG_HEADER: &str = "update,map_score,mean_score,adv_variance,mse,elapsed_s";

impl PgLogRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.update, self.map_score, self.candidate_score, self.adv_variance, self.mse, self.elapsed_s
        )
    }

    /// Every field except wall-clock time, for reproducibility checks.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let bits = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.update == other.update
            && self.map_score.to_bits() == other.map_score.to_bits()
            && self.candidate_score.to_bits() == other.candidate_score.to_bits()
            && self.adv_variance.to_bits() == other.adv_variance.to_bits()
            && self.mse.to_bits() == other.mse.to_bits()
            && bits(&self.raw_scores) == bits(&other.raw_scores)
            && bits(&self.adv_scores) == bits(&other.adv_scores)
    }
}

fn map_output(post: &UtterancePosterior, x: &Spectrogram) -> Result<Spectrogram> {
    let mask = MaskMatrix::new(post.mask_lin.iter().copied().collect(), x.n_bins(), x.n_frames())?;
    apply_mask(&mask, x)
}

fn score_all(
    scorer: &dyn OutputScorer,
    jobs: &[(&PreparedUtterance, &Spectrogram)],
) -> Result<Vec<f64>> {
    if scorer.concurrent() {
        jobs.par_iter().map(|(u, s)| scorer.score_output(u, s)).collect()
    } else {
        jobs.iter().map(|(u, s)| scorer.score_output(u, s)).collect()
    }
}

/// One policy-gradient update over `batch`. Parameters and optimizer state
/// change only if every score was obtained.
#[allow(clippy::too_many_arguments)]
pub fn pg_update_step(
    batch: &[&PreparedUtterance],
    params: &mut NetworkParams,
    adam: &mut AdamState,
    scorer: &dyn OutputScorer,
    fb: &MelFilterbank,
    hyper: &TrainHyper,
    cfg: &PGConfig,
    rng: &mut ChaCha8Rng,
    update: usize,
) -> Result<PgLogRecord> {
    let start = Instant::now();
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();

    struct Work<'a> {
        utt: &'a PreparedUtterance,
        post: UtterancePosterior,
        cache: ForwardCache,
        map_out: Spectrogram,
        candidates: Vec<ScoredCandidate>,
    }
    let mut work = Vec::with_capacity(batch.len());
    for (&utt, &seed) in batch.iter().zip(&seeds) {
        let mut urng = ChaCha8Rng::seed_from_u64(seed);
        let (heads, cache) = if cfg.dropout {
            let mut drng = ChaCha8Rng::seed_from_u64(urng.next_u64());
            forward_batch(params, utt.features.view(), hyper, Some(&mut drng))?
        } else {
            forward_batch(params, utt.features.view(), hyper, None)?
        };
        let post = UtterancePosterior::from_heads(fb, &heads, hyper.c_sigma)?;
        let candidates = sample_output_candidates(&post, &utt.mixture, cfg, &mut urng)?;
        let map_out = map_output(&post, &utt.mixture)?;
        work.push(Work {
            utt,
            post,
            cache,
            map_out,
            candidates,
        });
    }

    let jobs: Vec<(&PreparedUtterance, &Spectrogram)> = work
        .iter()
        .flat_map(|w| std::iter::once(&w.map_out).chain(w.candidates.iter().map(|c| &c.output)).map(move |s| (w.utt, s)))
        .collect();
    let scores = score_all(scorer, &jobs)?;

    let per = cfg.k + 1;
    let mut total = params.zeros_like();
    let (mut map_sum, mut cand_sum, mut var_sum, mut mse_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut raw_scores = Vec::with_capacity(work.len());
    let mut adv_scores = Vec::with_capacity(work.len());
    for (i, w) in work.iter_mut().enumerate() {
        let s = &scores[i * per..(i + 1) * per];
        let raw = &s[1..];
        let adv = baseline_subtract(raw)?;
        for ((c, &z), &b) in w.candidates.iter_mut().zip(raw).zip(&adv) {
            c.raw_score = Some(z);
            c.adv_score = Some(b);
        }
        let g = pg_utterance_grads(&w.candidates, &w.post, &w.cache, &w.utt.mixture, fb, params, hyper)?;
        total.add_scaled(&g, 1.0);

        map_sum += s[0];
        cand_sum += raw.iter().sum::<f64>() / raw.len() as f64;
        var_sum += adv.iter().map(|b| b * b).sum::<f64>() / adv.len() as f64;
        mse_sum += spectral_mse(&w.map_out, &w.utt.clean)?;
        raw_scores.push(raw.to_vec());
        adv_scores.push(adv);
    }
    let n = work.len() as f64;
    // average over utterances and flip the sign for the minimizer
    total.scale(-1.0 / n);
    if !total.is_finite() {
        return Err(Error::NonFinite("policy gradient"));
    }
    adam_step(params, &total, adam)?;

    Ok(PgLogRecord {
        update,
        map_score: map_sum / n,
        candidate_score: cand_sum / n,
        adv_variance: var_sum / n,
        mse: mse_sum / n,
        elapsed_s: start.elapsed().as_secs_f64(),
        raw_scores,
        adv_scores,
    })
}

/// Mean over bins of `|a - b|^2`.
pub fn spectral_mse(a: &Spectrogram, b: &Spectrogram) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("spectral mse: shapes differ".into()));
    }
    let n = a.bins().len().max(1) as f64;
    Ok(a.bins().iter().zip(b.bins()).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>() / n)
}

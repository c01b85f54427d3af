//! End-to-end plumbing: feature preparation, supervised (ML or PSA-MMSE)
//! training with step-halving early stopping, policy-gradient fine-tuning
//! over a corpus, enhancement and evaluation.

use std::path::Path;

use ndarray::ArrayView2;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Utterance;
use crate::dsp::{feature_matrix, istft, make_mel_filterbank, stft, FeatureStats, MelFilterbank, Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::likelihood::{utterance_eval_loss, utterance_loss_and_grads, Objective};
use crate::masks::{apply_mask, postprocess_mask, MaskMatrix, PostProcessConfig};
use crate::nn::{
    adam_step, forward_batch, AdamState, Checkpoint, CheckpointMeta, NetworkParams, TrainHyper, UtterancePosterior,
};
use crate::policy::{pg_update_step, OutputScorer, PGConfig, PgLogRecord, PreparedUtterance};
use crate::scorers::{band_correlation_score, sdr_score, ScoreRequest, Scorer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DspConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub bands: usize,
    /// Frames of context on each side.
    pub context: usize,
    pub sample_rate: u32,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 256,
            bands: 64,
            context: 5,
            sample_rate: 16000,
        }
    }
}

impl DspConfig {
    pub fn input_dim(&self) -> usize {
        (2 * self.context + 1) * self.bands
    }

    pub fn filterbank(&self) -> Result<MelFilterbank> {
        make_mel_filterbank(self.bands, self.frame_len, self.sample_rate)
    }
}

/// Network, feature statistics and front-end settings.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: NetworkParams,
    pub stats: FeatureStats,
    pub dsp: DspConfig,
    pub c_sigma: f64,
    pub fb: MelFilterbank,
}

impl Model {
    pub fn new(params: NetworkParams, stats: FeatureStats, dsp: DspConfig, c_sigma: f64) -> Result<Self> {
        let dims = params.dims();
        if dims.input != dsp.input_dim() || dims.output != dsp.bands || stats.dim() != dsp.input_dim() {
            return Err(Error::Shape(format!(
                "network {:?} and statistics of dimension {} do not fit {} bands with context {}",
                dims,
                stats.dim(),
                dsp.bands,
                dsp.context
            )));
        }
        let fb = dsp.filterbank()?;
        Ok(Self {
            params,
            stats,
            dsp,
            c_sigma,
            fb,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let dsp = DspConfig {
            frame_len: ck.meta.frame_len,
            hop: ck.meta.hop,
            bands: ck.meta.bands,
            context: ck.meta.context,
            sample_rate: ck.meta.sample_rate,
        };
        Self::new(ck.params, ck.stats, dsp, ck.meta.c_sigma)
    }

    pub fn to_checkpoint(&self, created: &str) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            stats: self.stats.clone(),
            meta: CheckpointMeta {
                context: self.dsp.context,
                bands: self.dsp.bands,
                frame_len: self.dsp.frame_len,
                hop: self.dsp.hop,
                sample_rate: self.dsp.sample_rate,
                c_sigma: self.c_sigma,
                created: created.replace('\n', " "),
            },
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, created: &str) -> Result<()> {
        self.to_checkpoint(created).save(path)
    }

    /// Hyperparameters for inference: only `c_sigma` matters.
    pub fn inference_hyper(&self) -> TrainHyper {
        TrainHyper {
            c_sigma: self.c_sigma,
            ..TrainHyper::default()
        }
    }

    pub fn spectrogram(&self, w: &Waveform) -> Result<Spectrogram> {
        if w.sample_rate != self.dsp.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "signal at {} Hz for a model at {} Hz",
                w.sample_rate, self.dsp.sample_rate
            )));
        }
        stft(w, self.dsp.frame_len, self.dsp.hop)
    }

    pub fn features(&self, mixture: &Spectrogram) -> Result<ndarray::Array2<f64>> {
        feature_matrix(mixture, &self.fb, self.dsp.context, Some(&self.stats))
    }

    pub fn prepare(&self, u: &Utterance) -> Result<PreparedUtterance> {
        let mixture = self.spectrogram(&u.mixture)?;
        let clean = self.spectrogram(&u.clean)?;
        Ok(PreparedUtterance {
            id: u.id.clone(),
            snr_db: u.snr_db,
            features: self.features(&mixture)?,
            mixture,
            clean,
            mixture_wave: Some(u.mixture.clone()),
            clean_wave: Some(u.clean.clone()),
        })
    }

    pub fn prepare_all(&self, utts: &[Utterance]) -> Result<Vec<PreparedUtterance>> {
        utts.par_iter().map(|u| self.prepare(u)).collect()
    }

    /// MAP mask in the linear domain, no dropout and no sampling.
    pub fn map_mask(&self, features: ArrayView2<f64>, mixture: &Spectrogram) -> Result<MaskMatrix> {
        let (heads, _) = forward_batch(&self.params, features, &self.inference_hyper(), None)?;
        let post = UtterancePosterior::from_heads(&self.fb, &heads, self.c_sigma)?;
        MaskMatrix::new(post.mask_lin.iter().copied().collect(), mixture.n_bins(), mixture.n_frames())
    }

    /// Mixture waveform in, enhanced waveform of the same length out.
    pub fn enhance(&self, mixture: &Waveform, post: Option<&PostProcessConfig>) -> Result<Waveform> {
        let spec = self.spectrogram(mixture)?;
        let mut mask = self.map_mask(self.features(&spec)?.view(), &spec)?;
        if let Some(cfg) = post {
            mask = postprocess_mask(&mask, cfg);
        }
        istft(&apply_mask(&mask, &spec)?)
    }
}

/// Statistics of unnormalized mixture features over a training set.
pub fn estimate_stats(utts: &[Utterance], dsp: &DspConfig) -> Result<FeatureStats> {
    let fb = dsp.filterbank()?;
    let raw: Vec<_> = utts
        .par_iter()
        .map(|u| {
            let spec = stft(&u.mixture, dsp.frame_len, dsp.hop)?;
            feature_matrix(&spec, &fb, dsp.context, None)
        })
        .collect::<Result<_>>()?;
    FeatureStats::estimate(raw.iter().map(|m| m.view()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedConfig {
    pub objective: Objective,
    /// `step_size` is the initial Adam step.
    pub hyper: TrainHyper,
    /// Training stops once halving takes the step below this.
    pub min_step: f64,
    /// Utterances per update.
    pub batch: usize,
    pub max_updates: usize,
    /// Validation cadence in updates.
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            objective: Objective::MaximumLikelihood,
            hyper: TrainHyper::default(),
            min_step: 1e-7,
            batch: 4,
            max_updates: 300,
            validate_every: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    /// Validation did not improve: best parameters restored, step halved.
    Halved,
    /// Step fell below the threshold.
    Stopped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedRecord {
    pub update: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub step_size: f64,
    pub event: Option<StepEvent>,
}

pub const SUPERVISED_LOG_HEADER: &str = "update,train_loss,valid_loss,step_size,event";

impl SupervisedRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.update,
            self.train_loss,
            self.valid_loss.map(|v| v.to_string()).unwrap_or_default(),
            self.step_size,
            match self.event {
                Some(StepEvent::Halved) => "halve",
                Some(StepEvent::Stopped) => "stop",
                None => "",
            }
        )
    }
}

pub fn validation_loss(model: &Model, objective: Objective, utts: &[PreparedUtterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let hyper = model.inference_hyper();
    let losses: Vec<f64> = utts
        .par_iter()
        .map(|u| utterance_eval_loss(objective, &model.params, &model.fb, u.features.view(), &u.clean, &u.mixture, &hyper))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Minibatch Adam on the chosen objective. Every `validate_every` updates
/// the validation loss is checked; without improvement the best parameters
/// are restored and the step is halved. Training ends after `max_updates`
/// or once the step drops below `min_step`, leaving the best parameters.
pub fn train_supervised(
    model: &mut Model,
    train: &[PreparedUtterance],
    valid: &[PreparedUtterance],
    cfg: &SupervisedConfig,
    mut on_record: impl FnMut(&SupervisedRecord) -> Result<()>,
) -> Result<Vec<SupervisedRecord>> {
    cfg.hyper.validate()?;
    if train.is_empty() || cfg.batch == 0 || cfg.validate_every == 0 {
        return Err(Error::InvalidArgument("need training data, a batch size and a validation cadence".into()));
    }
    let hyper = TrainHyper {
        c_sigma: model.c_sigma,
        ..cfg.hyper
    };
    let valid = if valid.is_empty() { train } else { valid };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_D80F);
    let mut adam = AdamState::new(&model.params, cfg.hyper.step_size);
    let mut best = (validation_loss(model, cfg.objective, valid)?, model.params.clone());
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::new();

    for update in 0..cfg.max_updates {
        if order.len() < cfg.batch.min(train.len()) {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let picked: Vec<usize> = order.drain(..cfg.batch.min(train.len())).collect();
        let mut total = model.params.zeros_like();
        let mut loss = 0.0;
        for &i in &picked {
            let u = &train[i];
            let (l, g) = utterance_loss_and_grads(
                cfg.objective,
                &model.params,
                &model.fb,
                u.features.view(),
                &u.clean,
                &u.mixture,
                &hyper,
                Some(&mut drop_rng),
            )?;
            loss += l;
            total.add_scaled(&g, 1.0);
        }
        let n = picked.len() as f64;
        total.scale(1.0 / n);
        if !total.is_finite() {
            return Err(Error::NonFinite("training gradient"));
        }
        adam_step(&mut model.params, &total, &mut adam)?;

        let mut rec = SupervisedRecord {
            update,
            train_loss: loss / n,
            valid_loss: None,
            step_size: adam.alpha,
            event: None,
        };
        if (update + 1) % cfg.validate_every == 0 {
            let v = validation_loss(model, cfg.objective, valid)?;
            rec.valid_loss = Some(v);
            if v < best.0 {
                best = (v, model.params.clone());
            } else {
                model.params = best.1.clone();
                adam.alpha *= 0.5;
                rec.step_size = adam.alpha;
                rec.event = Some(if adam.alpha < cfg.min_step {
                    StepEvent::Stopped
                } else {
                    StepEvent::Halved
                });
            }
        }
        on_record(&rec)?;
        let stop = rec.event == Some(StepEvent::Stopped);
        records.push(rec);
        if stop {
            break;
        }
    }
    let last = validation_loss(model, cfg.objective, valid)?;
    if last > best.0 {
        model.params = best.1;
    }
    Ok(records)
}

/// Mean score of MAP-mask outputs, without post-processing.
pub fn mean_map_score(model: &Model, utts: &[PreparedUtterance], scorer: &dyn OutputScorer) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::InvalidArgument("no utterances to score".into()));
    }
    let one = |u: &PreparedUtterance| -> Result<f64> {
        let mask = model.map_mask(u.features.view(), &u.mixture)?;
        scorer.score_output(u, &apply_mask(&mask, &u.mixture)?)
    };
    let scores: Vec<f64> = if scorer.concurrent() {
        utts.par_iter().map(one).collect::<Result<_>>()?
    } else {
        utts.iter().map(one).collect::<Result<_>>()?
    };
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// A policy-gradient log line with the optional held-out score.
#[derive(Debug, Clone, PartialEq)]
pub struct PgRecord {
    pub log: PgLogRecord,
    pub valid_score: Option<f64>,
}

pub const PG_RUN_LOG_HEADER: &str = "update,map_score,mean_score,adv_variance,mse,elapsed_s,valid_score";

impl PgRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{}",
            self.log.csv_line(),
            self.valid_score.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

/// Runs `cfg.updates` policy-gradient updates, each on `cfg.utterances`
/// utterances drawn without replacement. The held-out score is logged
/// before the first update and after every `validate_every` updates.
pub fn train_pg(
    model: &mut Model,
    train: &[PreparedUtterance],
    valid: &[PreparedUtterance],
    cfg: &PGConfig,
    validate_every: usize,
    scorer: &dyn OutputScorer,
    mut on_record: impl FnMut(&PgRecord) -> Result<()>,
) -> Result<(Option<f64>, Vec<PgRecord>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training utterances".into()));
    }
    let hyper = TrainHyper {
        c_sigma: model.c_sigma,
        l2: 0.0,
        step_size: cfg.step_size,
        ..TrainHyper::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params, cfg.step_size);
    let initial = if valid.is_empty() {
        None
    } else {
        Some(mean_map_score(model, valid, scorer)?)
    };
    let per_update = cfg.utterances.min(train.len());
    let mut records = Vec::with_capacity(cfg.updates);
    for update in 0..cfg.updates {
        let picked = index::sample(&mut rng, train.len(), per_update);
        let batch: Vec<&PreparedUtterance> = picked.iter().map(|i| &train[i]).collect();
        let log = pg_update_step(&batch, &mut model.params, &mut adam, scorer, &model.fb, &hyper, cfg, &mut rng, update)?;
        let valid_score = if !valid.is_empty() && validate_every > 0 && (update + 1) % validate_every == 0 {
            Some(mean_map_score(model, valid, scorer)?)
        } else {
            None
        };
        let rec = PgRecord { log, valid_score };
        on_record(&rec)?;
        records.push(rec);
    }
    Ok((initial, records))
}

/// Which mask an evaluation applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskSource {
    /// MAP mask of the network, optionally post-processed.
    Network(Option<PostProcessConfig>),
    /// All-ones mask, for checking the evaluation path itself.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub snr_db: f64,
    pub sdr_obs: f64,
    pub sdr_enh: f64,
    pub bandcorr_obs: f64,
    pub bandcorr_enh: f64,
    /// External scores of (observed, enhanced), when configured.
    pub ext: Option<(f64, f64)>,
}

pub fn evaluate_utterance(
    model: &Model,
    u: &Utterance,
    source: MaskSource,
    ext: Option<&dyn Scorer>,
) -> Result<EvalRow> {
    let spec = model.spectrogram(&u.mixture)?;
    let mask = match source {
        MaskSource::Identity => MaskMatrix::ones_like(&spec),
        MaskSource::Network(post) => {
            let m = model.map_mask(model.features(&spec)?.view(), &spec)?;
            match post {
                Some(cfg) => postprocess_mask(&m, &cfg),
                None => m,
            }
        }
    };
    let enhanced = istft(&apply_mask(&mask, &spec)?)?;
    let obs = ScoreRequest::new(&u.mixture, &u.clean, &u.mixture)?;
    let enh = ScoreRequest::new(&enhanced, &u.clean, &u.mixture)?;
    let ext = match ext {
        Some(s) => Some((s.score(&obs)?, s.score(&enh)?)),
        None => None,
    };
    Ok(EvalRow {
        id: u.id.clone(),
        snr_db: u.snr_db,
        sdr_obs: sdr_score(&obs)?,
        sdr_enh: sdr_score(&enh)?,
        bandcorr_obs: band_correlation_score(&obs)?,
        bandcorr_enh: band_correlation_score(&enh)?,
        ext,
    })
}

pub fn evaluate(model: &Model, utts: &[Utterance], source: MaskSource, ext: Option<&dyn Scorer>) -> Result<Vec<EvalRow>> {
    match ext {
        Some(s) if !s.concurrent() => utts.iter().map(|u| evaluate_utterance(model, u, source, ext)).collect(),
        _ => utts.par_iter().map(|u| evaluate_utterance(model, u, source, ext)).collect(),
    }
}

/// Per-SNR means of every column, in ascending SNR order.
pub fn summarize_by_snr(rows: &[EvalRow]) -> Vec<(EvalRow, usize)> {
    let mut snrs: Vec<f64> = rows.iter().map(|r| r.snr_db).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();
    snrs.into_iter()
        .map(|snr| {
            let group: Vec<&EvalRow> = rows.iter().filter(|r| r.snr_db == snr).collect();
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&EvalRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            let ext = if group.iter().all(|r| r.ext.is_some()) {
                Some((mean(&|r| r.ext.unwrap().0), mean(&|r| r.ext.unwrap().1)))
            } else {
                None
            };
            (
                EvalRow {
                    id: "mean".into(),
                    snr_db: snr,
                    sdr_obs: mean(&|r| r.sdr_obs),
                    sdr_enh: mean(&|r| r.sdr_enh),
                    bandcorr_obs: mean(&|r| r.bandcorr_obs),
                    bandcorr_enh: mean(&|r| r.bandcorr_enh),
                    ext,
                },
                group.len(),
            )
        })
        .collect()
}

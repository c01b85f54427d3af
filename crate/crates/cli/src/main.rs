mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskpg::data::{generate_corpus, load_corpus, load_manifest, load_wav, save_wav, CorpusOptions, Utterance};
use maskpg::likelihood::Objective;
use maskpg::masks::PostProcessConfig;
use maskpg::nn::{init_params, NetDims, TrainHyper};
use maskpg::policy::{OutputScorer, PGConfig, WaveformScorer};
use maskpg::scorers::{
    BandCorrelationScorer, Endpoint, ExternalScorer, MixedScorer, ScaledScorer, ScoreScale, Scorer, SdrScorer,
};
use maskpg::train::{
    estimate_stats, evaluate, summarize_by_snr, train_pg, train_supervised, DspConfig, EvalRow, MaskSource, Model,
    SupervisedConfig, PG_RUN_LOG_HEADER, SUPERVISED_LOG_HEADER,
};

use config::{parse_list, Resolver};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<maskpg::Error> for CliError {
    fn from(e: maskpg::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "maskpg", version, about = "Mask-based speech enhancement trained by likelihood and by policy gradient")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and its manifest.
    Synth(SynthArgs),
    /// Train a mask network (ml, mmse) or fine-tune one with policy gradient (pg).
    Train(TrainArgs),
    /// Enhance WAV files with a trained network.
    Enhance(EnhanceArgs),
    /// Score observed and enhanced signals of a manifest.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seconds per utterance.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    /// Comma-separated SNRs in dB, assigned round-robin.
    #[arg(long, default_value = "-6,0,6,12", allow_hyphen_values = true)]
    snrs: String,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Ml,
    Mmse,
    Pg,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Ml => "ml",
            Mode::Mmse => "mmse",
            Mode::Pg => "pg",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScorerKind {
    Sdr,
    Bandcorr,
    Ext,
    /// gamma * scaled external score + (1 - gamma) * scaled band correlation
    Mixed,
}

impl std::str::FromStr for ScorerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScalePreset {
    Pesq,
    Stoi,
    Sdr,
    Identity,
}

impl std::str::FromStr for ScalePreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

impl std::fmt::Display for ScalePreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

impl ScalePreset {
    fn scale(self) -> ScoreScale {
        match self {
            ScalePreset::Pesq => ScoreScale::pesq(),
            ScalePreset::Stoi => ScoreScale::stoi(),
            ScalePreset::Sdr => ScoreScale::sdr(),
            ScalePreset::Identity => ScoreScale::identity(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Held-out manifest; without it the tail of --manifest is held out.
    #[arg(long)]
    valid_manifest: Option<PathBuf>,
    #[arg(long)]
    valid_fraction: Option<f64>,
    /// Checkpoint to start from (required for pg).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV training log, default `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    frame_len: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    /// Comma-separated hidden layer widths.
    #[arg(long)]
    hidden: Option<String>,

    #[arg(long)]
    c_sigma: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    min_step: Option<f64>,
    #[arg(long)]
    dropout_in: Option<f64>,
    #[arg(long)]
    dropout_hidden: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    /// Utterances per supervised update.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    validate_every: Option<usize>,

    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long = "I")]
    i: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Keep dropout active during policy-gradient updates.
    #[arg(long)]
    pg_dropout: Option<bool>,
    #[arg(long)]
    scorer: Option<ScorerKind>,
    /// `cmd:<program> [args]` or `tcp:<host>:<port>`.
    #[arg(long)]
    scorer_ext: Option<String>,
    #[arg(long)]
    scale: Option<ScalePreset>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    scorer_timeout: Option<f64>,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    no_postprocess: bool,
    #[arg(long, default_value_t = PostProcessConfig::default().g_min)]
    g_min: f64,
    #[arg(long, default_value_t = PostProcessConfig::default().beta)]
    beta: f64,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_postprocess: bool,
    /// Apply an all-ones mask instead of the network's.
    #[arg(long)]
    identity_mask: bool,
    #[arg(long, default_value_t = PostProcessConfig::default().g_min)]
    g_min: f64,
    #[arg(long, default_value_t = PostProcessConfig::default().beta)]
    beta: f64,
    #[arg(long)]
    scorer_ext: Option<String>,
    #[arg(long)]
    scorer_timeout: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let snrs: Vec<f64> = parse_list(&a.snrs, "snr")?;
    if snrs.is_empty() || a.n == 0 {
        return Err(CliError::Usage("need at least one utterance and one SNR".into()));
    }
    let opts = CorpusOptions {
        duration_s: a.duration,
        sample_rate: a.sample_rate,
    };
    let (path, _) = generate_corpus(a.n, a.seed, &snrs, &a.out, &opts)?;
    println!("{}", path.display());
    Ok(())
}

fn external(endpoint: &str, timeout_s: Option<f64>) -> CliResult<ExternalScorer> {
    let ep: Endpoint = endpoint.parse().map_err(|e: maskpg::Error| CliError::Usage(e.to_string()))?;
    let mut s = ExternalScorer::new(ep);
    if let Some(t) = timeout_s {
        if !(t > 0.0) {
            return Err(CliError::Usage("scorer timeout must be positive".into()));
        }
        s = s.with_timeout(std::time::Duration::from_secs_f64(t));
    }
    Ok(s)
}

fn required<T>(v: Option<T>, what: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing required setting {what}")))
}

/// Splits a corpus into training and held-out parts.
fn split_corpus(mut utts: Vec<Utterance>, fraction: f64) -> CliResult<(Vec<Utterance>, Vec<Utterance>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CliError::Usage(format!("valid_fraction {fraction} outside [0, 1)")));
    }
    let n_valid = ((utts.len() as f64 * fraction).round() as usize).max(usize::from(fraction > 0.0));
    if n_valid >= utts.len() {
        return Err(CliError::Runtime(format!("{} utterances cannot be split for validation", utts.len())));
    }
    let valid = utts.split_off(utts.len() - n_valid);
    Ok((utts, valid))
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    if a.mode == Mode::Pg && a.init.is_none() {
        return Err(CliError::Usage("pg mode requires an ML checkpoint (--init)".into()));
    }
    let mut r = Resolver::load(a.config.as_deref())?;
    r.get("mode", Some(a.mode), a.mode)?;
    let manifest: PathBuf = required(r.get_opt("manifest", a.manifest.map(|p| p.display().to_string()))?, "manifest")?.into();
    let valid_manifest = r.get_opt("valid_manifest", a.valid_manifest.map(|p| p.display().to_string()))?;
    let valid_fraction = if valid_manifest.is_none() {
        r.get("valid_fraction", a.valid_fraction, 0.2)?
    } else {
        0.0
    };
    let out: PathBuf = required(r.get_opt("out", a.out.map(|p| p.display().to_string()))?, "out")?.into();
    let default_log = format!("{}.log.csv", out.display());
    let log_path: PathBuf = r.get("log", a.log.map(|p| p.display().to_string()), default_log)?.into();
    let seed = r.get("seed", a.seed, 0u64)?;
    let validate_every = r.get("validate_every", a.validate_every, 10usize)?;

    let man = load_manifest(&manifest)?;
    let corpus = load_corpus(&man)?;
    let (train_utts, valid_utts) = match &valid_manifest {
        Some(p) => (corpus, load_corpus(&load_manifest(p)?)?),
        None => split_corpus(corpus, valid_fraction)?,
    };

    let created = format!("maskpg train mode={} seed={seed}", a.mode);
    match a.mode {
        Mode::Ml | Mode::Mmse => {
            let dsp = DspConfig {
                frame_len: r.get("frame_len", a.frame_len, 512)?,
                hop: r.get("hop", a.hop, 256)?,
                bands: r.get("bands", a.bands, 64)?,
                context: r.get("context", a.context, 5)?,
                sample_rate: man.sample_rate,
            };
            let d = TrainHyper::default();
            let hyper = TrainHyper {
                c_sigma: r.get("c_sigma", a.c_sigma, d.c_sigma)?,
                dropout_in: r.get("dropout_in", a.dropout_in, d.dropout_in)?,
                dropout_hidden: r.get("dropout_hidden", a.dropout_hidden, d.dropout_hidden)?,
                l2: r.get("l2", a.l2, d.l2)?,
                step_size: r.get("step_size", a.step_size, d.step_size)?,
            };
            let hidden: Vec<usize> = parse_list(&r.get("hidden", a.hidden, "1024,1024,1024".to_string())?, "hidden")?;
            let cfg = SupervisedConfig {
                objective: if a.mode == Mode::Ml {
                    Objective::MaximumLikelihood
                } else {
                    Objective::PsaMmse
                },
                hyper,
                min_step: r.get("min_step", a.min_step, 1e-7)?,
                batch: r.get("batch", a.batch, 4usize)?,
                max_updates: r.get("updates", a.updates, 10_000usize)?,
                validate_every,
                seed,
            };
            let init = r.get_opt("init", a.init.map(|p| p.display().to_string()))?;
            r.check_unused()?;
            echo_config(&r, &log_path)?;

            let mut model = match init {
                Some(p) => {
                    let m = Model::load(&p)?;
                    if m.dsp != dsp {
                        return Err(CliError::Usage(format!("{p} was trained with different front-end settings")));
                    }
                    m
                }
                None => {
                    let stats = estimate_stats(&train_utts, &dsp)?;
                    let params = init_params(&NetDims::new(dsp.input_dim(), hidden, dsp.bands), seed)?;
                    Model::new(params, stats, dsp, hyper.c_sigma)?
                }
            };
            let train = model.prepare_all(&train_utts)?;
            let valid = model.prepare_all(&valid_utts)?;
            let mut log = BufWriter::new(File::create(&log_path)?);
            writeln!(log, "{SUPERVISED_LOG_HEADER}")?;
            train_supervised(&mut model, &train, &valid, &cfg, |rec| {
                let line = rec.csv_line();
                writeln!(log, "{line}")?;
                if rec.valid_loss.is_some() {
                    eprintln!("{line}");
                }
                Ok(())
            })?;
            log.flush()?;
            model.save(&out, &created)?;
        }
        Mode::Pg => {
            let init: String = required(r.get_opt("init", a.init.map(|p| p.display().to_string()))?, "init")?;
            let d = PGConfig::default();
            let cfg = PGConfig {
                k: r.get("k", a.k, d.k)?,
                utterances: r.get("i", a.i, d.utterances)?,
                epsilon: r.get("epsilon", a.epsilon, d.epsilon)?,
                lambda: r.get("lambda", a.lambda, d.lambda)?,
                step_size: r.get("step_size", a.step_size, d.step_size)?,
                seed,
                updates: r.get("updates", a.updates, d.updates)?,
                dropout: r.get("pg_dropout", a.pg_dropout, d.dropout)?,
            };
            let kind = r.get("scorer", a.scorer, ScorerKind::Sdr)?;
            let default_scale = match kind {
                ScorerKind::Sdr => ScalePreset::Sdr,
                ScorerKind::Bandcorr => ScalePreset::Stoi,
                ScorerKind::Ext | ScorerKind::Mixed => ScalePreset::Pesq,
            };
            let scale = r.get("scale", a.scale, default_scale)?.scale();
            let ext = match kind {
                ScorerKind::Ext | ScorerKind::Mixed => Some(required(r.get_opt("scorer_ext", a.scorer_ext)?, "scorer_ext")?),
                _ => None,
            };
            let timeout = r.get_opt("scorer_timeout", a.scorer_timeout)?;
            let gamma = if kind == ScorerKind::Mixed {
                r.get("gamma", a.gamma, 0.5)?
            } else {
                0.5
            };
            r.check_unused()?;
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            echo_config(&r, &log_path)?;

            let scaled = |inner: Box<dyn Scorer>, scale: ScoreScale| -> Box<dyn Scorer> { Box::new(ScaledScorer { inner, scale }) };
            let scorer: Box<dyn Scorer> = match kind {
                ScorerKind::Sdr => scaled(Box::new(SdrScorer), scale),
                ScorerKind::Bandcorr => scaled(Box::new(BandCorrelationScorer), scale),
                ScorerKind::Ext => scaled(Box::new(external(ext.as_deref().unwrap_or_default(), timeout)?), scale),
                ScorerKind::Mixed => Box::new(MixedScorer::new(
                    scaled(Box::new(external(ext.as_deref().unwrap_or_default(), timeout)?), scale),
                    scaled(Box::new(BandCorrelationScorer), ScoreScale::stoi()),
                    gamma,
                )?),
            };
            let scorer = WaveformScorer(scorer);

            let mut model = Model::load(&init)?;
            let train = model.prepare_all(&train_utts)?;
            let valid = model.prepare_all(&valid_utts)?;
            let mut log = BufWriter::new(File::create(&log_path)?);
            writeln!(log, "{PG_RUN_LOG_HEADER}")?;
            let (initial, _) = train_pg(&mut model, &train, &valid, &cfg, validate_every, &scorer as &dyn OutputScorer, |rec| {
                let line = rec.csv_line();
                writeln!(log, "{line}")?;
                if rec.valid_score.is_some() {
                    eprintln!("{line}");
                }
                Ok(())
            })?;
            if let Some(z) = initial {
                eprintln!("held-out score before fine-tuning: {z}");
            }
            log.flush()?;
            model.save(&out, &created)?;
        }
    }
    eprintln!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

fn echo_config(r: &Resolver, log_path: &Path) -> CliResult<()> {
    let text = r.render();
    eprint!("{text}");
    let mut p = log_path.as_os_str().to_owned();
    p.push(".config");
    std::fs::write(PathBuf::from(p), text)?;
    Ok(())
}

fn cmd_enhance(a: EnhanceArgs) -> CliResult<()> {
    let model = Model::load(&a.model)?;
    let post = PostProcessConfig {
        g_min: a.g_min,
        beta: a.beta,
    };
    post.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let post = (!a.no_postprocess).then_some(post);
    std::fs::create_dir_all(&a.out_dir)?;
    let mut failed = 0;
    for input in &a.inputs {
        let result = (|| -> maskpg::Result<PathBuf> {
            let name = input
                .file_name()
                .ok_or_else(|| maskpg::Error::InvalidArgument(format!("{} has no file name", input.display())))?;
            let w = load_wav(input, Some(model.dsp.sample_rate))?;
            let out = a.out_dir.join(name);
            save_wav(&out, &model.enhance(&w, post.as_ref())?)?;
            Ok(out)
        })();
        match result {
            Ok(out) => println!("{}", out.display()),
            Err(e) => {
                eprintln!("{}: {e}", input.display());
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} inputs failed", a.inputs.len())));
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let model = Model::load(&a.model)?;
    let man = load_manifest(&a.manifest)?;
    let utts = load_corpus(&man)?;
    let post = PostProcessConfig {
        g_min: a.g_min,
        beta: a.beta,
    };
    post.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let source = if a.identity_mask {
        MaskSource::Identity
    } else {
        MaskSource::Network((!a.no_postprocess).then_some(post))
    };
    let ext = a.scorer_ext.as_deref().map(|e| external(e, a.scorer_timeout)).transpose()?;
    let rows = evaluate(&model, &utts, source, ext.as_ref().map(|s| s as &dyn Scorer))?;
    let means = summarize_by_snr(&rows);

    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["id", "snr_db", "sdr_obs", "sdr_enh", "bandcorr_obs", "bandcorr_enh"];
    if ext.is_some() {
        header.extend(["ext_obs", "ext_enh"]);
    }
    w.write_record(&header).map_err(csv_err)?;
    let record = |row: &EvalRow| {
        let mut f = vec![
            row.id.clone(),
            row.snr_db.to_string(),
            row.sdr_obs.to_string(),
            row.sdr_enh.to_string(),
            row.bandcorr_obs.to_string(),
            row.bandcorr_enh.to_string(),
        ];
        if let Some((o, e)) = row.ext {
            f.extend([o.to_string(), e.to_string()]);
        }
        f
    };
    for row in rows.iter().chain(means.iter().map(|(m, _)| m)) {
        w.write_record(record(row)).map_err(csv_err)?;
    }
    w.flush()?;
    for (m, n) in &means {
        eprintln!(
            "snr {:>6.1} dB  n={n:<3} SDR {:7.3} -> {:7.3}  bandcorr {:.3} -> {:.3}",
            m.snr_db, m.sdr_obs, m.sdr_enh, m.bandcorr_obs, m.bandcorr_enh
        );
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

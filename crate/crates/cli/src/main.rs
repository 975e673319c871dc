use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use emorl::config::PipelineConfig;
use emorl::data::{load_corpus, load_manifest, validate_manifest, write_manifest, write_synthetic, Utterance};
use emorl::eval::{loso_report, report_fold, EvalReport, FoldInfo, DEFAULT_RATIOS};
use emorl::features::{compute_norm_stats, extract_features, read_features, read_wav, write_features, FeatureSeq};
use emorl::trainer::{
    load_checkpoint, pretrain, save_checkpoint, train_with, Checkpoint, StreamOutcome, StreamSession,
};

/// Invalid invocation, missing input or bad configuration (exit code 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "emorl", version, about = "Early-terminating angry/neutral speech classification")]
struct Cli {
    /// Pipeline configuration (TOML with [train], [features], [synthetic]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a manifest of WAV files into feature files, a feature manifest
    /// and normalization statistics.
    ExtractFeatures(ExtractArgs),
    /// Write a synthetic early-cue corpus.
    SynthData(SynthArgs),
    /// Supervised pre-training of the encoder and classifier.
    Pretrain(PretrainArgs),
    /// Reinforcement training of the termination policy (also resumes).
    Train(TrainArgs),
    /// Policy and truncation-baseline metrics.
    Eval(EvalArgs),
    /// Replay one utterance frame by frame and print each decision.
    Stream(StreamArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Manifest whose source column points at WAV files.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Speaker excluded from the normalization statistics.
    #[arg(long)]
    holdout_speaker: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
}

#[derive(Args)]
struct SplitArgs {
    /// Feature manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Leave this speaker out of training (or keep only it for evaluation).
    #[arg(long)]
    holdout_speaker: Option<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// Pre-trained or partially trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Total episodes to reach, counting those already in the checkpoint.
    #[arg(long)]
    episodes: Option<u64>,
    /// Episodes with the encoder and classifier frozen.
    #[arg(long)]
    freeze_episodes: Option<u64>,
    /// Reseed a checkpoint that has not started reinforcement training.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-episode log file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// Trained policy checkpoint (not used with --loso).
    #[arg(long, required_unless_present = "loso")]
    checkpoint: Option<PathBuf>,
    /// Supervised checkpoint for the truncation rows; defaults to --checkpoint.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Utterance fractions for the truncation baseline.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RATIOS.to_vec())]
    ratios: Vec<f64>,
    /// Run the full leave-one-speaker-out protocol (pretrain + train per fold).
    #[arg(long)]
    loso: bool,
    /// Seeds for --loso.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Write per-fold rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file to replay.
    #[arg(long, conflicts_with = "audio", required_unless_present = "audio")]
    features: Option<PathBuf>,
    /// WAV file, converted with the [features] settings.
    #[arg(long)]
    audio: Option<PathBuf>,
    /// Pace frames at the feature hop instead of running flat out.
    #[arg(long)]
    realtime: bool,
    /// Terminate at the first decision point (debugging).
    #[arg(long)]
    force_terminate: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.is::<UsageError>() {
        return 2;
    }
    match e.downcast_ref::<emorl::Error>() {
        Some(emorl::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => {
            require_file(p, "config file")?;
            PipelineConfig::load(p).map_err(|e| usage(e.to_string()))?
        }
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::ExtractFeatures(a) => cmd_extract(&config, a),
        Command::SynthData(a) => cmd_synth(&config, a),
        Command::Pretrain(a) => cmd_pretrain(&config, a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(&config, a),
        Command::Stream(a) => cmd_stream(&config, a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} not found", path.display())));
    }
    Ok(())
}

fn cmd_extract(config: &PipelineConfig, a: ExtractArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let manifest = load_manifest(&a.manifest)?;
    let feat_dir = a.out.join("features");
    fs::create_dir_all(&feat_dir).with_context(|| format!("creating {}", feat_dir.display()))?;
    let mut records = Vec::with_capacity(manifest.records.len());
    let mut train_feats: Vec<FeatureSeq> = Vec::new();
    for r in &manifest.records {
        let wav = manifest.feature_path(r);
        let audio = read_wav(&wav).with_context(|| format!("{}: reading {}", r.id, wav.display()))?;
        let feats = extract_features(&audio, &config.features).with_context(|| format!("{}: feature extraction", r.id))?;
        let rel = PathBuf::from("features").join(format!("{}.fea", r.id));
        write_features(&a.out.join(&rel), &feats)?;
        let mut rec = r.clone();
        rec.source = rel;
        rec.frames = feats.len();
        records.push(rec);
        if a.holdout_speaker.as_deref() != Some(r.speaker.as_str()) {
            train_feats.push(feats);
        }
    }
    let stats = compute_norm_stats(&train_feats).context("normalization statistics")?;
    let manifest_out = a.out.join("manifest.tsv");
    write_manifest(&manifest_out, &records)?;
    stats.save(&a.out.join("stats.toml"))?;
    println!(
        "wrote {} feature files, {} and stats.toml ({} training frames)",
        records.len(),
        manifest_out.display(),
        stats.count
    );
    Ok(())
}

fn cmd_synth(config: &PipelineConfig, a: SynthArgs) -> Result<()> {
    let mut cfg = config.synthetic.clone();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.utterances {
        cfg.utterances = n;
    }
    if let Some(n) = a.speakers {
        cfg.speakers = n;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = write_synthetic(&cfg, &a.out)?;
    println!(
        "wrote {} utterances from {} speakers to {}",
        manifest.records.len(),
        cfg.speakers,
        a.out.display()
    );
    Ok(())
}

/// Loads the manifest's corpus and splits it by the held-out speaker.
fn load_split(split: &SplitArgs, dim: Option<usize>) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    require_file(&split.manifest, "manifest")?;
    let manifest = load_manifest(&split.manifest)?;
    if let Some(d) = dim {
        validate_manifest(&manifest, d)?;
    }
    let corpus = load_corpus(&manifest)?;
    let Some(spk) = &split.holdout_speaker else {
        return Ok((corpus, Vec::new()));
    };
    let (held, rest): (Vec<_>, Vec<_>) = corpus.into_iter().partition(|u| &u.speaker == spk);
    if held.is_empty() {
        return Err(usage(format!("speaker {spk} does not occur in {}", split.manifest.display())));
    }
    Ok((rest, held))
}

fn cmd_pretrain(config: &PipelineConfig, a: PretrainArgs) -> Result<()> {
    let mut cfg = config.train.clone();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (train, _) = load_split(&a.split, None)?;
    let started = Instant::now();
    let (ckpt, report) = pretrain(&train, &cfg)?;
    save_checkpoint(&a.out, &ckpt)?;
    println!(
        "pre-trained on {} utterances in {:.1?}: {} epochs, kept epoch {}, final loss {}",
        train.len(),
        started.elapsed(),
        report.train_loss.len(),
        report.best_epoch,
        report.train_loss.last().map_or("n/a".into(), |l| format!("{l:.5}"))
    );
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    require_file(path, "checkpoint")?;
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut ckpt = load_ckpt(&a.checkpoint)?;
    if let Some(f) = a.freeze_episodes {
        ckpt.config.freeze_episodes = f;
    }
    if let Some(e) = a.episodes {
        ckpt.config.episodes = e;
    }
    if let Some(s) = a.seed {
        ckpt.reseed(s).map_err(|e| usage(e.to_string()))?;
    }
    ckpt.config.validate().map_err(|e| usage(e.to_string()))?;
    let (train, _) = load_split(&a.split, Some(ckpt.norm.dim()))?;
    let mut log_file = match &a.log {
        Some(p) => Some(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let target = ckpt.config.episodes;
    let start = ckpt.episode;
    let started = Instant::now();
    let (mut window_reward, mut window_n) = (0.0, 0u32);
    train_with(&mut ckpt, &train, target, |_, l| {
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{l}")?;
        }
        window_reward += l.reward;
        window_n += 1;
        if l.episode % 1000 == 0 {
            info!("episode {}: mean reward {:.4}", l.episode, window_reward / f64::from(window_n));
            (window_reward, window_n) = (0.0, 0);
        }
        Ok(())
    })?;
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    save_checkpoint(&a.out, &ckpt)?;
    println!(
        "trained episodes {}..{} in {:.1?}; checkpoint {}",
        start,
        ckpt.episode,
        started.elapsed(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(config: &PipelineConfig, a: EvalArgs) -> Result<()> {
    let ratios = a.ratios;
    if ratios.is_empty() || ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) || ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage("--ratios must be increasing values in (0, 1]"));
    }
    let report = if a.loso {
        if a.split.holdout_speaker.is_some() {
            return Err(usage("--loso holds out every speaker in turn; drop --holdout-speaker"));
        }
        config.train.validate().map_err(|e| usage(e.to_string()))?;
        let (corpus, _) = load_split(&a.split, None)?;
        loso_report(&corpus, &config.train, &a.seeds, &ratios)?
    } else {
        let policy_path = a.checkpoint.expect("clap requires --checkpoint without --loso");
        let trained = load_ckpt(&policy_path)?;
        let baseline = match &a.baseline {
            Some(p) => load_ckpt(p)?,
            None => trained.clone(),
        };
        let (rest, held) = load_split(&a.split, Some(trained.norm.dim()))?;
        let test = if held.is_empty() { rest } else { held };
        let fold = FoldInfo {
            speaker: a.split.holdout_speaker.clone().unwrap_or_else(|| "all".into()),
            seed: trained.config.seed,
        };
        let mut report = EvalReport::default();
        report_fold(&mut report, &baseline, &trained, &test, &fold, &ratios)?;
        report
    };
    print!("{}", report.to_table());
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_stream(config: &PipelineConfig, a: StreamArgs) -> Result<()> {
    let ckpt = load_ckpt(&a.checkpoint)?;
    let (features, hop_ms) = match (&a.features, &a.audio) {
        (Some(p), _) => {
            require_file(p, "feature file")?;
            (read_features(p)?, config.features.hop_ms)
        }
        (None, Some(p)) => {
            require_file(p, "audio file")?;
            config.features.validate().map_err(|e| usage(e.to_string()))?;
            (extract_features(&read_wav(p)?, &config.features)?, config.features.hop_ms)
        }
        (None, None) => return Err(usage("give --features or --audio")),
    };
    if features.dim() != ckpt.norm.dim() {
        return Err(usage(format!(
            "features are {}-dimensional, checkpoint expects {}",
            features.dim(),
            ckpt.norm.dim()
        )));
    }
    if features.is_empty() {
        return Err(usage("utterance has no frames"));
    }
    let len = features.len();
    let hop = Duration::from_secs_f64(hop_ms / 1000.0);
    let mut session = StreamSession::new(&ckpt).with_forced_termination(a.force_terminate);
    let out = io::stdout();
    let mut out = out.lock();
    let started = Instant::now();
    for (i, x) in features.frames().enumerate() {
        if a.realtime {
            let due = hop * (i as u32 + 1);
            if let Some(wait) = due.checked_sub(started.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        if let Some(ev) = session.push(x)? {
            print_event(&mut out, &ev, len, hop_ms)?;
            if ev.is_final() {
                return Ok(());
            }
        }
    }
    match session.finish()? {
        Some(ev) => print_event(&mut out, &ev, len, hop_ms)?,
        None => warn!("stream ended without a closing decision"),
    }
    Ok(())
}

fn print_event(out: &mut impl Write, ev: &emorl::trainer::StreamEvent, len: usize, hop_ms: f64) -> Result<()> {
    let head = format!(
        "step={} frame={} time={:.2}s p_terminate={:.4}",
        ev.step,
        ev.frame,
        ev.frame as f64 * hop_ms / 1000.0,
        ev.p_terminate
    );
    let fraction = ev.frame as f64 / len as f64;
    match ev.outcome {
        StreamOutcome::Wait => writeln!(out, "{head} WAIT")?,
        StreamOutcome::Terminate { decision, prob } => {
            writeln!(out, "{head} TERMINATE label={decision} d={prob:.4} fraction={fraction:.3}")?
        }
        StreamOutcome::Forced { decision, prob } => {
            writeln!(out, "{head} FORCED label={decision} d={prob:.4} fraction={fraction:.3}")?
        }
    }
    out.flush()?;
    Ok(())
}

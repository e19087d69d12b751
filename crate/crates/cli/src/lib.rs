//! Command-line pipeline: corpus synthesis, features, training, embedding,
//! enrollment, scoring, evaluation, fusion and t-SNE export.
//!
//! Every stage reads and writes plain files so stages can be run and tested
//! one at a time. Exit status is 0 on success, 1 for invalid input or
//! configuration and 2 for runtime failures.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use digitvox::corpus::{
    compute_features, parse_enrollment_lists, parse_manifest, parse_trials, synth_corpus, CorpusError, FeatureSource,
    ManifestEntry, SynthSpec,
};
use digitvox::dsp::write_feature_cache;
use digitvox::metrics::{
    det_curve, fusion_apply, fusion_train, tsne_project, tsne_svg, write_det, write_tsne_tsv, DcfParams, EvalReport,
    MetricsError, ScoreSet, TsneConfig, TsnePoint,
};
use digitvox::model::{Checkpoint, LightCnn, ModelConfig, TrainingMeta, Width};
use digitvox::trainer::{
    extract_all_embeddings, feature_digest, read_embedding_cache, train, write_embedding_cache, LabelMap, TaskMode,
    TrainConfig, TrainError,
};
use digitvox::verify::{
    enroll_all, read_models, read_scores, run_protocol_parallel, write_models, write_scores, ScoreRecord, TrialLabel,
    VerifyError,
};

/// Invalid input or configuration; reported with exit status 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(e: impl fmt::Display) -> anyhow::Error {
    Invalid(e.to_string()).into()
}

fn corpus_err(e: CorpusError) -> anyhow::Error {
    match e {
        CorpusError::Line { .. } | CorpusError::Spec(_) => invalid(e),
        other => other.into(),
    }
}

fn verify_err(e: VerifyError) -> anyhow::Error {
    match e {
        VerifyError::Io(_) => e.into(),
        other => invalid(other),
    }
}

fn metrics_err(e: MetricsError) -> anyhow::Error {
    invalid(e)
}

/// Text-prompted speaker verification toolkit.
#[derive(Debug, Parser)]
#[command(name = "digitvox", version, about)]
pub struct Cli {
    /// Config file of `key = value` lines; keys are long flag names with `_`
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for data-parallel stages (features, embed, score, synth)
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=256))]
    pub workers: u64,
    /// Force one worker and omit wall-clock times so reruns are byte-identical
    #[arg(long, global = true)]
    pub strict_deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic digit corpus with manifest, enrollment and trial lists
    Synth(SynthArgs),
    /// Compute per-digit log-mel feature caches for a manifest
    Features(FeaturesArgs),
    /// Train a Light-CNN extractor in single-task or multitask mode
    Train(TrainArgs),
    /// Extract embeddings for every manifest row with a trained checkpoint
    Embed(EmbedArgs),
    /// Build per-digit enrollment models from embeddings
    Enroll(EnrollArgs),
    /// Score a trial list against enrollment models
    Score(ScoreArgs),
    /// Report EER and minDCF for a score file
    Eval(EvalArgs),
    /// Train and apply logistic score fusion over aligned score files
    Fuse(FuseArgs),
    /// Project embeddings of a few speakers to 2-D with t-SNE
    Tsne(TsneArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of speakers
    #[arg(long, default_value_t = 20)]
    pub speakers: usize,
    /// Sessions recorded per speaker
    #[arg(long, default_value_t = 8)]
    pub sessions: u32,
    /// Leading sessions used for enrollment and training
    #[arg(long, default_value_t = 3)]
    pub enroll_sessions: u32,
    /// Generator seed
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Signal-to-noise ratio of the additive noise in dB
    #[arg(long, default_value_t = 20.0)]
    pub snr_db: f64,
    /// Shortest digit duration in seconds
    #[arg(long, default_value_t = 0.3)]
    pub min_duration: f64,
    /// Longest digit duration in seconds
    #[arg(long, default_value_t = 0.8)]
    pub max_duration: f64,
    /// Digits per trial passphrase
    #[arg(long, default_value_t = 5)]
    pub passphrase_len: usize,
    /// Nontarget trials per target trial
    #[arg(long, default_value_t = 10)]
    pub nontarget_ratio: usize,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Manifest (JSON lines)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory that manifest audio paths are relative to (default: the manifest's directory)
    #[arg(long)]
    pub audio_root: Option<PathBuf>,
    /// Output directory for `<utt_id>.vdft` caches
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest (JSON lines)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory that manifest audio paths are relative to (default: the manifest's directory)
    #[arg(long)]
    pub audio_root: Option<PathBuf>,
    /// Feature cache directory to read instead of audio when present
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Class construction: single-task (speakers) or multitask (speaker × digit)
    #[arg(long, default_value = "multitask")]
    pub mode: TaskMode,
    /// Channel width multiplier, as a decimal or fraction
    #[arg(long, default_value = "0.25")]
    pub width: Width,
    /// Training epochs
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Mini-batch size
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 0.01)]
    pub lr0: f64,
    /// Learning-rate decay factor applied every period
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    /// Epochs between learning-rate decays
    #[arg(long, default_value_t = 10)]
    pub period: usize,
    /// SGD momentum
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Ceiling on the joint gradient norm per step (0 disables clipping)
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    /// Seed for initialization and shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Checkpoint file written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of utterances to embed
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory that manifest audio paths are relative to (default: the manifest's directory)
    #[arg(long)]
    pub audio_root: Option<PathBuf>,
    /// Feature cache directory to read instead of audio when present
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    /// Embedding cache written by `embed`
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Enrollment lists (model_id, digit:utt_id pairs)
    #[arg(long)]
    pub enrollment: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Enrollment models written by `enroll`
    #[arg(long)]
    pub models: PathBuf,
    /// Embedding cache written by `embed`
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Trial list
    #[arg(long)]
    pub trials: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score file written by `score` or `fuse`
    #[arg(long)]
    pub scores: PathBuf,
    /// System name in the report (default: the score file name)
    #[arg(long)]
    pub name: Option<String>,
    /// Target prior of the detection cost
    #[arg(long, default_value_t = 0.01)]
    pub p_tar: f64,
    /// Cost of a miss
    #[arg(long, default_value_t = 10.0)]
    pub c_miss: f64,
    /// Cost of a false alarm
    #[arg(long, default_value_t = 1.0)]
    pub c_fa: f64,
    /// Optional output directory for report.tsv and det.tsv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Labeled score files to train fusion on, one per system (repeat the flag)
    #[arg(long, required = true)]
    pub train_scores: Vec<PathBuf>,
    /// Score files to fuse with the trained weights, same system order (default: the training files)
    #[arg(long)]
    pub apply_scores: Vec<PathBuf>,
    /// Effective target prior of the fusion objective
    #[arg(long, default_value_t = 0.01)]
    pub prior: f64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TsneArgs {
    /// Embedding cache written by `embed`
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Manifest providing speaker and digit labels
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of speakers to plot, taken in sorted id order
    #[arg(long, default_value_t = 5)]
    pub speakers: usize,
    /// Perplexity of the input affinities
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    /// Gradient-descent iterations
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    /// Seed of the initial layout
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings shared by every subcommand.
struct Run {
    workers: usize,
    strict: bool,
    /// Effective `key = value` settings, echoed into output directories.
    effective: Vec<(String, String)>,
}

impl Run {
    fn prepare_out(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let mut w = create(&dir.join("config.txt"))?;
        for (k, v) in &self.effective {
            writeln!(w, "{k} = {v}")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn audio_root(given: &Option<PathBuf>, manifest: &Path) -> PathBuf {
    given
        .clone()
        .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn feature_source(root: PathBuf, cache: &Option<PathBuf>) -> FeatureSource {
    let src = FeatureSource::audio(root);
    match cache {
        Some(dir) => src.with_cache(dir),
        None => src,
    }
}

fn effective_config(matches: &clap::ArgMatches) -> Vec<(String, String)> {
    let Some((_, sub)) = matches.subcommand() else {
        return Vec::new();
    };
    let mut out = BTreeMap::new();
    for id in sub.ids() {
        let key = id.as_str();
        if key == "config" {
            continue;
        }
        if let Some(raw) = sub.get_raw(key) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            if !vals.is_empty() {
                out.insert(key.to_string(), vals.join(","));
            }
        }
    }
    out.into_iter().collect()
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status. Diagnostics go to standard error.
pub fn run(argv: Vec<OsString>) -> i32 {
    let root = Cli::command();
    let argv = match config::config_path(&argv) {
        Some(path) => match config::load(Path::new(&path)).and_then(|e| config::merge(&root, argv, &e)) {
            Ok(a) => a,
            Err(e) => {
                eprintln!("error: {e}");
                return 1;
            }
        },
        None => argv,
    };
    let matches = match root.try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let ctx = Run {
        workers: if cli.strict_deterministic { 1 } else { cli.workers as usize },
        strict: cli.strict_deterministic,
        effective: effective_config(&matches),
    };
    match dispatch(&cli.command, &ctx) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: &Command, ctx: &Run) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, ctx),
        Command::Features(a) => features(a, ctx),
        Command::Train(a) => train_cmd(a, ctx),
        Command::Embed(a) => embed(a, ctx),
        Command::Enroll(a) => enroll(a, ctx),
        Command::Score(a) => score(a, ctx),
        Command::Eval(a) => eval(a, ctx),
        Command::Fuse(a) => fuse(a, ctx),
        Command::Tsne(a) => tsne(a, ctx),
    }
}

fn synth(a: &SynthArgs, ctx: &Run) -> Result<()> {
    let spec = SynthSpec {
        n_speakers: a.speakers,
        sessions: a.sessions,
        enroll_sessions: a.enroll_sessions,
        seed: a.seed,
        min_duration_s: a.min_duration,
        max_duration_s: a.max_duration,
        snr_db: a.snr_db,
        passphrase_len: a.passphrase_len,
        nontarget_ratio: a.nontarget_ratio,
        ..SynthSpec::default()
    };
    spec.validate().map_err(corpus_err)?;
    ctx.prepare_out(&a.out)?;
    let out = synth_corpus(&spec, &a.out, ctx.workers).map_err(corpus_err)?;
    println!(
        "wrote {} utterances and {} trials to {}",
        out.n_utterances,
        out.n_trials,
        a.out.display()
    );
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(path).map_err(corpus_err)
}

fn features(a: &FeaturesArgs, ctx: &Run) -> Result<()> {
    let rows = load_manifest(&a.manifest)?;
    let src = FeatureSource::audio(audio_root(&a.audio_root, &a.manifest));
    ctx.prepare_out(&a.out)?;
    let write_one = |e: &ManifestEntry| -> Result<()> {
        let feat = compute_features(e, &src).map_err(corpus_err)?;
        let path = a.out.join(format!("{}.vdft", e.utt_id));
        let mut w = create(&path)?;
        write_feature_cache(&mut w, &feat).with_context(|| format!("writing {}", path.display()))?;
        w.flush()?;
        Ok(())
    };
    let per = rows.len().div_ceil(ctx.workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = rows
            .chunks(per)
            .map(|chunk| s.spawn(move || chunk.iter().try_for_each(write_one)))
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("feature worker panicked"))))
    })?;
    println!("wrote {} feature caches to {}", rows.len(), a.out.display());
    Ok(())
}

fn train_err(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::Config(_)
        | TrainError::EmptyManifest
        | TrainError::ClassCountMismatch { .. }
        | TrainError::EmptyDataset
        | TrainError::ClassOutOfRange { .. }
        | TrainError::UnknownSpeaker(_)
        | TrainError::DigitOutOfRange { .. } => invalid(e),
        other => other.into(),
    }
}

fn train_cmd(a: &TrainArgs, ctx: &Run) -> Result<()> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr0: a.lr0,
        gamma: a.gamma,
        period: a.period,
        momentum: a.momentum,
        clip_norm: a.clip_norm,
        seed: a.seed,
    };
    cfg.validate().map_err(train_err)?;
    let rows = load_manifest(&a.manifest)?;
    let labels = LabelMap::build(&rows, a.mode).map_err(train_err)?;
    let model_cfg = ModelConfig::new(a.width, labels.n_classes()).map_err(invalid)?;
    let classes = rows
        .iter()
        .map(|e| labels.class_of(&e.speaker_id, e.digit))
        .collect::<Result<Vec<_>, _>>()
        .map_err(train_err)?;
    ctx.prepare_out(&a.out)?;

    let src = feature_source(audio_root(&a.audio_root, &a.manifest), &a.features);
    let data = rows
        .iter()
        .zip(classes)
        .map(|(e, c)| digitvox::corpus::load_features(e, &src).map(|f| (f, c)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(corpus_err)?;
    let fdigest = feature_digest(data.iter().map(|(f, _)| f));

    let mut model = LightCnn::new(model_cfg, a.seed);
    let log_path = a.out.join("train.log");
    let mut log = create(&log_path)?;
    let mut log_err = None;
    let history = train(&mut model, &data, &cfg, |s| {
        let mut s = s.clone();
        if ctx.strict {
            s.seconds = 0.0;
        }
        eprintln!("{}", s.log_line());
        if let Err(e) = writeln!(log, "{}", s.log_line()) {
            log_err.get_or_insert(e);
        }
    })
    .map_err(train_err)?;
    if let Some(e) = log_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    log.flush()?;

    let first = history.first().map_or(f64::NAN, |s| s.mean_loss);
    let last = history.last().map_or(f64::NAN, |s| s.mean_loss);
    let ckpt = Checkpoint {
        model,
        meta: TrainingMeta {
            seed: a.seed,
            epochs: a.epochs as u32,
            final_loss: last,
            label_digest: labels.digest(),
        },
    };
    let ckpt_path = a.out.join("model.ckpt");
    ckpt.save(&ckpt_path)
        .with_context(|| format!("saving {}", ckpt_path.display()))?;
    let mut summary = create(&a.out.join("summary.txt"))?;
    writeln!(summary, "mode = {}", a.mode)?;
    writeln!(summary, "classes = {}", labels.n_classes())?;
    writeln!(summary, "speakers = {}", labels.n_speakers())?;
    writeln!(summary, "samples = {}", data.len())?;
    writeln!(summary, "label_digest = {:016x}", labels.digest())?;
    writeln!(summary, "feature_digest = {fdigest:016x}")?;
    writeln!(summary, "initial_loss = {first:.6}")?;
    writeln!(summary, "final_loss = {last:.6}")?;
    summary.flush()?;
    println!(
        "trained {} classes on {} samples: loss {first:.4} -> {last:.4}; checkpoint {}",
        labels.n_classes(),
        data.len(),
        ckpt_path.display()
    );
    Ok(())
}

fn embed(a: &EmbedArgs, ctx: &Run) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let rows = load_manifest(&a.manifest)?;
    ctx.prepare_out(&a.out)?;
    let src = feature_source(audio_root(&a.audio_root, &a.manifest), &a.features);
    let table = extract_all_embeddings(&ckpt.model, &rows, &src, ctx.workers).map_err(train_err)?;
    let path = a.out.join("embeddings.vdem");
    let mut w = create(&path)?;
    write_embedding_cache(&mut w, &table)?;
    w.flush()?;
    println!(
        "wrote {} embeddings of dimension {} to {}",
        table.len(),
        ckpt.model.config().embedding_dim(),
        path.display()
    );
    Ok(())
}

fn load_embeddings(path: &Path) -> Result<BTreeMap<String, Vec<f32>>> {
    read_embedding_cache(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn enroll(a: &EnrollArgs, ctx: &Run) -> Result<()> {
    let emb = load_embeddings(&a.embeddings)?;
    let lists = parse_enrollment_lists(&a.enrollment).map_err(corpus_err)?;
    let models = enroll_all(&lists, &emb).map_err(verify_err)?;
    for m in models.values() {
        let short = m.short_digits();
        if !short.is_empty() {
            eprintln!(
                "warning: model {} has fewer than {} sessions for digits {short:?}",
                m.model_id,
                digitvox::verify::CANONICAL_SESSIONS
            );
        }
    }
    ctx.prepare_out(&a.out)?;
    let path = a.out.join("models.tsv");
    let mut w = create(&path)?;
    write_models(&mut w, &models)?;
    w.flush()?;
    println!("wrote {} enrollment models to {}", models.len(), path.display());
    Ok(())
}

fn score(a: &ScoreArgs, ctx: &Run) -> Result<()> {
    let models = read_models(open(&a.models)?).map_err(verify_err)?;
    let emb = load_embeddings(&a.embeddings)?;
    let trials = parse_trials(&a.trials).map_err(corpus_err)?;
    let scores = run_protocol_parallel(&trials, &models, &emb, ctx.workers).map_err(verify_err)?;
    ctx.prepare_out(&a.out)?;
    let path = a.out.join("scores.tsv");
    let mut w = create(&path)?;
    write_scores(&mut w, &scores)?;
    w.flush()?;
    println!("scored {} trials into {}", scores.len(), path.display());
    Ok(())
}

fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    read_scores(open(path)?)
        .map_err(verify_err)
        .with_context(|| format!("reading {}", path.display()))
}

fn labeled_set(records: &[ScoreRecord], origin: &Path) -> Result<ScoreSet> {
    let set = ScoreSet::from_records(records);
    if set.target.is_empty() {
        return Err(invalid(format!("{}: no target trials", origin.display())));
    }
    if set.nontarget.is_empty() {
        return Err(invalid(format!("{}: no nontarget trials", origin.display())));
    }
    Ok(set)
}

fn eval(a: &EvalArgs, ctx: &Run) -> Result<()> {
    let params = DcfParams {
        p_tar: a.p_tar,
        c_miss: a.c_miss,
        c_fa: a.c_fa,
    };
    params.validate().map_err(metrics_err)?;
    let records = load_scores(&a.scores)?;
    let set = labeled_set(&records, &a.scores)?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.scores
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "system".into())
    });
    let report = EvalReport::evaluate(&name, &set, &params).map_err(metrics_err)?;
    println!("{report}");
    println!();
    println!("{}", EvalReport::TSV_HEADER);
    println!("{}", report.tsv_row());
    if let Some(out) = &a.out {
        ctx.prepare_out(out)?;
        let mut w = create(&out.join("report.tsv"))?;
        writeln!(w, "{}", EvalReport::TSV_HEADER)?;
        writeln!(w, "{}", report.tsv_row())?;
        w.flush()?;
        let mut w = create(&out.join("det.tsv"))?;
        write_det(&mut w, &det_curve(&set).map_err(metrics_err)?)?;
        w.flush()?;
    }
    Ok(())
}

/// Loads score files that must describe the same trials in the same order.
fn aligned_scores(paths: &[PathBuf]) -> Result<(Vec<Vec<f64>>, Vec<ScoreRecord>)> {
    let mut systems = Vec::new();
    let mut reference: Option<Vec<ScoreRecord>> = None;
    for p in paths {
        let recs = load_scores(p)?;
        if let Some(r) = &reference {
            let same = r.len() == recs.len()
                && r.iter()
                    .zip(&recs)
                    .all(|(x, y)| x.model_id == y.model_id && x.trial_index == y.trial_index && x.label == y.label);
            if !same {
                return Err(invalid(format!(
                    "{} does not list the same trials as {}",
                    p.display(),
                    paths[0].display()
                )));
            }
        }
        systems.push(recs.iter().map(|r| r.score).collect());
        reference.get_or_insert(recs);
    }
    Ok((systems, reference.unwrap_or_default()))
}

fn fuse(a: &FuseArgs, ctx: &Run) -> Result<()> {
    if !a.apply_scores.is_empty() && a.apply_scores.len() != a.train_scores.len() {
        return Err(invalid(format!(
            "{} training score files but {} to apply",
            a.train_scores.len(),
            a.apply_scores.len()
        )));
    }
    let (train_sys, train_recs) = aligned_scores(&a.train_scores)?;
    if train_recs.iter().any(|r| r.label == TrialLabel::Unknown) {
        return Err(invalid("fusion training scores must all be labeled target or nontarget"));
    }
    let labels: Vec<bool> = train_recs.iter().map(|r| r.label == TrialLabel::Target).collect();
    let refs: Vec<&[f64]> = train_sys.iter().map(Vec::as_slice).collect();
    let model = fusion_train(&refs, &labels, a.prior).map_err(metrics_err)?;

    let (apply_sys, apply_recs) = if a.apply_scores.is_empty() {
        (train_sys, train_recs)
    } else {
        aligned_scores(&a.apply_scores)?
    };
    let refs: Vec<&[f64]> = apply_sys.iter().map(Vec::as_slice).collect();
    let fused = fusion_apply(&model, &refs).map_err(metrics_err)?;
    let fused_recs: Vec<ScoreRecord> = apply_recs
        .into_iter()
        .zip(fused)
        .map(|(r, s)| ScoreRecord { score: s, ..r })
        .collect();

    ctx.prepare_out(&a.out)?;
    let mut w = create(&a.out.join("fusion.json"))?;
    serde_json::to_writer_pretty(&mut w, &model)?;
    writeln!(w)?;
    w.flush()?;
    let mut w = create(&a.out.join("fused.tsv"))?;
    write_scores(&mut w, &fused_recs)?;
    w.flush()?;
    println!("weights {:?} offset {}", model.weights, model.offset);
    let set = ScoreSet::from_records(&fused_recs);
    if !set.target.is_empty() && !set.nontarget.is_empty() {
        let report = EvalReport::evaluate("fused", &set, &DcfParams::default()).map_err(metrics_err)?;
        println!("{report}");
    }
    Ok(())
}

fn tsne(a: &TsneArgs, ctx: &Run) -> Result<()> {
    if a.speakers == 0 {
        return Err(invalid("--speakers must be at least 1"));
    }
    let emb = load_embeddings(&a.embeddings)?;
    let rows = load_manifest(&a.manifest)?;
    let present: Vec<&ManifestEntry> = rows.iter().filter(|e| emb.contains_key(&e.utt_id)).collect();
    let speakers: BTreeSet<&str> = present
        .iter()
        .map(|e| e.speaker_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .take(a.speakers)
        .collect();
    let chosen: Vec<&ManifestEntry> = present
        .into_iter()
        .filter(|e| speakers.contains(e.speaker_id.as_str()))
        .collect();
    let x: Vec<Vec<f64>> = chosen
        .iter()
        .map(|e| emb[&e.utt_id].iter().map(|&v| v as f64).collect())
        .collect();
    let cfg = TsneConfig {
        perplexity: a.perplexity,
        iterations: a.iterations,
        seed: a.seed,
        ..TsneConfig::default()
    };
    let res = tsne_project(&x, &cfg).map_err(metrics_err)?;
    let points: Vec<TsnePoint> = chosen
        .iter()
        .zip(&res.coords)
        .map(|(e, c)| TsnePoint {
            utt_id: e.utt_id.clone(),
            x: c[0],
            y: c[1],
            speaker_id: e.speaker_id.clone(),
            digit: e.digit,
        })
        .collect();
    ctx.prepare_out(&a.out)?;
    let mut w = create(&a.out.join("tsne.tsv"))?;
    write_tsne_tsv(&mut w, &points)?;
    w.flush()?;
    fs::write(a.out.join("tsne.svg"), tsne_svg(&points))?;
    println!(
        "projected {} embeddings of {} speakers; final KL {:.4}",
        points.len(),
        speakers.len(),
        res.kl.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

//! `stridesense` command line: one subcommand per pipeline stage. Stages
//! talk only through files.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::audio::{probe_wav_file, read_wav, CORPUS_SAMPLE_RATE};
use crate::dataset::{
    load_manifest, load_runners, read_partition, read_segments, segment_session_with, split_partitions,
    write_partition, write_segments, DatasetError, Partition, Segment, RUNNERS_FILE,
};
use crate::evaluation::{emit_report, evaluate, load_examples, EvalError, EvalOptions};
use crate::features::{FeatureError, LogMelExtractor, MelConfig, StftConfig};
use crate::model::{build_cnn14, read_checkpoint, replace_head, save_checkpoint, ModelConfig, ModelError};
use crate::nn::SgdConfig;
use crate::synth::{generate_corpus, DemographicsPlan, SynthConfig, SynthError};
use crate::training::{train, TrainConfig, TrainError};

pub const THREADS_ENV: &str = "STRIDESENSE_THREADS";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const SEGMENTS_FILE: &str = "segments.csv";

#[derive(Parser, Debug)]
#[command(name = "stridesense", version, about = "Runner fatigue regression from body-worn audio")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labelled synthetic corpus.
    Synth(SynthArgs),
    /// Cut 30 s segments around answer events.
    Segment(SegmentArgs),
    /// Compute and cache log-Mel features for every segment.
    Featurize(FeaturizeArgs),
    /// Assign sessions to train/dev/test.
    Split(SplitArgs),
    /// Train the regressor.
    Train(TrainArgs),
    /// Score a checkpoint on one partition.
    Evaluate(EvaluateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Segment(_) => "segment",
            Command::Featurize(_) => "featurize",
            Command::Split(_) => "split",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Runners dealt evenly over age/sex cells; omit for the 48-runner plan.
    #[arg(long)]
    pub runners: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub sessions_min: usize,
    #[arg(long, default_value_t = 5)]
    pub sessions_max: usize,
    #[arg(long, default_value_t = 2700.0)]
    pub duration_s: f64,
    #[arg(long, default_value_t = 180.0)]
    pub interval_min_s: f64,
    #[arg(long, default_value_t = 300.0)]
    pub interval_max_s: f64,
    #[arg(long, default_value_t = 0.08)]
    pub breathing_gain: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct SegmentArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15.0)]
    pub half_window_s: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub segments: PathBuf,
    /// Receives one `.lmel` file per segment and an updated `segments.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub n_mels: usize,
    #[arg(long, default_value_t = 32.0)]
    pub window_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    pub hop_ms: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub segments: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train, dev and test shares; must sum to 1.
    #[arg(long, value_delimiter = ',', default_values_t = [0.56, 0.23, 0.21])]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Random,
    Checkpoint,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Featurized segment table.
    #[arg(long)]
    pub segments: PathBuf,
    #[arg(long)]
    pub partition: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Init::Random)]
    pub init: Init,
    /// Source checkpoint for `--init checkpoint`.
    #[arg(long, required_if_eq("init", "checkpoint"))]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 24)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0001)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub width_scale: f64,
    /// Centre crop of each segment in seconds; whole segments if omitted.
    #[arg(long)]
    pub crop_s: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub segments: PathBuf,
    #[arg(long)]
    pub partition: PathBuf,
    /// Corpus directory holding `runners.csv`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub part: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Clamp predictions to the 6..=20 scale before scoring.
    #[arg(long)]
    pub clip: bool,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

/// Failure class; decides the exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 2).
    Usage(String),
    /// Bad or missing data, I/O, numerics (exit 1).
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }

    fn parts(&self) -> (&'static str, &str) {
        match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Data(m) => ("data", m),
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidRatios(_) => CliError::Usage(e.to_string()),
            _ => data(e),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => data(e),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::InvalidConfig(_) | FeatureError::DegenerateFilter { .. } => CliError::Usage(e.to_string()),
            _ => data(e),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => data(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => data(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            _ => data(e),
        }
    }
}

/// Configuration snapshot written next to every stage's output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_s: u64,
    /// Filled in when the stage finishes.
    pub elapsed_s: Option<f64>,
}

struct ManifestWriter {
    path: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl ManifestWriter {
    /// Writes the manifest before the stage touches its outputs.
    fn begin<C: Serialize>(
        path: PathBuf,
        command: &str,
        config: &C,
        seeds: &[(&str, u64)],
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Result<Self, CliError> {
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config).map_err(data)?,
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            inputs,
            outputs,
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            elapsed_s: None,
        };
        let w = Self {
            path,
            manifest,
            started: Instant::now(),
        };
        w.write()?;
        Ok(w)
    }

    fn write(&self) -> Result<(), CliError> {
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| data(format!("{}: {e}", parent.display())))?;
        }
        let mut json = serde_json::to_string_pretty(&self.manifest).map_err(data)?;
        json.push('\n');
        fs::write(&self.path, json).map_err(|e| data(format!("{}: {e}", self.path.display())))
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.manifest.elapsed_s = Some(self.started.elapsed().as_secs_f64());
        self.write()
    }
}

/// `<file>.run.json` beside a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) => fs::create_dir_all(p).map_err(|e| data(format!("{}: {e}", p.display()))),
        None => Ok(()),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        sessions_per_runner: (a.sessions_min, a.sessions_max),
        session_duration_s: a.duration_s,
        question_interval_s: (a.interval_min_s, a.interval_max_s),
        breathing_gain: a.breathing_gain,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let plan = match a.runners {
        Some(0) => return Err(CliError::Usage("--runners must be at least 1".into())),
        Some(n) => DemographicsPlan::balanced(n),
        None => DemographicsPlan::table1(),
    };
    let m = ManifestWriter::begin(
        a.out.join(MANIFEST_FILE),
        "synth",
        &serde_json::json!({ "args": a, "synth": cfg, "plan": plan }),
        &[("seed", a.seed)],
        vec![],
        vec![a.out.clone()],
    )?;
    let summary = generate_corpus(&cfg, &plan, &a.out)?;
    log::info!(
        "wrote {} runners, {} sessions, {} events",
        summary.n_runners,
        summary.n_sessions,
        summary.n_events
    );
    m.finish()
}

fn cmd_segment(a: &SegmentArgs) -> Result<(), CliError> {
    if !(a.half_window_s > 0.0) {
        return Err(CliError::Usage("--half-window-s must be positive".into()));
    }
    let (sessions, _) = load_manifest(&a.corpus)?;
    let m = ManifestWriter::begin(
        sidecar(&a.out),
        "segment",
        a,
        &[],
        vec![a.corpus.clone()],
        vec![a.out.clone()],
    )?;
    let mut segments = Vec::new();
    for s in &sessions {
        let info = probe_wav_file(&s.audio_path).map_err(data)?;
        segments.extend(segment_session_with(s, info.duration_s(), a.half_window_s)?);
    }
    ensure_parent(&a.out)?;
    write_segments(&a.out, &segments)?;
    log::info!("{} segments from {} sessions", segments.len(), sessions.len());
    m.finish()
}

fn feature_configs(a: &FeaturizeArgs) -> Result<(StftConfig, MelConfig), CliError> {
    let sr = CORPUS_SAMPLE_RATE as f64;
    let window = (a.window_ms * sr / 1000.0).round();
    let hop = (a.hop_ms * sr / 1000.0).round();
    if !(window >= 2.0) || !(hop >= 1.0) {
        return Err(CliError::Usage("window and hop must cover at least 2 and 1 samples".into()));
    }
    let window = window as usize;
    let stft = StftConfig {
        window_length: window,
        hop_length: hop as usize,
        fft_size: window.next_power_of_two(),
        ..StftConfig::default()
    };
    let mel = MelConfig {
        n_mels: a.n_mels,
        ..MelConfig::default()
    };
    stft.validate()?;
    mel.validate()?;
    Ok((stft, mel))
}

fn cmd_featurize(a: &FeaturizeArgs) -> Result<(), CliError> {
    let (stft_cfg, mel_cfg) = feature_configs(a)?;
    let extractor = LogMelExtractor::new(stft_cfg, mel_cfg)?;
    let (sessions, _) = load_manifest(&a.corpus)?;
    let mut segments = read_segments(&a.segments)?;
    let m = ManifestWriter::begin(
        a.out_dir.join(MANIFEST_FILE),
        "featurize",
        &serde_json::json!({ "args": a, "stft": stft_cfg, "mel": mel_cfg }),
        &[],
        vec![a.corpus.clone(), a.segments.clone()],
        vec![a.out_dir.clone()],
    )?;

    let mut by_session: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        by_session.entry(s.session_id.as_str()).or_default().push(i);
    }
    let audio: BTreeMap<&str, &Path> = sessions
        .iter()
        .map(|s| (s.session_id.as_str(), s.audio_path.as_path()))
        .collect();
    let jobs: Vec<(&str, Vec<usize>)> = by_session.into_iter().collect();
    let sr = mel_cfg.sample_rate as f64;
    let names: Vec<Vec<(usize, String)>> = jobs
        .par_iter()
        .map(|(sid, idx)| {
            let path = audio
                .get(sid)
                .ok_or_else(|| data(format!("segment session `{sid}` is not in the corpus")))?;
            let clip = read_wav(path).map_err(data)?;
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx {
                let seg = &segments[i];
                let start = (seg.start_s * sr).round() as usize;
                let len = (seg.duration_s() * sr).round() as usize;
                let piece = clip
                    .slice(start, len)
                    .ok_or_else(|| data(format!("segment `{}` runs past its audio", seg.segment_id)))?;
                let feats = extractor.compute(&piece)?;
                let name = format!("{}.lmel", seg.segment_id);
                feats.write(&a.out_dir.join(&name))?;
                out.push((i, name));
            }
            Ok(out)
        })
        .collect::<Result<_, CliError>>()?;
    for (i, name) in names.into_iter().flatten() {
        segments[i].feature_path = Some(name);
    }
    write_segments(&a.out_dir.join(SEGMENTS_FILE), &segments)?;
    m.finish()
}

fn cmd_split(a: &SplitArgs) -> Result<(), CliError> {
    let ratios: [f64; 3] = a
        .ratios
        .as_slice()
        .try_into()
        .map_err(|_| CliError::Usage("--ratios takes exactly three values".into()))?;
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CliError::Usage(format!("--ratios {ratios:?} must be positive and sum to 1")));
    }
    let segments = read_segments(&a.segments)?;
    let m = ManifestWriter::begin(
        sidecar(&a.out),
        "split",
        a,
        &[("seed", a.seed)],
        vec![a.segments.clone()],
        vec![a.out.clone()],
    )?;
    let split = split_partitions(&segments, ratios, a.seed)?;
    ensure_parent(&a.out)?;
    write_partition(&a.out, &split)?;
    m.finish()
}

/// Directory that relative feature paths in a segment table resolve against.
fn segments_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn partition_examples(
    segments_path: &Path,
    partition_path: &Path,
    part: Partition,
    hop_seconds: f64,
) -> Result<Vec<crate::training::Example>, CliError> {
    let segments: Vec<Segment> = read_segments(segments_path)?;
    let split = read_partition(partition_path)?;
    let chosen = split.select(&segments, part);
    Ok(load_examples(&chosen, &segments_base(segments_path), hop_seconds)?)
}

fn default_hop_seconds() -> f64 {
    let s = StftConfig::default();
    s.hop_length as f64 / CORPUS_SAMPLE_RATE as f64
}

/// Frames in a `seconds`-long clip under the default STFT.
pub fn frames_for_seconds(seconds: f64) -> Option<usize> {
    StftConfig::default().n_frames((seconds * CORPUS_SAMPLE_RATE as f64).round() as usize)
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: SgdConfig {
            learning_rate: a.lr,
            momentum: a.momentum,
            weight_decay: a.weight_decay,
        },
        shuffle_seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let crop = match a.crop_s {
        Some(s) => Some(frames_for_seconds(s).ok_or_else(|| CliError::Usage(format!("--crop-s {s} is too short")))?),
        None => None,
    };
    let mut model = match a.init {
        Init::Random => {
            let mcfg = ModelConfig {
                crop_frames: crop,
                ..ModelConfig::with_width(a.width_scale)
            };
            build_cnn14(&mcfg, a.seed)?
        }
        Init::Checkpoint => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--init checkpoint needs --checkpoint".into()))?;
            let mut m = replace_head(&read_checkpoint(path)?, a.seed)?;
            if crop.is_some() {
                let mut c = m.config().clone();
                c.crop_frames = crop;
                c.validate()?;
                m = crate::model::Checkpoint::from_model(&m).to_model_with(&c)?;
            }
            m
        }
    };
    let hop = default_hop_seconds();
    let train_set = partition_examples(&a.segments, &a.partition, Partition::Train, hop)?;
    let dev_set = partition_examples(&a.segments, &a.partition, Partition::Dev, hop)?;

    let mut inputs = vec![a.segments.clone(), a.partition.clone()];
    inputs.extend(a.checkpoint.clone());
    let m = ManifestWriter::begin(
        a.out_dir.join(MANIFEST_FILE),
        "train",
        &serde_json::json!({ "args": a, "train": cfg, "model": model.config() }),
        &[("seed", a.seed)],
        inputs,
        [BEST_CHECKPOINT, LAST_CHECKPOINT, HISTORY_FILE]
            .iter()
            .map(|f| a.out_dir.join(f))
            .collect(),
    )?;
    let outcome = train(&mut model, &train_set, &dev_set, &cfg)?;
    outcome.history.write_csv(&a.out_dir.join(HISTORY_FILE))?;
    fs::write(a.out_dir.join(BEST_CHECKPOINT), outcome.best.to_bytes()).map_err(data)?;
    save_checkpoint(&outcome.last, &a.out_dir.join(LAST_CHECKPOINT))?;
    log::info!("best epoch {}", outcome.history.best_epoch);
    m.finish()
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let part: Partition = a.part.parse().map_err(CliError::Usage)?;
    let model = read_checkpoint(&a.checkpoint)?.to_model()?;
    let profiles = load_runners(&a.corpus.join(RUNNERS_FILE))?;
    let examples = partition_examples(&a.segments, &a.partition, part, default_hop_seconds())?;
    let m = ManifestWriter::begin(
        a.out_dir.join(MANIFEST_FILE),
        "evaluate",
        a,
        &[],
        vec![a.checkpoint.clone(), a.segments.clone(), a.partition.clone(), a.corpus.clone()],
        vec![a.out_dir.clone()],
    )?;
    let report = evaluate(
        &model,
        &examples,
        &profiles,
        EvalOptions {
            clip: a.clip,
            batch_size: a.batch_size,
        },
    )?;
    emit_report(&report, &a.out_dir)?;
    log::info!("{} segments, MAE {:.4}", report.pairs.len(), report.global_mae);
    m.finish()
}

/// Sizes the global worker pool from `STRIDESENSE_THREADS` when set.
fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    // a pool built earlier in this process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run_command(cmd: &Command) -> Result<(), CliError> {
    configure_threads()?;
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Featurize(a) => cmd_featurize(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn error_line(command: &str, err: &CliError) -> String {
    let (kind, message) = err.parts();
    serde_json::json!({ "error": { "kind": kind, "command": command, "message": message } }).to_string()
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code. Failures print one JSON line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            let command = args
                .get(1)
                .and_then(|a| a.to_str())
                .filter(|a| Cli::command().find_subcommand(a).is_some())
                .unwrap_or("");
            eprintln!("{}", error_line(command, &err));
            return err.exit_code();
        }
    };
    match run_command(&cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", error_line(cli.command.name(), &err));
            err.exit_code()
        }
    }
}

//! Command-line front end composing the liveness pipeline: corpus synthesis,
//! preprocessing, ranging, training, evaluation, detection, and the latency
//! benchmark.
//!
//! Exit codes: 0 success/accept, 1 reject, 2 usage error, 3 data error.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use maglive_core::dsp;
use maglive_core::eval;
use maglive_core::model::{MagLiveModel, DECISION_THRESHOLD};
use maglive_core::pipeline::{self, PreparedSegment, SegmentRecord};
use maglive_core::ranging::{range_gate, RangeGateOutcome, RangingConfig};
use maglive_core::synth::{gen_dataset, DatasetSpec};
use maglive_core::trace::{self, Label, RecordingPair};
use maglive_core::train::{train_pipeline, TrainConfig, TrainSample};
use maglive_core::vad::{detect_voice_segments, VadConfig};

const EXIT_ACCEPT: i32 = 0;
const EXIT_REJECT: i32 = 1;
const EXIT_DATA: i32 = 3;

#[derive(Parser)]
#[command(name = "maglive", version, about = "Magnetometer-based voice liveness detection pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus (traces, audio, manifest).
    Synth(SynthArgs),
    /// Preprocess a corpus into aligned segments and feature tensors.
    Preprocess(PreprocessArgs),
    /// Estimate the sound-source distance of a stereo recording.
    Range(RangeArgs),
    /// Two-stage training on preprocessed segments.
    Train(TrainArgs),
    /// Score segments with a checkpoint and write the evaluation report.
    Eval(EvalArgs),
    /// Full detection flow for one recording.
    Detect(DetectArgs),
    /// Latency benchmark for one-segment preprocessing + inference.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset spec JSON; defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only entries with this split tag (e.g. train, test).
    #[arg(long)]
    split: Option<String>,
    /// High-pass cutoff in Hz.
    #[arg(long, default_value_t = dsp::DEFAULT_CUTOFF_HZ)]
    cutoff: f64,
    /// Worker threads for batch preprocessing (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct RangeArgs {
    /// Stereo WAV recording.
    #[arg(long)]
    audio: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    mic_spacing: f64,
    #[arg(long, default_value_t = 340.0)]
    sound_speed: f64,
    /// Gate distance in meters.
    #[arg(long, default_value_t = 0.06)]
    threshold: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// segments.jsonl produced by `preprocess`.
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training config JSON (TrainConfig keys); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Write an intermediate checkpoint every N epochs (0 = only final).
    #[arg(long, default_value_t = 20)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DECISION_THRESHOLD)]
    threshold: f64,
    /// Also write a 2-D PCA projection of the features.
    #[arg(long)]
    pca: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pipeline config JSON (ranging/vad/cutoff keys); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mic_spacing: Option<f64>,
    #[arg(long)]
    range_threshold: Option<f64>,
    #[arg(long)]
    cutoff: Option<f64>,
}

/// Detection-time parameters loadable from a config file.
#[derive(Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct DetectConfig {
    ranging: Option<RangingConfig>,
    vad: Option<VadConfig>,
    cutoff_hz: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    trials: usize,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Range(args) => cmd_range(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(EXIT_DATA);
        }
    }
}

/// SHA-256 of a canonical JSON rendering, recorded in every run manifest so
/// identical configurations are recognizable.
fn config_hash<T: serde::Serialize>(value: &T) -> String {
    let canon = serde_json::to_string(value).expect("config serializes");
    format!("{:x}", Sha256::digest(canon.as_bytes()))
}

fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    inputs: &[(&str, String)],
    seed: Option<u64>,
    hash: String,
) -> Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "inputs": inputs.iter().map(|(k, v)| serde_json::json!({"key": k, "path": v})).collect::<Vec<_>>(),
        "seed": seed,
        "config_hash": hash,
    });
    let path = out_dir.join("run_manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    let mut spec: DatasetSpec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => DatasetSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.master_seed = seed;
    }
    let summary = gen_dataset(&spec, &args.out)?;
    write_run_manifest(
        &args.out,
        "synth",
        &[(
            "spec",
            args.spec.map(|p| p.display().to_string()).unwrap_or_default(),
        )],
        Some(spec.master_seed),
        config_hash(&spec),
    )?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(EXIT_ACCEPT)
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<i32> {
    if args.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.workers)
            .build_global()
            .ok();
    }
    let manifest = trace::load_manifest(&args.manifest)?;
    let vad = VadConfig::default();
    let prepared =
        pipeline::preprocess_manifest(&manifest, args.split.as_deref(), &vad, args.cutoff)?;

    let tensors_dir = args.out.join("tensors");
    std::fs::create_dir_all(&tensors_dir)
        .with_context(|| format!("creating {}", tensors_dir.display()))?;
    let seg_path = args.out.join("segments.jsonl");
    let mut seg_file = std::fs::File::create(&seg_path)
        .with_context(|| format!("creating {}", seg_path.display()))?;
    for (i, p) in prepared.iter().enumerate() {
        let rel = format!("tensors/{i:06}.bin");
        dsp::write_feature_dump(&args.out.join(&rel), &p.features)?;
        let record = SegmentRecord::new(p, rel);
        writeln!(seg_file, "{}", serde_json::to_string(&record)?)?;
    }
    write_run_manifest(
        &args.out,
        "preprocess",
        &[("manifest", args.manifest.display().to_string())],
        None,
        config_hash(&(&vad, args.cutoff, &args.split)),
    )?;
    println!(
        "{}",
        serde_json::json!({
            "segments": prepared.len(),
            "segments_manifest": seg_path.display().to_string(),
        })
    );
    Ok(EXIT_ACCEPT)
}

fn cmd_range(args: RangeArgs) -> Result<i32> {
    let audio = trace::load_audio(&args.audio)?;
    let cfg = RangingConfig {
        mic_spacing: args.mic_spacing,
        sound_speed: args.sound_speed,
        distance_threshold: args.threshold,
        ..RangingConfig::default()
    };
    let voices = detect_voice_segments(&audio, &VadConfig::default())?;
    let Some(loudest) = voices
        .iter()
        .max_by(|a, b| a.peak_energy.total_cmp(&b.peak_energy))
    else {
        bail!("no voiced segments in {}", args.audio.display());
    };
    let outcome = range_gate(&audio, loudest, &cfg)?;
    let passed = matches!(&outcome, RangeGateOutcome::Measured(e) if e.passed);
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "estimate": outcome,
            "config_hash": config_hash(&cfg),
        }))?
    );
    Ok(if passed { EXIT_ACCEPT } else { EXIT_REJECT })
}

/// Reads a segments manifest plus its feature dumps back into train samples.
fn load_segments(path: &Path) -> Result<(Vec<SegmentRecord>, Vec<TrainSample>)> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading segments manifest {}", path.display()))?;
    let mut records = Vec::new();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SegmentRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let features = dsp::load_feature_dump(&base.join(&record.tensor))?;
        samples.push(TrainSample {
            features,
            label: record.label,
        });
        records.push(record);
    }
    Ok((records, samples))
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.epochs_stage1 {
        cfg.epochs_stage1 = v;
    }
    if let Some(v) = args.epochs_stage2 {
        cfg.epochs_stage2 = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }

    let (_, samples) = load_segments(&args.segments)?;
    if samples.is_empty() {
        bail!("no segments in {}", args.segments.display());
    }
    std::fs::create_dir_all(&args.out)?;

    let mut model = MagLiveModel::init(cfg.seed);
    let ckpt_every = args.checkpoint_every;
    let out_dir = args.out.clone();
    let log = train_pipeline(&mut model, &samples, &cfg, |epoch, model| {
        if ckpt_every > 0 && epoch.epoch > 0 && epoch.epoch % ckpt_every == 0 {
            let path =
                out_dir.join(format!("ckpt_stage{}_epoch{:04}.ckpt", epoch.stage, epoch.epoch));
            let _ = model.save(&path);
        }
    })?;

    let ckpt_path = args.out.join("model.ckpt");
    model.save(&ckpt_path)?;

    let log_path = args.out.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path)?;
    for step in &log.steps {
        writeln!(log_file, "{}", serde_json::to_string(step)?)?;
    }
    for warning in &log.warnings {
        eprintln!("warning: {warning}");
    }
    write_run_manifest(
        &args.out,
        "train",
        &[("segments", args.segments.display().to_string())],
        Some(cfg.seed),
        config_hash(&cfg),
    )?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": ckpt_path.display().to_string(),
            "steps": log.steps.len(),
            "warnings": log.warnings.len(),
        })
    );
    Ok(EXIT_ACCEPT)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let (records, samples) = load_segments(&args.segments)?;
    if records.is_empty() {
        bail!("no segments in {}", args.segments.display());
    }
    let model = MagLiveModel::load(&args.checkpoint, 0)?;

    let prepared: Vec<PreparedSegment> = records
        .iter()
        .zip(&samples)
        .map(|(r, s)| PreparedSegment {
            segment: maglive_core::vad::AlignedSegment {
                mag_window: vec![0.0; dsp::SEGMENT_LEN],
                voice: maglive_core::vad::VoiceSegment {
                    start: r.voice_start,
                    end: r.voice_end,
                    peak_energy: 0.0,
                },
                window_start_index: r.window_start_index,
                label: r.label,
                user_id: r.user.clone(),
                device_id: r.device.clone(),
                content_id: r.content.clone(),
                command_id: r.command.clone(),
            },
            features: s.features.clone(),
        })
        .collect();
    let scored = pipeline::score_segments(&model, &prepared)?;
    let report = eval::evaluate(&scored, args.threshold)?;

    std::fs::create_dir_all(&args.out)?;
    let report_path = args.out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;

    let roc_path = args.out.join("roc.csv");
    let mut roc = String::from("threshold,tar,far\n");
    for p in &report.roc {
        roc.push_str(&format!("{},{},{}\n", p.threshold, p.tar, p.far));
    }
    std::fs::write(&roc_path, roc)?;

    if args.pca {
        let tensors: Vec<&dsp::FeatureTensor> = prepared.iter().map(|p| &p.features).collect();
        let feats = maglive_core::model::extract_features_batch(&model.extractor, &tensors)?;
        let (points, degenerate) = eval::pca_project(&feats, 0)?;
        let mut csv = String::from("x,y,label\n");
        for (p, s) in points.iter().zip(&scored) {
            csv.push_str(&format!("{},{},{}\n", p[0], p[1], s.label));
        }
        std::fs::write(args.out.join("pca.csv"), csv)?;
        if degenerate {
            eprintln!("warning: PCA input is rank-0; all points at origin");
        }
    }
    write_run_manifest(
        &args.out,
        "eval",
        &[
            ("segments", args.segments.display().to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
        ],
        None,
        config_hash(&args.threshold),
    )?;
    println!(
        "{}",
        serde_json::json!({
            "report": report_path.display().to_string(),
            "bac": report.at_threshold.bac,
            "eer": report.eer,
            "auc": report.auc,
        })
    );
    Ok(EXIT_ACCEPT)
}

fn cmd_detect(args: DetectArgs) -> Result<i32> {
    let file_cfg: DetectConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => DetectConfig::default(),
    };
    let mut ranging = file_cfg.ranging.unwrap_or_default();
    if let Some(v) = args.mic_spacing {
        ranging.mic_spacing = v;
    }
    if let Some(v) = args.range_threshold {
        ranging.distance_threshold = v;
    }
    let vad = file_cfg.vad.unwrap_or_default();
    let cutoff = args
        .cutoff
        .or(file_cfg.cutoff_hz)
        .unwrap_or(dsp::DEFAULT_CUTOFF_HZ);

    let trace = trace::load_trace(&args.trace)?;
    let audio = trace::load_audio(&args.audio)?;
    // Label is unknown at detection time; the pipeline never reads it.
    let pair = RecordingPair {
        trace,
        audio,
        label: Label::Human,
        user_id: "unknown".into(),
        device_id: "unknown".into(),
        content_id: "unknown".into(),
        command_id: "unknown".into(),
    };
    let model = MagLiveModel::load(&args.checkpoint, 0)?;
    let result = pipeline::run_detect(&pair, &model, &vad, &ranging, cutoff)?;
    let accept = matches!(result.verdict, pipeline::Verdict::Human);
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "result": result,
            "config_hash": config_hash(&(&ranging, &vad, cutoff)),
        }))?
    );
    Ok(if accept { EXIT_ACCEPT } else { EXIT_REJECT })
}

fn cmd_bench(args: BenchArgs) -> Result<i32> {
    let model = MagLiveModel::load(&args.checkpoint, 0)?;
    let stats = pipeline::run_benchmark(&model, args.trials)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(EXIT_ACCEPT)
}

//! Command-line front end: `synth`, `train`, `eval`, and `plot-scores`.
//!
//! Every command reads one optional TOML config file; explicit flags win
//! over file values, file values win over defaults. Exit codes: 0 success,
//! 1 usage error, 2 data/IO error, 3 numeric failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_manifest, save_manifest, FeatureSample};
use crate::encoder::encode_sample;
use crate::error::{Error, Result};
use crate::localize::{localize, TimeInterval};
use crate::metrics::evaluate_dataset;
use crate::mining::extract_segments;
use crate::scoring::predict_scores;
use crate::train::{MiningTraceRecord, TrainSession};

#[derive(Parser)]
#[command(
    name = "frameground",
    version,
    about = "Weakly-supervised temporal grounding: synthesize data, train, evaluate, and inspect score curves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grounding dataset (manifest + feature blobs)
    Synth(SynthArgs),
    /// Train a model on a dataset manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint (or injected predictions) against ground truth
    Eval(EvalArgs),
    /// Export per-frame score/weight curves for selected samples as CSV
    PlotScores(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML run config; the [synth] section seeds every value below
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for manifest.jsonl and blobs/ (required here or via
    /// [paths].out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the output directory if it already exists
    #[arg(long)]
    force: bool,
    /// Dataset seed; every sample derives its own stream from it (default 1)
    #[arg(long)]
    seed: Option<u64>,
    /// Number of samples to generate (default 200)
    #[arg(long)]
    num_samples: Option<usize>,
    /// Frames per video (default 64)
    #[arg(long)]
    n: Option<usize>,
    /// Tokens per query (default 8)
    #[arg(long)]
    m: Option<usize>,
    /// Video feature width (default 32)
    #[arg(long)]
    d_v: Option<usize>,
    /// Query feature width (default 32)
    #[arg(long)]
    d_q: Option<usize>,
    /// Minimum foreground segment length in frames (default 8)
    #[arg(long)]
    min_seg: Option<usize>,
    /// Maximum foreground segment length in frames (default 16)
    #[arg(long)]
    max_seg: Option<usize>,
    /// Noise standard deviation around the shared prototype (default 0.5)
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum Ablation {
    /// Score objective only: both mined-loss weights zero
    ScoreOnly,
    /// Drop the frame-scale loss, keep the segment-scale loss
    NoFrame,
    /// Drop the segment-scale loss, keep the frame-scale loss
    NoSegment,
    /// Keep the configured weights
    Full,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config; the [train] and [model] sections seed the values
    /// below
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest to train on (or [paths].dataset)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for train_log.jsonl and checkpoint.bin (or
    /// [paths].out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint; its saved configuration governs the run,
    /// so training flags cannot be combined with it
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss-weight preset matching the ablation grid (default: full)
    #[arg(long, value_enum)]
    ablate: Option<Ablation>,
    /// Also write mining_trace.jsonl: per sample and epoch, the bounds and
    /// the mined positive/negative frame indices
    #[arg(long)]
    mining_trace: bool,
    /// Total epochs (default 200)
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per optimizer step (default 16)
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate, decayed linearly to zero (default 0.01)
    #[arg(long)]
    lr0: Option<f64>,
    /// Frame-scale loss weight (default 10)
    #[arg(long)]
    lambda_fra: Option<f64>,
    /// Segment-scale loss weight (default 5)
    #[arg(long)]
    lambda_seg: Option<f64>,
    /// Epochs before mining starts; also the bound-schedule anchor
    /// (default 50)
    #[arg(long)]
    warmup: Option<usize>,
    /// Shuffle/optimizer seed (default 7)
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint every this many epochs in addition to the final save
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Latent width D (default 32)
    #[arg(long)]
    d: Option<usize>,
    /// Conv blocks in the sequence encoder (default 4)
    #[arg(long)]
    num_conv_layers: Option<usize>,
    /// Temporal kernel width, odd (default 3)
    #[arg(long)]
    conv_kernel: Option<usize>,
    /// Attention heads, must divide D (default 4)
    #[arg(long)]
    num_heads: Option<usize>,
    /// Interaction FFN hidden width (default: D)
    #[arg(long)]
    ffn_hidden: Option<usize>,
    /// Parameter initialization seed (default 17)
    #[arg(long)]
    param_init_seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// TOML run config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate (or [paths].checkpoint); not needed with
    /// --predictions
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset manifest with ground-truth intervals (or [paths].dataset)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Optional output directory for report.json, table.txt, and
    /// predictions.jsonl
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the model: evaluate ranked intervals from this JSONL file, one
    /// {sample_id, intervals} record per line
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Comma-separated IoU thresholds (default 0.3,0.5,0.7)
    #[arg(long)]
    iou_grid: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    /// TOML run config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to score with (or [paths].checkpoint)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset manifest (or [paths].dataset)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated sample ids to export
    #[arg(long, required = true)]
    samples: String,
    /// Output directory, one <sample_id>.csv per requested sample (or
    /// [paths].out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::PlotScores(args) => cmd_plot_scores(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn require_path(value: Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| {
        Error::Config(format!("no {what} given; pass {flag} or set it in the config file"))
    })
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    let spec = &mut config.synth;
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.num_samples {
        spec.num_samples = v;
    }
    if let Some(v) = args.n {
        spec.n = v;
    }
    if let Some(v) = args.m {
        spec.m = v;
    }
    if let Some(v) = args.d_v {
        spec.d_v = v;
    }
    if let Some(v) = args.d_q {
        spec.d_q = v;
    }
    if let Some(v) = args.min_seg {
        spec.min_seg_frames = v;
    }
    if let Some(v) = args.max_seg {
        spec.max_seg_frames = v;
    }
    if let Some(v) = args.noise_std {
        spec.noise_std = v;
    }
    spec.validate()?;

    let out = require_path(args.out.or(config.paths.out_dir), "output directory", "--out")?;
    if out.exists() {
        if !args.force {
            return Err(Error::Data(format!(
                "output directory {} already exists; pass --force to replace it",
                out.display()
            )));
        }
        std::fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let samples = generate_synthetic(&config.synth)?;
    let manifest = save_manifest(&samples, &out)?;
    println!(
        "wrote {} samples (n={}, m={}, d_v={}, d_q={}) to {}",
        samples.len(),
        config.synth.n,
        config.synth.m,
        config.synth.d_v,
        config.synth.d_q,
        manifest.display()
    );
    Ok(())
}

fn append_jsonl<T: Serialize>(file: &mut std::fs::File, record: &T, path: &Path) -> Result<()> {
    let line = serde_json::to_string(record)
        .map_err(|e| Error::Data(format!("record serialization failed: {e}")))?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(args.config.as_deref())?;

    if args.resume.is_some() {
        let conflicting: &[(&str, bool)] = &[
            ("--ablate", args.ablate.is_some()),
            ("--epochs", args.epochs.is_some()),
            ("--batch-size", args.batch_size.is_some()),
            ("--lr0", args.lr0.is_some()),
            ("--lambda-fra", args.lambda_fra.is_some()),
            ("--lambda-seg", args.lambda_seg.is_some()),
            ("--warmup", args.warmup.is_some()),
            ("--seed", args.seed.is_some()),
            ("--checkpoint-every", args.checkpoint_every.is_some()),
            ("--d", args.d.is_some()),
            ("--num-conv-layers", args.num_conv_layers.is_some()),
            ("--conv-kernel", args.conv_kernel.is_some()),
            ("--num-heads", args.num_heads.is_some()),
            ("--ffn-hidden", args.ffn_hidden.is_some()),
            ("--param-init-seed", args.param_init_seed.is_some()),
        ];
        if let Some((flag, _)) = conflicting.iter().find(|(_, given)| *given) {
            return Err(Error::Config(format!(
                "{flag} cannot be combined with --resume; the checkpoint's saved configuration governs a resumed run"
            )));
        }
    }

    let train = &mut config.train;
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = args.lr0 {
        train.lr0 = v;
    }
    if let Some(v) = args.lambda_fra {
        train.lambda_fra = v;
    }
    if let Some(v) = args.lambda_seg {
        train.lambda_seg = v;
    }
    if let Some(v) = args.warmup {
        train.warmup_epochs = v;
        train.scheduler.warmup_epochs = v;
    }
    if let Some(v) = args.seed {
        train.seed = v;
    }
    if let Some(v) = args.checkpoint_every {
        train.checkpoint_every = Some(v);
    }
    match args.ablate.unwrap_or(Ablation::Full) {
        Ablation::ScoreOnly => {
            train.lambda_fra = 0.0;
            train.lambda_seg = 0.0;
        }
        Ablation::NoFrame => train.lambda_fra = 0.0,
        Ablation::NoSegment => train.lambda_seg = 0.0,
        Ablation::Full => {}
    }

    let model = &mut config.model;
    if let Some(v) = args.d {
        model.d = v;
    }
    if let Some(v) = args.num_conv_layers {
        model.num_conv_layers = v;
    }
    if let Some(v) = args.conv_kernel {
        model.conv_kernel = v;
    }
    if let Some(v) = args.num_heads {
        model.num_heads = v;
    }
    if let Some(v) = args.ffn_hidden {
        model.ffn_hidden = Some(v);
    }
    if let Some(v) = args.param_init_seed {
        model.param_init_seed = v;
    }

    let dataset = require_path(args.dataset.or(config.paths.dataset.clone()), "dataset manifest", "--dataset")?;
    let out = require_path(args.out.or(config.paths.out_dir.clone()), "output directory", "--out")?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let samples = load_manifest(&dataset)?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Data(format!("manifest {} lists no samples", dataset.display())))?;

    let resuming = args.resume.is_some();
    let mut session = match &args.resume {
        Some(ckpt) => TrainSession::load_checkpoint(ckpt)?,
        None => {
            config.train.validate()?;
            TrainSession::new(
                config.model.resolve(),
                first.video_features.ncols(),
                first.query_features.ncols(),
                config.train.clone(),
            )?
        }
    };

    let log_path = out.join("train_log.jsonl");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .truncate(!resuming)
        .write(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let trace_path = out.join("mining_trace.jsonl");
    let mut trace_file = if args.mining_trace {
        Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(resuming)
                .truncate(!resuming)
                .write(true)
                .open(&trace_path)
                .map_err(|e| Error::io(&trace_path, e))?,
        )
    } else {
        None
    };

    let checkpoint_path = out.join("checkpoint.bin");
    let cadence = session.config().checkpoint_every;
    let total_epochs = session.config().epochs;
    let mut last_total = f64::NAN;
    while !session.is_complete() {
        let mut trace: Vec<MiningTraceRecord> = Vec::new();
        let record = session.run_epoch(
            &samples,
            trace_file.is_some().then_some(&mut trace),
        )?;
        last_total = record.total;
        append_jsonl(&mut log_file, &record, &log_path)?;
        if let Some(f) = &mut trace_file {
            for r in &trace {
                append_jsonl(f, r, &trace_path)?;
            }
        }
        if let Some(every) = cadence {
            if every > 0 && (record.epoch + 1) % every == 0 {
                let path = out.join(format!("checkpoint_epoch{:04}.bin", record.epoch + 1));
                session.save_checkpoint(&path)?;
            }
        }
    }
    session.save_checkpoint(&checkpoint_path)?;
    println!(
        "trained to epoch {total_epochs}, final mean total loss {last_total:.6}; checkpoint at {}",
        checkpoint_path.display()
    );
    Ok(())
}

/// One line of the prediction dump: ranked intervals for one sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub intervals: Vec<TimeInterval>,
}

fn parse_iou_grid(text: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad IoU threshold {t:?} in --iou-grid")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() || values.iter().any(|v| !(0.0..1.0).contains(v)) {
        return Err(Error::Config(format!(
            "--iou-grid thresholds must lie in [0, 1), got {text:?}"
        )));
    }
    Ok(values)
}

fn ground_truths(samples: &[FeatureSample]) -> Result<Vec<(String, TimeInterval)>> {
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| s.ground_truth.is_none())
        .map(|s| s.sample_id.as_str())
        .take(5)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "samples without ground truth: {}",
            missing.join(", ")
        )));
    }
    Ok(samples
        .iter()
        .map(|s| (s.sample_id.clone(), s.ground_truth.clone().unwrap()))
        .collect())
}

/// Score a sample with the model and rank its intervals.
fn predict_sample(model: &crate::model::Model, sample: &FeatureSample) -> Result<Vec<TimeInterval>> {
    let (_, interaction) =
        encode_sample(model, &sample.video_features, &sample.query_features)?;
    let (scores, _) = predict_scores(model, &interaction.features)?;
    localize(&scores.s, sample.frame_duration)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let config = RunConfig::load(args.config.as_deref())?;
    let dataset = require_path(args.dataset.or(config.paths.dataset.clone()), "dataset manifest", "--dataset")?;
    let samples = load_manifest(&dataset)?;
    let gts = ground_truths(&samples)?;

    let m_values = match &args.iou_grid {
        Some(text) => parse_iou_grid(text)?,
        None => vec![0.3, 0.5, 0.7],
    };
    let n_values = [1usize, 5];

    let predictions: Vec<(String, Vec<TimeInterval>)> = match &args.predictions {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: PredictionRecord =
                    serde_json::from_str(line).map_err(|e| Error::Parse {
                        path: path.clone(),
                        message: format!("line {}: {e}", i + 1),
                    })?;
                out.push((record.sample_id, record.intervals));
            }
            out
        }
        None => {
            let ckpt = require_path(
                args.checkpoint.or(config.paths.checkpoint.clone()),
                "checkpoint",
                "--checkpoint",
            )?;
            let session = TrainSession::load_checkpoint(&ckpt)?;
            samples
                .iter()
                .map(|s| Ok((s.sample_id.clone(), predict_sample(&session.model, s)?)))
                .collect::<Result<_>>()?
        }
    };

    let report = evaluate_dataset(&predictions, &gts, &n_values, &m_values)?;
    let table = report.to_table_string();
    print!("{table}");

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let report_path = out.join("report.json");
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Data(format!("report serialization failed: {e}")))?;
        std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
        let table_path = out.join("table.txt");
        std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
        let preds_path = out.join("predictions.jsonl");
        let mut f = std::fs::File::create(&preds_path).map_err(|e| Error::io(&preds_path, e))?;
        for (sample_id, intervals) in &predictions {
            let record = PredictionRecord {
                sample_id: sample_id.clone(),
                intervals: intervals.clone(),
            };
            append_jsonl(&mut f, &record, &preds_path)?;
        }
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_plot_scores(args: PlotArgs) -> Result<()> {
    let config = RunConfig::load(args.config.as_deref())?;
    let dataset = require_path(args.dataset.or(config.paths.dataset.clone()), "dataset manifest", "--dataset")?;
    let ckpt = require_path(
        args.checkpoint.or(config.paths.checkpoint.clone()),
        "checkpoint",
        "--checkpoint",
    )?;
    let out = require_path(args.out.or(config.paths.out_dir.clone()), "output directory", "--out")?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let samples = load_manifest(&dataset)?;
    let session = TrainSession::load_checkpoint(&ckpt)?;

    let mut written = 0usize;
    for id in args.samples.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let sample = samples
            .iter()
            .find(|s| s.sample_id == id)
            .ok_or_else(|| Error::Data(format!("unknown sample id {id:?}")))?;
        let (_, interaction) =
            encode_sample(&session.model, &sample.video_features, &sample.query_features)?;
        let (scores, weights) = predict_scores(&session.model, &interaction.features)?;
        let b_u = scores.s.iter().sum::<f64>() / scores.s.len() as f64;

        // Top segment under the same rule the localizer ranks by; the
        // fallback marks the first maximal-score frame.
        let segs = extract_segments(&scores.s, b_u);
        let mut in_top: Vec<bool> = segs.positive_mask.clone();
        if segs.segments.is_empty() {
            let mut best = 0usize;
            for (i, &s) in scores.s.iter().enumerate() {
                if s > scores.s[best] {
                    best = i;
                }
            }
            in_top[best] = true;
        }

        let dt = sample.frame_duration;
        let path = out.join(format!("{id}.csv"));
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "frame_index,score,weight,b_u,in_top_segment,in_ground_truth")
            .map_err(|e| Error::io(&path, e))?;
        for i in 0..scores.s.len() {
            let mid = (i as f64 + 0.5) * dt;
            let in_gt = sample
                .ground_truth
                .as_ref()
                .map(|gt| mid >= gt.start && mid < gt.end)
                .unwrap_or(false);
            writeln!(
                f,
                "{i},{:.17},{:.17},{b_u:.17},{},{}",
                scores.s[i],
                weights.w[i],
                in_top[i] as u8,
                in_gt as u8
            )
            .map_err(|e| Error::io(&path, e))?;
        }
        written += 1;
    }
    println!("wrote {written} score-curve files to {}", out.display());
    Ok(())
}

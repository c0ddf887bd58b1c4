mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use emg_intent::baseline::{train_baseline, BaselineModel};
use emg_intent::masking::MaskConfig;
use emg_intent::metrics::{evaluate, MetricsConfig, MetricsReport};
use emg_intent::model::{train, Checkpoint, Hyper, ModelParams, TrainConfig, TrainItem};
use emg_intent::report::{summarize, to_markdown};
use emg_intent::signal::{load_recording, preprocess, Manifest, Recording, WindowSpec};
use emg_intent::stream::{load_predictions, run_stream, save_predictions, StreamConfig};
use emg_intent::synth::{parse_schedule, write_dataset, SynthConfig};

use config::{write_echo, ConfigFile};

/// Per-timestep EMG intent segmentation: synthetic data, training,
/// streaming inference and evaluation.
///
/// Set EMG_INTENT_LOG (error, warn, info, debug, trace) to change verbosity.
#[derive(Parser)]
#[command(name = "emg-intent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (recordings plus manifest.json)
    Synth(SynthArgs),
    /// Train the transformer on a manifest
    Train(TrainArgs),
    /// Fit the feature + LDA baseline on a manifest
    TrainBaseline(TrainBaselineArgs),
    /// Replay a recording through a checkpoint and write per-timestep labels
    Stream(StreamArgs),
    /// Score a prediction file against a labeled recording
    Eval(EvalArgs),
    /// Stream a recording through the baseline and score it
    EvalBaseline(EvalBaselineArgs),
    /// Aggregate per-recording reports into mean ± SD tables
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    #[arg(long, default_value_t = 1)]
    sessions: usize,
    /// Gesture letters, one per segment (first letter of each class name)
    #[arg(long, default_value = "ROCORORCR")]
    schedule: String,
    #[arg(long, default_value_t = 5.0)]
    hold_seconds: f64,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Cross-fade length in timesteps
    #[arg(long, default_value_t = 40)]
    ramp: usize,
    /// Noise SD as a fraction of the largest template value
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// JSON file whose "synth" section overrides the flags
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SubjectFilter {
    /// Comma-separated subject ids to use (default: all)
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<String>>,
    /// Comma-separated subject ids to leave out
    #[arg(long, value_delimiter = ',')]
    exclude: Option<Vec<String>>,
}

impl SubjectFilter {
    fn keep(&self, subject: &str) -> bool {
        self.subjects.as_ref().map_or(true, |s| s.iter().any(|x| x == subject))
            && !self.exclude.as_ref().is_some_and(|s| s.iter().any(|x| x == subject))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Continue training from this checkpoint
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    filter: SubjectFilter,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 600)]
    window: usize,
    #[arg(long, default_value_t = 30)]
    stride: usize,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0.15)]
    dropout: f64,
    /// JSON file whose "hyper", "train" and "mask" sections override the flags
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainBaselineArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    filter: SubjectFilter,
    #[arg(long, default_value_t = 600)]
    window: usize,
    #[arg(long, default_value_t = 30)]
    stride: usize,
    #[arg(long, default_value_t = 3)]
    median_window: usize,
}

#[derive(Args)]
struct StreamArgs {
    /// Transformer checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Recording CSV
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 50)]
    lookahead: usize,
    #[arg(long, default_value_t = 20)]
    hold: usize,
    /// Timesteps between the ends of participating windows
    #[arg(long, default_value_t = 10)]
    stride: usize,
    /// Prediction CSV
    #[arg(long)]
    out: PathBuf,
    /// Also write the aggregated logits
    #[arg(long)]
    logits: bool,
    /// JSON file whose "stream" section overrides the flags
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TruthArgs {
    /// Manifest listing the recording (for subject/session ids and schema)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Subject id for the report when no manifest entry matches
    #[arg(long)]
    subject: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Labeled recording CSV
    #[arg(long)]
    truth: PathBuf,
    /// Reaction buffer half-width in timesteps
    #[arg(long, default_value_t = 100)]
    buffer: usize,
    /// Report JSON path; a text table is written beside it
    #[arg(long)]
    report: PathBuf,
    /// Model name recorded in the report
    #[arg(long, default_value = "transformer")]
    source: String,
    #[command(flatten)]
    truth_args: TruthArgs,
}

#[derive(Args)]
struct EvalBaselineArgs {
    /// Baseline model JSON
    #[arg(long)]
    model: PathBuf,
    /// Labeled recording CSV
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 100)]
    buffer: usize,
    #[arg(long)]
    report: PathBuf,
    /// Also write the baseline's prediction file here
    #[arg(long)]
    pred_out: Option<PathBuf>,
    #[command(flatten)]
    truth_args: TruthArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON files produced by eval / eval-baseline
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Markdown table path; the summary JSON is written beside it
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("EMG_INTENT_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::TrainBaseline(a) => train_baseline_cmd(a),
        Command::Stream(a) => stream(a),
        Command::Eval(a) => eval(a),
        Command::EvalBaseline(a) => eval_baseline(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let defaults = SynthConfig::default();
    let cfg = file.apply(
        "synth",
        SynthConfig {
            subjects: a.subjects,
            sessions: a.sessions,
            channels: a.channels,
            schedule: parse_schedule(&a.schedule, &defaults.class_names, a.hold_seconds)?,
            ramp: a.ramp,
            noise_scale: a.noise,
            seed: a.seed,
            ..defaults
        },
    )?;
    let manifest = write_dataset(&cfg, &a.out)?;
    write_echo(&manifest, "synth", json!({ "synth": cfg }))?;
    log::info!(
        "wrote {} recordings to {}",
        cfg.subjects * cfg.sessions,
        a.out.display()
    );
    Ok(())
}

fn load_items(manifest_path: &Path, filter: &SubjectFilter, median_window: usize) -> Result<(Manifest, Vec<TrainItem>)> {
    let manifest = Manifest::load(manifest_path).with_context(|| format!("loading {}", manifest_path.display()))?;
    let mut items = Vec::new();
    for (entry, rec) in manifest.load_all(manifest_path)? {
        if filter.keep(&entry.subject_id) {
            items.push(TrainItem {
                recording: preprocess(&rec, median_window)?,
                labeled: entry.labeled,
            });
        }
    }
    if items.is_empty() {
        bail!("no recordings left after subject filtering");
    }
    Ok((manifest, items))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    let train_cfg = file.apply(
        "train",
        TrainConfig {
            batch_size: a.batch_size,
            epochs: a.epochs,
            learning_rate: a.lr,
            seed: a.seed,
            window: WindowSpec::new(a.window, a.stride)?,
            ..Default::default()
        },
    )?;
    let mask_cfg = file.apply(
        "mask",
        MaskConfig {
            rng_seed: a.seed,
            ..Default::default()
        },
    )?;
    let (manifest, items) = load_items(&a.manifest, &a.filter, train_cfg.median_window)?;
    let class_names = manifest.class_names()?;
    let init = a
        .init
        .as_deref()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let hyper = match &init {
        Some(ck) => {
            if ck.class_names != class_names {
                bail!("initial checkpoint classes {:?} differ from {:?}", ck.class_names, class_names);
            }
            ck.params.hyper
        }
        None => file.apply(
            "hyper",
            Hyper {
                d_model: a.d_model,
                heads: a.heads,
                layers: a.layers,
                ff_dim: 4 * a.d_model,
                dropout: a.dropout,
                window_len: train_cfg.window.window_len,
                channels: manifest.channels,
                classes: class_names.len(),
                ..Default::default()
            },
        )?,
    };
    let outcome = train(&items, hyper, &mask_cfg, &train_cfg, init.map(|c| c.params))?;
    let ck = Checkpoint {
        params: outcome.params,
        class_names,
        sample_rate_hz: manifest.sample_rate_hz,
        train_config: Some(train_cfg.clone()),
        mask_config: Some(mask_cfg.clone()),
        train_log: Some(outcome.log.clone()),
    };
    ck.save(&a.out)?;
    let mut log_path = a.out.as_os_str().to_owned();
    log_path.push(".log.json");
    fs::write(&log_path, serde_json::to_string_pretty(&outcome.log)? + "\n")?;
    write_echo(
        &a.out,
        "train",
        json!({
            "manifest": a.manifest,
            "init": a.init,
            "hyper": hyper,
            "train": train_cfg,
            "mask": mask_cfg,
            "subjects": {
                "train": outcome.log.train_subjects,
                "validation": outcome.log.validation_subjects,
            },
        }),
    )?;
    log::info!("best epoch {} saved to {}", outcome.log.best_epoch, a.out.display());
    Ok(())
}

fn train_baseline_cmd(a: TrainBaselineArgs) -> Result<()> {
    let (_, items) = load_items(&a.manifest, &a.filter, a.median_window)?;
    let recs: Vec<Recording> = items.into_iter().filter(|i| i.labeled).map(|i| i.recording).collect();
    let window = WindowSpec::new(a.window, a.stride)?;
    let model = train_baseline(&recs, window, a.median_window)?;
    model.save(&a.out)?;
    let subjects: std::collections::BTreeSet<&str> = recs.iter().map(|r| r.subject_id.as_str()).collect();
    write_echo(
        &a.out,
        "train-baseline",
        json!({
            "manifest": a.manifest,
            "window": window,
            "median_window": a.median_window,
            "shrinkage": model.lda.shrinkage,
            "subjects": subjects,
        }),
    )?;
    Ok(())
}

/// Counts the `ch*` columns of a recording CSV header.
fn channel_count(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let header = text.lines().next().unwrap_or_default();
    Ok(header.split(',').filter(|c| c.starts_with("ch")).count())
}

/// Loads a recording and fills in subject/session ids from a manifest
/// entry pointing at the same file, or from `--subject`.
fn load_truth(path: &Path, args: &TruthArgs, class_names: &[String], sample_rate_hz: u32) -> Result<Recording> {
    let (schema, entry) = match &args.manifest {
        Some(mp) => {
            let m = Manifest::load(mp)?;
            let target = fs::canonicalize(path)?;
            let entry = m
                .files
                .iter()
                .find(|e| fs::canonicalize(m.resolve(mp, e)).is_ok_and(|p| p == target))
                .cloned();
            (m, entry)
        }
        None => (
            Manifest::from_class_names(sample_rate_hz, channel_count(path)?, class_names),
            None,
        ),
    };
    let mut rec = load_recording(path, &schema).with_context(|| format!("loading {}", path.display()))?;
    if rec.class_names != class_names {
        bail!("recording classes {:?} differ from the model's {:?}", rec.class_names, class_names);
    }
    if let Some(e) = entry {
        rec.subject_id = e.subject_id;
        rec.session_id = e.session_id;
    }
    if let Some(s) = &args.subject {
        rec.subject_id = s.clone();
    }
    Ok(rec)
}

fn stream(a: StreamArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let file = ConfigFile::load(a.config.as_deref())?;
    let cfg = file.apply(
        "stream",
        StreamConfig {
            window_len: ck.params.hyper.window_len,
            lookahead: a.lookahead,
            hold: a.hold,
            inference_stride: a.stride,
            sample_rate_hz: ck.sample_rate_hz,
            ..Default::default()
        },
    )?;
    let schema = Manifest::from_class_names(ck.sample_rate_hz, ck.params.hyper.channels, &ck.class_names);
    let raw = load_recording(&a.input, &schema).with_context(|| format!("loading {}", a.input.display()))?;
    let median_window = ck.train_config.as_ref().map_or(3, |c| c.median_window);
    let rec = preprocess(&raw, median_window)?;
    let pred = run_stream(&rec, &ck.params as &ModelParams, &cfg, a.logits)?;
    save_predictions(&pred, &a.out)?;
    let cost: Vec<f64> = pred.decisions.iter().map(|d| d.elapsed.as_secs_f64() * 1e3).collect();
    let worst = cost.iter().copied().fold(0.0, f64::max);
    log::info!(
        "{} decisions at {:.1} Hz, slowest {worst:.1} ms of compute",
        pred.decisions.len(),
        cfg.update_rate_hz()
    );
    write_echo(
        &a.out,
        "stream",
        json!({
            "model": a.model,
            "input": a.input,
            "stream": cfg,
            "median_window": median_window,
            "logits": a.logits,
        }),
    )?;
    Ok(())
}

fn emit_report(report: &MetricsReport, path: &Path) -> Result<()> {
    report.save(path)?;
    let table = report.to_table();
    fs::write(path.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = load_predictions(&a.pred).with_context(|| format!("loading {}", a.pred.display()))?;
    let truth = load_truth(&a.truth, &a.truth_args, &pred.class_names, pred.config.sample_rate_hz)?;
    let cfg = MetricsConfig {
        buffer_half_width: a.buffer,
    };
    let report = evaluate(&pred, &truth, &cfg, &a.source)?;
    emit_report(&report, &a.report)?;
    write_echo(
        &a.report,
        "eval",
        json!({ "pred": a.pred, "truth": a.truth, "metrics": cfg, "source": a.source }),
    )
}

fn eval_baseline(a: EvalBaselineArgs) -> Result<()> {
    let model = BaselineModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let raw = load_truth(&a.input, &a.truth_args, &model.class_names, model.sample_rate_hz)?;
    let rec = preprocess(&raw, model.median_window)?;
    let pred = model.predict_stream(&rec, false)?;
    if let Some(p) = &a.pred_out {
        save_predictions(&pred, p)?;
    }
    let cfg = MetricsConfig {
        buffer_half_width: a.buffer,
    };
    let report = evaluate(&pred, &rec, &cfg, "lda")?;
    emit_report(&report, &a.report)?;
    write_echo(
        &a.report,
        "eval-baseline",
        json!({ "model": a.model, "input": a.input, "metrics": cfg, "stream": model.stream_config() }),
    )
}

fn report(a: ReportArgs) -> Result<()> {
    let reports = a
        .inputs
        .iter()
        .map(|p| MetricsReport::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let groups = summarize(&reports);
    let table = to_markdown(&groups);
    fs::write(&a.out, &table)?;
    fs::write(a.out.with_extension("json"), serde_json::to_string_pretty(&groups)? + "\n")?;
    print!("{table}");
    write_echo(&a.out, "report", json!({ "inputs": a.inputs }))
}

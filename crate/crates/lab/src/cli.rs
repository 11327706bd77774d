//! Command-line front end. Every run writes into its own output directory
//! and leaves a `manifest.json` there.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use ssldetr_core::schedule::ScheduleMode;
use ssldetr_core::ssl::SslTaskKind;

use crate::checkpoint::load_checkpoint;
use crate::config::{DatasetSource, LabConfig, Overrides, SslConfig, TrainMode};
use crate::data::coco::{write_json, CocoResult};
use crate::data::{export_coco, generate_synthetic, load_image_folder, DetectionDataset};
use crate::error::{LabError, Result};
use crate::evaluate::{evaluate_detections, predict};
use crate::manifest::{claim_output_dir, lineage_of, RunManifest, MANIFEST_FILE};
use crate::train::{run_training, workers_from_env, TrainOptions, TrainingOutcome};
use crate::visualize::visualize_ssl;

#[derive(Debug, Parser)]
#[command(name = "ssldetr", version, about = "Detection transformer with self-supervised encoder pretext tasks")]
pub struct Cli {
    /// On failure, print one JSON object describing the error to stderr.
    #[arg(
        long,
        global = true,
        env = "SSLDETR_ERROR_JSON",
        action = clap::ArgAction::SetTrue,
        value_parser = clap::builder::BoolishValueParser::new()
    )]
    pub error_json: bool,
    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// SSL-only training of backbone and encoder; annotations are not needed.
    Pretrain(RunArgs),
    /// Plain or multi-task detection training.
    Train(RunArgs),
    /// COCO evaluation of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Original | transformed input | SSL prediction grids.
    Visualize(VisualizeArgs),
    /// Writes a synthetic dataset in COCO layout.
    GenerateSynthetic(GenerateArgs),
}

fn parse_task(s: &str) -> std::result::Result<SslTaskKind, String> {
    s.parse().map_err(|e: ssldetr_core::Error| e.to_string())
}

fn parse_schedule(s: &str) -> std::result::Result<ScheduleMode, String> {
    s.parse().map_err(|e: ssldetr_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: LabError| e.to_string())
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// plain | multitask | pretrain
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TrainMode>,
    /// reconstruction | mim_continuous | mim_discrete | jigsaw_continuous | jigsaw_discrete
    #[arg(long, value_parser = parse_task)]
    pub ssl_task: Option<SslTaskKind>,
    #[arg(long)]
    pub ssl_ratio: Option<f64>,
    /// constant | linear
    #[arg(long, value_parser = parse_schedule)]
    pub ssl_weight_schedule: Option<ScheduleMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Checkpoint whose backbone and encoder initialize the model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Replace an existing run in the output directory.
    #[arg(long)]
    pub force: bool,
    /// Continue from the checkpoint already in the output directory.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode,
            ssl_task: self.ssl_task,
            ssl_ratio: self.ssl_ratio,
            ssl_weight_schedule: self.ssl_weight_schedule,
            seed: self.seed,
            epochs: self.epochs,
            init: self.init.clone(),
            output_dir: self.output_dir.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Supplies the dataset; defaults to the built-in synthetic set.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Folder of images to use instead of the config's dataset.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "train")]
    pub split: Split,
    /// Defaults to the task of the checkpoint's SSL head.
    #[arg(long, value_parser = parse_task)]
    pub ssl_task: Option<SslTaskKind>,
    #[arg(long)]
    pub ssl_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of images to render.
    #[arg(long, default_value_t = 8)]
    pub limit: usize,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Takes generator settings from `data.train` when it is synthetic.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub num_images: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn load_config(path: Option<&Path>) -> Result<LabConfig> {
    match path {
        Some(p) => LabConfig::load(p),
        None => Ok(LabConfig::default()),
    }
}

fn output_dir(given: Option<&PathBuf>, config: &LabConfig, command: &str) -> PathBuf {
    given
        .cloned()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(command))
}

fn split_source(config: &LabConfig, split: Split) -> Result<&DatasetSource> {
    match split {
        Split::Train => Ok(&config.data.train),
        Split::Val => config
            .data
            .val
            .as_ref()
            .ok_or_else(|| LabError::config("data.val", "no validation set configured; use --split train")),
    }
}

/// Runs `body` under a manifest, recording its outcome even when it fails.
fn with_manifest<T>(
    dir: &Path,
    mut manifest: RunManifest,
    body: impl FnOnce(&mut RunManifest) -> Result<T>,
) -> Result<(T, RunManifest)> {
    manifest.write(dir)?;
    let result = body(&mut manifest);
    manifest.finish(result.as_ref().map(|_| ()));
    manifest.write(dir)?;
    result.map(|v| (v, manifest))
}

/// Outcome of a successful command, for callers that drive the CLI
/// in-process.
#[derive(Debug)]
pub struct CommandOutput {
    pub output_dir: PathBuf,
    pub manifest: RunManifest,
}

/// `pretrain` and `train`.
pub fn cmd_run(args: &RunArgs, pretrain: bool) -> Result<(CommandOutput, TrainingOutcome)> {
    let mut config = load_config(args.config.as_deref())?;
    config.apply(&args.overrides());
    if pretrain {
        if config.mode != TrainMode::Pretrain && args.mode.is_some() {
            return Err(LabError::config("mode", "the pretrain command only runs mode `pretrain`"));
        }
        config.mode = TrainMode::Pretrain;
    } else if config.mode == TrainMode::Pretrain {
        return Err(LabError::config("mode", "use the pretrain command for mode `pretrain`"));
    }
    config.validate()?;
    let command = if pretrain { "pretrain" } else { "train" };
    let dir = output_dir(args.output_dir.as_ref(), &config, command);
    let resuming = args.resume && dir.join(MANIFEST_FILE).is_file();
    if !resuming {
        claim_output_dir(&dir, args.force)?;
    }
    let train = config.data.train.load()?;
    let val = match (&config.data.val, config.mode.needs_annotations()) {
        (Some(source), true) => Some(source.load()?),
        _ => None,
    };

    let snapshot = serde_json::to_value(&config).map_err(|e| LabError::json(&dir, e))?;
    let mut manifest = RunManifest::start(command, snapshot, config.seed);
    if resuming {
        if let Ok(previous) = crate::manifest::read_manifest(&dir.join(MANIFEST_FILE)) {
            manifest.run_id = previous.run_id;
            manifest.started_at = previous.started_at;
        }
    }
    if let Some(init) = &config.init {
        manifest.parents.push(lineage_of(init));
    }
    if let Some(weights) = &config.model.backbone.pretrained_weights {
        manifest.parents.push(lineage_of(weights));
    }
    let config_path = dir.join("config.toml");
    let opts = TrainOptions {
        num_workers: workers_from_env(),
        resume: args.resume,
        ..Default::default()
    };
    let (outcome, manifest) = with_manifest(&dir, manifest, |m| {
        std::fs::write(&config_path, config.to_toml()?).map_err(|e| LabError::io(&config_path, e))?;
        m.add_artifact("config", &config_path, &dir);
        let outcome = run_training(&config, &train, val.as_ref(), &dir, &opts)?;
        m.add_artifact("checkpoint", &outcome.checkpoint, &dir);
        m.add_artifact("metrics", &outcome.metrics_log, &dir);
        Ok(outcome)
    })?;
    Ok((CommandOutput { output_dir: dir, manifest }, outcome))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(CommandOutput, crate::evaluate::EvalSummary)> {
    let config = load_config(args.config.as_deref())?;
    let ckpt = load_checkpoint(&args.checkpoint, &Device::Cpu)?;
    let dataset = split_source(&config, args.split)?.load()?;
    if dataset.is_empty() {
        return Err(LabError::Data("cannot evaluate on an empty dataset".into()));
    }
    if !dataset.labeled {
        return Err(LabError::Data("cannot evaluate on a dataset without annotations".into()));
    }
    let dir = output_dir(args.output_dir.as_ref(), &config, "evaluate");
    claim_output_dir(&dir, args.force)?;
    let snapshot = json!({
        "checkpoint": args.checkpoint,
        "split": format!("{:?}", args.split).to_lowercase(),
        "data": config.data,
        "batch_size": args.batch_size,
    });
    let mut manifest = RunManifest::start("evaluate", snapshot, ckpt.meta.seed);
    manifest.parents.push(lineage_of(&args.checkpoint));
    let (summary, manifest) = with_manifest(&dir, manifest, |m| {
        let model = ckpt.build_model(DType::F32, &Device::Cpu)?;
        let detections = predict(&model, &dataset, args.batch_size)?;
        let summary = evaluate_detections(&dataset, &detections)?;
        let results: Vec<CocoResult> = detections
            .iter()
            .map(|d| CocoResult {
                image_id: d.image_id,
                category_id: d.category_id,
                bbox: d.bbox,
                score: d.score,
            })
            .collect();
        let det_path = dir.join("detections.json");
        write_json(&det_path, &results)?;
        m.add_artifact("detections", &det_path, &dir);
        let report_path = dir.join("eval_report.json");
        write_json(&report_path, &summary)?;
        m.add_artifact("report", &report_path, &dir);
        Ok(summary)
    })?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| LabError::json(&dir, e))?);
    } else {
        println!("{}", summary.table());
        for c in &summary.per_class {
            println!("{:>4} {:<16} AP {:.4}  AP50 {:.4}  AP75 {:.4}", c.category_id, c.name, c.ap, c.ap50, c.ap75);
        }
    }
    Ok((CommandOutput { output_dir: dir, manifest }, summary))
}

pub fn cmd_visualize(args: &VisualizeArgs) -> Result<(CommandOutput, Vec<PathBuf>)> {
    let config = load_config(args.config.as_deref())?;
    let ckpt = load_checkpoint(&args.checkpoint, &Device::Cpu)?;
    let head = ckpt.meta.ssl_head.ok_or_else(|| {
        LabError::config("ssl.task", "checkpoint has no SSL head to visualize")
    })?;
    let ssl = SslConfig {
        task: args.ssl_task.unwrap_or(head.kind),
        ratio: args.ssl_ratio.unwrap_or(config.ssl.ratio),
        ..config.ssl.clone()
    };
    let task = ssl.task_config()?;
    let model = ckpt.build_model(DType::F32, &Device::Cpu)?;
    model.check_ssl_task(&task)?;
    let mut dataset: DetectionDataset = match &args.images {
        Some(dir) => load_image_folder(dir)?,
        None => split_source(&config, args.split)?.load()?,
    };
    let keep: Vec<usize> = (0..dataset.len().min(args.limit)).collect();
    dataset = dataset.subset(&keep);
    let dir = output_dir(args.output_dir.as_ref(), &config, "visualize");
    claim_output_dir(&dir, args.force)?;
    let seed = args.seed.unwrap_or(config.seed);
    let snapshot = json!({
        "checkpoint": args.checkpoint,
        "ssl": ssl,
        "images": args.images,
        "limit": args.limit,
    });
    let mut manifest = RunManifest::start("visualize", snapshot, seed);
    manifest.parents.push(lineage_of(&args.checkpoint));
    let (paths, manifest) = with_manifest(&dir, manifest, |m| {
        let paths = visualize_ssl(&model, &dataset, &task, seed, &dir)?;
        for p in &paths {
            m.add_artifact("image", p, &dir);
        }
        Ok(paths)
    })?;
    Ok((CommandOutput { output_dir: dir, manifest }, paths))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(CommandOutput, PathBuf)> {
    let config = load_config(args.config.as_deref())?;
    let mut synth = match &config.data.train {
        DatasetSource::Synthetic(s) => s.clone(),
        _ => Default::default(),
    };
    if let Some(n) = args.num_images {
        synth.num_images = n;
    }
    if let Some(s) = args.image_size {
        synth.image_size = s;
    }
    if let Some(s) = args.seed {
        synth.seed = s;
    }
    synth.validate("synthetic")?;
    let dir = output_dir(args.output_dir.as_ref(), &config, "synthetic");
    claim_output_dir(&dir, args.force)?;
    let snapshot = serde_json::to_value(&synth).map_err(|e| LabError::json(&dir, e))?;
    let manifest = RunManifest::start("generate-synthetic", snapshot, synth.seed);
    let (ann, manifest) = with_manifest(&dir, manifest, |m| {
        let dataset = generate_synthetic(&synth)?;
        let ann = export_coco(&dataset, &dir)?;
        m.add_artifact("dataset", &ann, &dir);
        Ok(ann)
    })?;
    Ok((CommandOutput { output_dir: dir, manifest }, ann))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(a) | Command::Train(a) => {
            let pretrain = matches!(cli.command, Command::Pretrain(_));
            let (out, outcome) = cmd_run(a, pretrain)?;
            if let Some(last) = outcome.records.last() {
                println!("epoch {} loss {:.6}", last.epoch, last.loss.total);
                if let Some(e) = &last.eval {
                    println!("{}", e.table());
                }
            }
            println!("run written to {}", out.output_dir.display());
        }
        Command::Evaluate(a) => {
            cmd_evaluate(a)?;
        }
        Command::Visualize(a) => {
            let (out, paths) = cmd_visualize(a)?;
            println!("{} images written to {}", paths.len(), out.output_dir.display());
        }
        Command::GenerateSynthetic(a) => {
            let (_, ann) = cmd_generate(a)?;
            println!("annotations written to {}", ann.display());
        }
    }
    Ok(())
}

/// Process exit status for an error: 2 for invalid input, 3 for an
/// occupied output directory, 1 otherwise.
pub fn exit_code(err: &LabError) -> u8 {
    match err {
        LabError::Config { .. } | LabError::Parse { .. } => 2,
        LabError::OutputExists(_) => 3,
        _ => 1,
    }
}

/// `{"error": {"kind": ..., "message": ..., ...}}` with location fields
/// when the error has them.
pub fn error_json(err: &LabError) -> serde_json::Value {
    let mut body = json!({ "kind": err.kind(), "message": err.to_string() });
    let extra = match err {
        LabError::Config { field, .. } => json!({ "field": field }),
        LabError::Parse { path, line, column, .. } => json!({ "path": path, "line": line, "column": column }),
        LabError::Io { path, .. } | LabError::Image { path, .. } | LabError::Checkpoint { path, .. } => {
            json!({ "path": path })
        }
        LabError::OutputExists(path) => json!({ "path": path }),
        _ => json!({}),
    };
    if let (Some(b), Some(e)) = (body.as_object_mut(), extra.as_object()) {
        b.extend(e.clone());
    }
    json!({ "error": body })
}

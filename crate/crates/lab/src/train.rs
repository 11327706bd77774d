//! Optimization steps and the epoch loop for the three training modes.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ssldetr_core::matching::{GroundTruthSet, LossWeights};
use ssldetr_core::ssl::{make_sample, SslSample, SslTaskConfig};
use ssldetr_core::{Image, PatchGrid};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{LabConfig, TrainMode};
use crate::data::DetectionDataset;
use crate::error::{LabError, Result};
use crate::evaluate::{evaluate_model, EvalSummary};
use crate::loss::{self, scalar};
use crate::model::{Detector, SslHeadSpec, SSL_GRAPH_PREFIXES, TRANSFER_PREFIXES};
use crate::optim::{clip_grad_norm, AdamW};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const NUM_WORKERS_ENV: &str = "SSLDETR_NUM_WORKERS";

/// Losses and gradient norms of one optimizer update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    /// `detection + ssl_weight * ssl`, or `ssl` alone when pre-training.
    pub total: f64,
    pub detection: Option<f64>,
    pub classification: Option<f64>,
    pub bbox_l1: Option<f64>,
    pub giou: Option<f64>,
    /// Unweighted SSL loss; absent when the branch did not run.
    pub ssl: Option<f64>,
    pub ssl_weight: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

/// `(B, 3, H, W)` tensor from same-sized images.
pub fn images_to_tensor(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| LabError::Data("empty batch".into()))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.shape() != (c, h, w) {
            return Err(LabError::Data(format!(
                "batch mixes image shapes {:?} and {:?}",
                (c, h, w),
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

fn update(
    total: &Tensor,
    opt: &mut AdamW,
    clip: f64,
    mut metrics: StepMetrics,
) -> Result<StepMetrics> {
    let mut grads = total.backward()?;
    let report = clip_grad_norm(opt.params(), &mut grads, clip)?;
    opt.step(&grads)?;
    metrics.grad_norm = report.norm_before;
    metrics.clipped_grad_norm = report.norm_after;
    Ok(metrics)
}

/// Detection-only update on clean images.
pub fn detection_step(
    model: &Detector,
    opt: &mut AdamW,
    pixels: &Tensor,
    targets: &[GroundTruthSet],
    weights: LossWeights,
    clip: f64,
) -> Result<StepMetrics> {
    let out = model.detect(pixels)?;
    let matches = loss::match_batch(&out, targets, weights)?;
    let det = loss::detection_loss(&out, targets, &matches, weights)?;
    let detection = scalar(&det.total)?;
    let metrics = StepMetrics {
        total: detection,
        detection: Some(detection),
        classification: Some(scalar(&det.classification)?),
        bbox_l1: Some(scalar(&det.bbox_l1)?),
        giou: Some(scalar(&det.giou)?),
        ..Default::default()
    };
    update(&det.total, opt, clip, metrics)
}

fn ssl_branch(model: &Detector, samples: &[SslSample]) -> Result<Tensor> {
    let inputs: Vec<Image> = samples.iter().map(|s| s.input_image.clone()).collect();
    let pixels = images_to_tensor(&inputs, model.dtype(), model.device())?;
    let (memory, grid) = model.encode(&pixels)?;
    let pred = model.ssl_forward(&memory, &grid)?;
    loss::ssl_loss(&pred, samples, &grid)
}

/// SSL-only update; `opt` should hold only the parameters in the SSL graph.
pub fn pretrain_step(
    model: &Detector,
    opt: &mut AdamW,
    samples: &[SslSample],
    clip: f64,
) -> Result<StepMetrics> {
    let ssl = ssl_branch(model, samples)?;
    let value = scalar(&ssl)?;
    let metrics = StepMetrics {
        total: value,
        ssl: Some(value),
        ssl_weight: 1.0,
        ..Default::default()
    };
    update(&ssl, opt, clip, metrics)
}

/// Detection loss on the clean batch plus `ssl_weight` times the SSL loss on
/// the transformed batch, in one update. A zero weight skips the SSL branch.
#[allow(clippy::too_many_arguments)]
pub fn multitask_step(
    model: &Detector,
    opt: &mut AdamW,
    pixels: &Tensor,
    targets: &[GroundTruthSet],
    samples: &[SslSample],
    ssl_weight: f64,
    weights: LossWeights,
    clip: f64,
) -> Result<StepMetrics> {
    if ssl_weight == 0.0 {
        return detection_step(model, opt, pixels, targets, weights, clip);
    }
    let out = model.detect(pixels)?;
    let matches = loss::match_batch(&out, targets, weights)?;
    let det = loss::detection_loss(&out, targets, &matches, weights)?;
    let ssl = ssl_branch(model, samples)?;
    let total = (&det.total + ssl.affine(ssl_weight, 0.0)?)?;
    let detection = scalar(&det.total)?;
    let ssl_value = scalar(&ssl)?;
    let metrics = StepMetrics {
        total: detection + ssl_weight * ssl_value,
        detection: Some(detection),
        classification: Some(scalar(&det.classification)?),
        bbox_l1: Some(scalar(&det.bbox_l1)?),
        giou: Some(scalar(&det.giou)?),
        ssl: Some(ssl_value),
        ssl_weight,
    ..Default::default()
    };
    update(&total, opt, clip, metrics)
}

/// Mean of each loss component over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossMeans {
    pub total: f64,
    pub detection: Option<f64>,
    pub classification: Option<f64>,
    pub bbox_l1: Option<f64>,
    pub giou: Option<f64>,
    pub ssl: Option<f64>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: TrainMode,
    pub steps: usize,
    pub loss: LossMeans,
    pub ssl_weight: f64,
    pub max_grad_norm: f64,
    pub max_clipped_grad_norm: f64,
    pub eval: Option<EvalSummary>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn summarize(epoch: usize, mode: TrainMode, steps: &[StepMetrics]) -> EpochRecord {
    let n = steps.len().max(1) as f64;
    EpochRecord {
        epoch,
        mode,
        steps: steps.len(),
        loss: LossMeans {
            total: steps.iter().map(|s| s.total).sum::<f64>() / n,
            detection: mean_of(steps.iter().map(|s| s.detection)),
            classification: mean_of(steps.iter().map(|s| s.classification)),
            bbox_l1: mean_of(steps.iter().map(|s| s.bbox_l1)),
            giou: mean_of(steps.iter().map(|s| s.giou)),
            ssl: mean_of(steps.iter().map(|s| s.ssl)),
        },
        ssl_weight: steps.iter().map(|s| s.ssl_weight).sum::<f64>() / n,
        max_grad_norm: steps.iter().map(|s| s.grad_norm).fold(0.0, f64::max),
        max_clipped_grad_norm: steps.iter().map(|s| s.clipped_grad_norm).fold(0.0, f64::max),
        eval: None,
    }
}

/// Image `index` resized to the model's square input.
pub fn load_model_image(dataset: &DetectionDataset, index: usize, size: usize) -> Result<Image> {
    let img = dataset.load_pixels(index)?;
    if img.shape() == (3, size, size) {
        Ok(img)
    } else {
        Ok(img.resize_bilinear(size, size)?)
    }
}

/// Generator for the augmentation randomness of one sample; independent of
/// batch composition and worker count.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

struct Prepared {
    pixels: Image,
    target: Option<GroundTruthSet>,
    ssl: Option<SslSample>,
}

struct PrepareSpec<'a> {
    dataset: &'a DetectionDataset,
    size: usize,
    grid: PatchGrid,
    task: Option<&'a SslTaskConfig>,
    labeled: bool,
    seed: u64,
    epoch: usize,
}

impl PrepareSpec<'_> {
    fn one(&self, index: usize, with_ssl: bool) -> Result<Prepared> {
        let pixels = load_model_image(self.dataset, index, self.size)?;
        let target = if self.labeled {
            Some(self.dataset.ground_truth(index)?)
        } else {
            None
        };
        let ssl = match (self.task, with_ssl) {
            (Some(task), true) => {
                let mut rng = sample_rng(self.seed, self.epoch, index);
                Some(make_sample(&pixels, &self.grid, task, &mut rng)?)
            }
            _ => None,
        };
        Ok(Prepared { pixels, target, ssl })
    }

    /// Prepares `indices` with up to `workers` threads; output order follows
    /// `indices`.
    fn batch(&self, indices: &[usize], with_ssl: bool, workers: usize) -> Result<Vec<Prepared>> {
        if workers <= 1 || indices.len() <= 1 {
            return indices.iter().map(|&i| self.one(i, with_ssl)).collect();
        }
        let chunk = indices.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&i| self.one(i, with_ssl)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(indices.len());
            for h in handles {
                out.extend(h.join().map_err(|_| LabError::Data("data worker panicked".into()))??);
            }
            Ok(out)
        })
    }
}

/// Worker count from `SSLDETR_NUM_WORKERS`, defaulting to one.
pub fn workers_from_env() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub num_workers: usize,
    /// Continue from the checkpoint in the output directory, if any.
    pub resume: bool,
    pub dtype: DType,
    pub device: Device,
    /// Stop after this many epochs of the current invocation.
    pub max_epochs_this_run: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            num_workers: 1,
            resume: false,
            dtype: DType::F32,
            device: Device::Cpu,
            max_epochs_this_run: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub records: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub resumed_from_epoch: Option<usize>,
    /// Parameters copied from the init checkpoint.
    pub transferred: usize,
}

fn read_records(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LabError::json(path, e))?);
    }
    Ok(out)
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<EpochRecord>> {
    read_records(path)
}

fn write_records(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| LabError::json(path, e))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

fn append_record(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| LabError::io(path, e))?;
    let line = serde_json::to_string(record).map_err(|e| LabError::json(path, e))?;
    writeln!(file, "{line}").map_err(|e| LabError::io(path, e))
}

/// Builds the model a config describes, with an SSL head when the mode
/// needs one.
pub fn build_model(config: &LabConfig, dtype: DType, device: &Device) -> Result<Detector> {
    let head = if config.mode.uses_ssl() {
        Some(SslHeadSpec::for_task(&config.ssl.task_config()?, &config.model.grid()?)?)
    } else {
        None
    };
    Detector::new(&config.model, head, config.seed, dtype, device)
}

/// Trains per `config`, writing `checkpoint.safetensors` and appending one
/// line to `metrics.jsonl` after every epoch.
pub fn run_training(
    config: &LabConfig,
    train: &DetectionDataset,
    val: Option<&DetectionDataset>,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainingOutcome> {
    config.validate()?;
    let mode = config.mode;
    if train.is_empty() {
        return Err(LabError::Data("training dataset is empty".into()));
    }
    if mode.needs_annotations() && !train.labeled {
        return Err(LabError::Data(format!(
            "{mode} training needs annotations but the training set has none"
        )));
    }
    if mode.needs_annotations() && train.num_classes() != config.model.num_classes {
        return Err(LabError::Data(format!(
            "dataset has {} classes but the model predicts {}",
            train.num_classes(),
            config.model.num_classes
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let log_path = out_dir.join(METRICS_FILE);

    let model = build_model(config, opts.dtype, &opts.device)?;
    let task = if mode.uses_ssl() {
        Some(config.ssl.task_config()?)
    } else {
        None
    };
    let mut transferred = 0;
    if let Some(path) = &config.model.backbone.pretrained_weights {
        transferred += load_checkpoint(path, &opts.device)?.transfer(&model, &["backbone."])?;
    }
    if let Some(path) = &config.init {
        transferred += load_checkpoint(path, &opts.device)?.transfer(&model, &TRANSFER_PREFIXES)?;
    }
    let params = if mode == TrainMode::Pretrain {
        model.params().select(&SSL_GRAPH_PREFIXES)
    } else {
        model.params().all()
    };
    let mut opt = AdamW::new(params, config.optim.adamw())?;

    let mut start_epoch = 0;
    let mut records = Vec::new();
    let mut resumed_from_epoch = None;
    if opts.resume && ckpt_path.is_file() {
        let ckpt = load_checkpoint(&ckpt_path, &opts.device)?;
        if ckpt.meta.model != config.model || ckpt.meta.mode != mode {
            return Err(LabError::Checkpoint {
                path: ckpt_path.clone(),
                message: "checkpoint was written by a different configuration".into(),
            });
        }
        model.params().load_matching(&ckpt.tensors, &[""])?;
        opt.load_state(&ckpt.tensors, ckpt.meta.optimizer_step)?;
        start_epoch = ckpt.meta.epoch;
        records = if log_path.is_file() {
            read_records(&log_path)?
        } else {
            Vec::new()
        };
        records.truncate(start_epoch);
        write_records(&log_path, &records)?;
        resumed_from_epoch = Some(start_epoch);
    } else {
        write_records(&log_path, &[])?;
    }

    let batch_size = config.optim.batch_size;
    let steps_per_epoch = train.len().div_ceil(batch_size);
    let epochs = config.optim.epochs;
    let schedule = config.ssl.schedule(epochs * steps_per_epoch);
    let weights = LossWeights::default();
    let clip = config.optim.grad_clip_norm;
    let grid = config.model.grid()?;
    let end_epoch = match opts.max_epochs_this_run {
        Some(n) => (start_epoch + n).min(epochs),
        None => epochs,
    };

    for epoch in start_epoch..end_epoch {
        let prep = PrepareSpec {
            dataset: train,
            size: config.model.image_size,
            grid,
            task: task.as_ref(),
            labeled: mode.needs_annotations(),
            seed: config.seed,
            epoch,
        };
        let order = epoch_order(config.seed, epoch, train.len());
        let mut steps = Vec::with_capacity(steps_per_epoch);
        for (b, indices) in order.chunks(batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b;
            let weight = match mode {
                TrainMode::Multitask => schedule.weight(step)?,
                TrainMode::Pretrain => 1.0,
                TrainMode::Plain => 0.0,
            };
            let batch = prep.batch(indices, weight > 0.0, opts.num_workers)?;
            let images: Vec<Image> = batch.iter().map(|p| p.pixels.clone()).collect();
            let targets: Vec<GroundTruthSet> = batch.iter().filter_map(|p| p.target.clone()).collect();
            let samples: Vec<SslSample> = batch.into_iter().filter_map(|p| p.ssl).collect();
            let metrics = match mode {
                TrainMode::Pretrain => pretrain_step(&model, &mut opt, &samples, clip)?,
                TrainMode::Plain => {
                    let pixels = images_to_tensor(&images, opts.dtype, &opts.device)?;
                    detection_step(&model, &mut opt, &pixels, &targets, weights, clip)?
                }
                TrainMode::Multitask => {
                    let pixels = images_to_tensor(&images, opts.dtype, &opts.device)?;
                    multitask_step(&model, &mut opt, &pixels, &targets, &samples, weight, weights, clip)?
                }
            };
            if !metrics.total.is_finite() {
                return Err(LabError::Model(format!(
                    "loss became {} at epoch {epoch}, step {b}",
                    metrics.total
                )));
            }
            steps.push(metrics);
        }
        let mut record = summarize(epoch + 1, mode, &steps);
        if mode.needs_annotations() {
            if let Some(val) = val.filter(|v| !v.is_empty() && v.labeled) {
                record.eval = Some(evaluate_model(&model, val, batch_size)?);
            }
        }
        log::info!(
            "epoch {}/{epochs}: loss {:.5}{}",
            epoch + 1,
            record.loss.total,
            record
                .eval
                .as_ref()
                .map(|e| format!(", val AP {:.4} AP50 {:.4}", e.ap, e.ap50))
                .unwrap_or_default()
        );
        let meta = CheckpointMeta {
            model: config.model.clone(),
            ssl_head: model.ssl_head_spec(),
            mode,
            epoch: epoch + 1,
            optimizer_step: opt.steps_taken(),
            seed: config.seed,
            class_names: train.classes.iter().map(|c| c.name.clone()).collect(),
        };
        save_checkpoint(&ckpt_path, &model, Some(&opt), &meta)?;
        append_record(&log_path, &record)?;
        records.push(record);
    }

    Ok(TrainingOutcome {
        records,
        checkpoint: ckpt_path,
        metrics_log: log_path,
        resumed_from_epoch,
        transferred,
    })
}

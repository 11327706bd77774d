#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssldetr::config::{DatasetSource, LabConfig, SslConfig, TrainMode};
use ssldetr::data::SyntheticConfig;
use ssldetr::model::{BackboneConfig, BackboneKind, Detector, DetectorConfig};
use ssldetr_core::ssl::{SslTaskConfig, SslTaskKind};

pub const ALL_TASKS: [SslTaskKind; 5] = [
    SslTaskKind::Reconstruction,
    SslTaskKind::MimContinuous,
    SslTaskKind::MimDiscrete,
    SslTaskKind::JigsawContinuous,
    SslTaskKind::JigsawDiscrete,
];

pub fn toy_detector(image_size: usize, f: usize, hidden: usize) -> DetectorConfig {
    DetectorConfig {
        num_queries: 5,
        num_classes: 3,
        encoder_layers: 1,
        decoder_layers: 1,
        attention_heads: 2,
        hidden_dim: hidden,
        ffn_dim: 2 * hidden,
        image_size,
        backbone: BackboneConfig {
            kind: BackboneKind::Conv,
            downsampling_factor: f,
            feature_dim: 8,
            pretrained_weights: None,
        },
    }
}

pub fn task(kind: SslTaskKind, ratio: f64) -> SslTaskConfig {
    SslConfig {
        task: kind,
        ratio,
        tokenizer_levels: 3,
        ..Default::default()
    }
    .task_config()
    .unwrap()
}

/// A training config small enough for many runs per test.
pub fn tiny_run(mode: TrainMode, images: usize) -> LabConfig {
    let mut c = LabConfig {
        mode,
        model: toy_detector(64, 16, 16),
        ..Default::default()
    };
    c.optim.batch_size = 4;
    c.optim.epochs = 2;
    c.optim.learning_rate = 1e-3;
    let synth = SyntheticConfig {
        num_images: images,
        image_size: 64,
        object_size: [12, 24],
        ..Default::default()
    };
    c.data.train = DatasetSource::Synthetic(synth.clone());
    c.data.val = Some(DatasetSource::Synthetic(SyntheticConfig {
        num_images: 4,
        seed: 1,
        ..synth
    }));
    c
}

pub fn random_pixels(rng: &mut ChaCha8Rng, b: usize, size: usize, dtype: DType) -> Tensor {
    let data: Vec<f32> = (0..b * 3 * size * size).map(|_| rng.random()).collect();
    Tensor::from_vec(data, (b, 3, size, size), &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_relative: f64,
    pub worst_at: String,
    pub failures: Vec<String>,
}

/// Compares autograd gradients of `loss` with central differences at
/// `per_param` random coordinates of every parameter that receives a
/// gradient. A coordinate passes when the relative error is at most
/// `rel_tol` or the absolute difference is at most `abs_floor`. The reported
/// worst relative error covers gradients larger than `1e-6`.
pub fn check_gradients(
    model: &Detector,
    loss: impl Fn(&Detector) -> Tensor,
    per_param: usize,
    eps: f64,
    rel_tol: f64,
    abs_floor: f64,
    seed: u64,
) -> GradCheck {
    let value = |m: &Detector| loss(m).to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    let grads = loss(model).backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::default();
    for (name, var) in model.params().all() {
        let Some(g) = grads.get(&var) else { continue };
        let analytic: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
        let original: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
        let shape = var.dims().to_vec();
        let set = |values: &[f64]| {
            var.set(&Tensor::from_slice(values, shape.as_slice(), &Device::Cpu).unwrap())
                .unwrap()
        };
        for _ in 0..per_param.min(original.len()) {
            let i = rng.random_range(0..original.len());
            let mut probe = original.clone();
            probe[i] = original[i] + eps;
            set(&probe);
            let plus = value(model);
            probe[i] = original[i] - eps;
            set(&probe);
            let minus = value(model);
            set(&original);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i];
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.checked += 1;
            if a.abs().max(numeric.abs()) > 1e-6 && rel > report.worst_relative {
                report.worst_relative = rel;
                report.worst_at = format!("{name}[{i}]: analytic {a:e} numeric {numeric:e}");
            }
            if diff > abs_floor && rel > rel_tol {
                report.failures.push(format!("{name}[{i}]: analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    report
}

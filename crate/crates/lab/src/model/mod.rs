//! Toy detection transformer: CNN backbone, sine positional encoding,
//! encoder, decoder with learned object queries, class and box heads, and an
//! optional linear SSL head on the encoder tokens.

pub mod backbone;
pub mod params;
pub mod transformer;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use ssldetr_core::ssl::{SslTaskConfig, SslTaskKind};
use ssldetr_core::{position::positional_encoding, PatchGrid};

pub use backbone::{Backbone, BackboneConfig, BackboneKind};
pub use params::{Init, LayerNorm, Linear, ParamStore};
use transformer::{DecoderLayer, EncoderLayer};

use crate::error::{LabError, Result};

/// Per-channel statistics applied at the network input.
pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Parameter-name prefixes trained by SSL pre-training.
pub const SSL_GRAPH_PREFIXES: [&str; 4] = ["backbone.", "input_proj.", "encoder.", "ssl_head."];
/// Parameter-name prefixes carried from a pre-trained checkpoint into
/// fine-tuning.
pub const TRANSFER_PREFIXES: [&str; 3] = ["backbone.", "input_proj.", "encoder."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub num_queries: usize,
    pub num_classes: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    /// Side length of the square network input.
    pub image_size: usize,
    pub backbone: BackboneConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_queries: 100,
            num_classes: 3,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 4,
            hidden_dim: 64,
            ffn_dim: 128,
            image_size: 512,
            backbone: BackboneConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let positive = [
            ("model.num_queries", self.num_queries),
            ("model.num_classes", self.num_classes),
            ("model.attention_heads", self.attention_heads),
            ("model.hidden_dim", self.hidden_dim),
            ("model.ffn_dim", self.ffn_dim),
            ("model.image_size", self.image_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(LabError::config(field, "must be positive"));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.attention_heads) {
            return Err(LabError::config(
                "model.hidden_dim",
                format!(
                    "{} is not divisible by {} attention heads",
                    self.hidden_dim, self.attention_heads
                ),
            ));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return Err(LabError::config(
                "model.hidden_dim",
                "must be even for the sine positional encoding",
            ));
        }
        self.grid().map_err(|e| LabError::config("model.image_size", e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        Ok(PatchGrid::new(
            self.image_size,
            self.image_size,
            self.backbone.downsampling_factor,
        )?)
    }
}

/// What the SSL head predicts and how wide each token's output is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SslHeadSpec {
    #[serde(with = "crate::config::task_kind")]
    pub kind: SslTaskKind,
    pub output_dim: usize,
}

impl SslHeadSpec {
    pub fn for_task(task: &SslTaskConfig, grid: &PatchGrid) -> Result<Self> {
        Ok(Self {
            kind: task.kind,
            output_dim: task.head_output_dim(grid, 3)?,
        })
    }
}

struct SslHead {
    spec: SslHeadSpec,
    proj: Linear,
}

pub struct DetectionOutput {
    /// `(B, Q, C + 1)`; the last column is "no object".
    pub logits: Tensor,
    /// `(B, Q, 4)` as `(cx, cy, w, h)` in `[0, 1]`.
    pub boxes: Tensor,
}

pub struct Detector {
    config: DetectorConfig,
    store: ParamStore,
    backbone: Backbone,
    input_proj: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    query_embed: Tensor,
    class_head: Linear,
    box_head: [Linear; 3],
    ssl_head: Option<SslHead>,
}

impl Detector {
    pub fn new(
        config: &DetectorConfig,
        ssl_head: Option<SslHeadSpec>,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let d = config.hidden_dim;
        let backbone = Backbone::new(&mut store, &config.backbone)?;
        let c = config.backbone.out_channels();
        let input_proj = Linear::new(&mut store, "input_proj", c, d, Init::xavier(c, d))?;
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut store,
                    &format!("encoder.layers.{i}"),
                    d,
                    config.attention_heads,
                    config.ffn_dim,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut store,
                    &format!("decoder.layers.{i}"),
                    d,
                    config.attention_heads,
                    config.ffn_dim,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut store, "decoder.norm", d)?;
        let query_embed = store.create("query_embed", &[config.num_queries, d], Init::Uniform(1.0))?;
        let class_head = Linear::new(
            &mut store,
            "class_head",
            d,
            config.num_classes + 1,
            Init::fan_in(d),
        )?;
        let box_head = [
            Linear::new(&mut store, "box_head.0", d, d, Init::fan_in(d))?,
            Linear::new(&mut store, "box_head.1", d, d, Init::fan_in(d))?,
            Linear::new(&mut store, "box_head.2", d, 4, Init::fan_in(d))?,
        ];
        let ssl_head = match ssl_head {
            Some(spec) => {
                let grid = config.grid()?;
                let expected = match spec.kind {
                    SslTaskKind::JigsawDiscrete => Some(grid.num_patches()),
                    SslTaskKind::MimDiscrete => None,
                    _ => Some(3 * grid.patch_size() * grid.patch_size()),
                };
                if spec.output_dim == 0 || expected.is_some_and(|e| e != spec.output_dim) {
                    return Err(LabError::config(
                        "ssl.task",
                        format!("{} head cannot emit {} values per token", spec.kind, spec.output_dim),
                    ));
                }
                Some(SslHead {
                    spec,
                    proj: Linear::new(&mut store, "ssl_head", d, spec.output_dim, Init::xavier(d, spec.output_dim))?,
                })
            }
            None => None,
        };
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            input_proj,
            encoder,
            decoder,
            decoder_norm,
            query_embed,
            class_head,
            box_head,
            ssl_head,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn ssl_head_spec(&self) -> Option<SslHeadSpec> {
        self.ssl_head.as_ref().map(|h| h.spec)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Raw `[0, 1]` pixels `(B, 3, H, W)` to normalized network input.
    pub fn normalize_input(&self, pixels: &Tensor) -> Result<Tensor> {
        let dev = self.device();
        let mean = Tensor::new(&PIXEL_MEAN, dev)?.to_dtype(pixels.dtype())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&PIXEL_STD, dev)?.to_dtype(pixels.dtype())?.reshape((1, 3, 1, 1))?;
        Ok(pixels.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Backbone features flattened to row-major tokens `(B, N, C)`.
    pub fn backbone_tokens(&self, pixels: &Tensor) -> Result<(Tensor, PatchGrid)> {
        let (_, _, h, w) = pixels.dims4()?;
        let grid = PatchGrid::new(h, w, self.config.backbone.downsampling_factor)?;
        let features = self.backbone.forward(&self.normalize_input(pixels)?)?;
        let tokens = features.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        Ok((tokens, grid))
    }

    pub fn position_encoding(&self, grid: &PatchGrid) -> Result<Tensor> {
        let pe = positional_encoding(grid, self.config.hidden_dim)?;
        Ok(Tensor::from_vec(pe, (grid.num_patches(), self.config.hidden_dim), self.device())?
            .to_dtype(self.dtype())?)
    }

    /// Runs the encoder over projected tokens `(B, N, D)`.
    pub fn encoder_forward(&self, tokens: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let mut x = tokens.clone();
        for layer in &self.encoder {
            x = layer.forward(&x, pos)?;
        }
        Ok(x)
    }

    /// Raw pixels to encoder output tokens `(B, N, D)`; token `p` belongs to
    /// patch `p` of the returned grid.
    pub fn encode(&self, pixels: &Tensor) -> Result<(Tensor, PatchGrid)> {
        let (tokens, grid) = self.backbone_tokens(pixels)?;
        let pos = self.position_encoding(&grid)?;
        let memory = self.encoder_forward(&self.input_proj.forward(&tokens)?, &pos)?;
        Ok((memory, grid))
    }

    pub fn decode(&self, memory: &Tensor, grid: &PatchGrid) -> Result<DetectionOutput> {
        let b = memory.dim(0)?;
        let pos = self.position_encoding(grid)?;
        let (q, d) = (self.config.num_queries, self.config.hidden_dim);
        let query_pos = self.query_embed.unsqueeze(0)?.broadcast_as((b, q, d))?.contiguous()?;
        let mut tgt = query_pos.zeros_like()?;
        for layer in &self.decoder {
            tgt = layer.forward(&tgt, memory, &pos, &query_pos)?;
        }
        let hs = self.decoder_norm.forward(&tgt)?;
        let logits = self.class_head.forward(&hs)?;
        let h = self.box_head[0].forward(&hs)?.relu()?;
        let h = self.box_head[1].forward(&h)?.relu()?;
        let boxes = params::sigmoid(&self.box_head[2].forward(&h)?)?;
        Ok(DetectionOutput { logits, boxes })
    }

    pub fn detect(&self, pixels: &Tensor) -> Result<DetectionOutput> {
        let (memory, grid) = self.encode(pixels)?;
        self.decode(&memory, &grid)
    }

    /// SSL head on encoder tokens. Continuous tasks return a predicted image
    /// `(B, 3, H, W)`; discrete tasks return logits `(B, N, K)`.
    pub fn ssl_forward(&self, memory: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
        let head = self
            .ssl_head
            .as_ref()
            .ok_or_else(|| LabError::config("ssl.task", "the model has no SSL head"))?;
        let out = head.proj.forward(memory)?;
        if head.spec.kind.is_discrete() {
            return Ok(out);
        }
        let b = out.dim(0)?;
        let f = grid.patch_size();
        Ok(out
            .reshape(&[b, grid.rows(), grid.cols(), 3, f, f][..])?
            .permute(vec![0, 3, 1, 4, 2, 5])?
            .reshape((b, 3, grid.image_height(), grid.image_width()))?)
    }

    /// Checks that the head predicts what `task` supervises. Any pixel head
    /// serves every continuous task.
    pub fn check_ssl_task(&self, task: &SslTaskConfig) -> Result<()> {
        let want = SslHeadSpec::for_task(task, &self.config.grid()?)?;
        let pixels = |s: SslHeadSpec| !s.kind.is_discrete();
        match self.ssl_head_spec() {
            Some(have) if have == want || (pixels(have) && pixels(want)) => Ok(()),
            Some(have) => Err(LabError::config(
                "ssl.task",
                format!(
                    "model head predicts {} ({} values) but the task is {} ({} values)",
                    have.kind, have.output_dim, want.kind, want.output_dim
                ),
            )),
            None => Err(LabError::config("ssl.task", "the model has no SSL head")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: BackboneKind, f: usize) -> DetectorConfig {
        DetectorConfig {
            num_queries: 5,
            num_classes: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 2,
            hidden_dim: 16,
            ffn_dim: 32,
            image_size: 64,
            backbone: BackboneConfig {
                kind,
                downsampling_factor: f,
                feature_dim: 8,
                pretrained_weights: None,
            },
        }
    }

    fn random_pixels(b: usize, size: usize) -> Tensor {
        Tensor::rand(0f32, 1f32, (b, 3, size, size), &Device::Cpu).unwrap()
    }

    #[test]
    fn backbone_output_is_one_cell_per_patch() {
        for (size, f) in [(64, 32), (64, 16), (32, 32)] {
            let mut cfg = tiny(BackboneKind::Conv, f);
            cfg.image_size = size;
            let m = Detector::new(&cfg, None, 0, DType::F32, &Device::Cpu).unwrap();
            let (tokens, grid) = m.backbone_tokens(&random_pixels(1, size)).unwrap();
            assert_eq!(tokens.dims(), &[1, (size / f) * (size / f), 8]);
            assert_eq!(grid.num_patches(), (size / f).pow(2));
        }
    }

    #[test]
    fn non_divisible_input_is_a_dimension_error() {
        let m = Detector::new(&tiny(BackboneKind::Conv, 32), None, 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 64, 48), DType::F32, &Device::Cpu).unwrap();
        let err = m.detect(&x).err().unwrap();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn detection_shapes_and_box_range() {
        for q in [1, 5] {
            let mut cfg = tiny(BackboneKind::Conv, 16);
            cfg.num_queries = q;
            let m = Detector::new(&cfg, None, 1, DType::F32, &Device::Cpu).unwrap();
            let out = m.detect(&random_pixels(2, 64)).unwrap();
            assert_eq!(out.logits.dims(), &[2, q, 3]);
            assert_eq!(out.boxes.dims(), &[2, q, 4]);
            let v: Vec<f32> = out.boxes.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = tiny(BackboneKind::Conv, 16);
        cfg.hidden_dim = 18;
        cfg.attention_heads = 4;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.hidden_dim"), "{err}");
        let mut cfg = tiny(BackboneKind::Conv, 24);
        cfg.image_size = 48;
        assert!(cfg.validate().unwrap_err().to_string().contains("downsampling_factor"));
    }

    #[test]
    fn ssl_head_shapes() {
        let cfg = tiny(BackboneKind::Conv, 16);
        let grid = cfg.grid().unwrap();
        let x = random_pixels(2, 64);
        for kind in [SslTaskKind::MimContinuous, SslTaskKind::JigsawDiscrete] {
            let spec = SslHeadSpec::for_task(&SslTaskConfig::new(kind, 0.5), &grid).unwrap();
            let m = Detector::new(&cfg, Some(spec), 0, DType::F32, &Device::Cpu).unwrap();
            let (mem, g) = m.encode(&x).unwrap();
            let y = m.ssl_forward(&mem, &g).unwrap();
            if kind.is_discrete() {
                assert_eq!(y.dims(), &[2, 16, 16]);
            } else {
                assert_eq!(y.dims(), &[2, 3, 64, 64]);
            }
        }
    }

    #[test]
    fn mismatched_head_is_rejected() {
        let cfg = tiny(BackboneKind::Conv, 16);
        let bad = SslHeadSpec {
            kind: SslTaskKind::JigsawDiscrete,
            output_dim: 7,
        };
        assert!(Detector::new(&cfg, Some(bad), 0, DType::F32, &Device::Cpu).is_err());
        let grid = cfg.grid().unwrap();
        let spec = SslHeadSpec::for_task(&SslTaskConfig::new(SslTaskKind::MimContinuous, 0.5), &grid).unwrap();
        let m = Detector::new(&cfg, Some(spec), 0, DType::F32, &Device::Cpu).unwrap();
        assert!(m
            .check_ssl_task(&SslTaskConfig::new(SslTaskKind::JigsawDiscrete, 0.5))
            .is_err());
        assert!(m
            .check_ssl_task(&SslTaskConfig::new(SslTaskKind::Reconstruction, 0.0))
            .is_ok());
    }
}

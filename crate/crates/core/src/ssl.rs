//! Self-supervised pretext tasks over the patch grid.
//!
//! Each task turns a clean image into an [`SslSample`]: the transformed image
//! the network sees, what it should predict, and the patches on which the
//! prediction is scored. [`ssl_loss`] scores a prediction against a sample.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::patchgrid::{
    check_ratio, extract_patches, reassemble_patches, sample_permutation, sample_selection,
    PatchGrid, PatchPermutation, Patches,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SslTaskKind {
    /// Predict the unmodified input image.
    Reconstruction,
    /// Mean-fill random patches, regress their pixels.
    MimContinuous,
    /// Mean-fill random patches, classify their visual tokens.
    MimDiscrete,
    /// Shuffle random patches, regress the original pixels.
    JigsawContinuous,
    /// Shuffle random patches, classify each one's original grid position.
    JigsawDiscrete,
}

impl SslTaskKind {
    pub const ALL: [SslTaskKind; 5] = [
        SslTaskKind::Reconstruction,
        SslTaskKind::MimContinuous,
        SslTaskKind::MimDiscrete,
        SslTaskKind::JigsawContinuous,
        SslTaskKind::JigsawDiscrete,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SslTaskKind::Reconstruction => "reconstruction",
            SslTaskKind::MimContinuous => "mim_continuous",
            SslTaskKind::MimDiscrete => "mim_discrete",
            SslTaskKind::JigsawContinuous => "jigsaw_continuous",
            SslTaskKind::JigsawDiscrete => "jigsaw_discrete",
        }
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, SslTaskKind::MimDiscrete | SslTaskKind::JigsawDiscrete)
    }

    pub fn uses_ratio(self) -> bool {
        self != SslTaskKind::Reconstruction
    }
}

impl fmt::Display for SslTaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SslTaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SslTaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ssl task `{s}`")))
    }
}

/// Maps image patches to discrete token ids in `[0, vocabulary_size)`.
pub trait VisualTokenizer: Send + Sync {
    fn vocabulary_size(&self) -> usize;
    fn encode(&self, patches: &Patches) -> Vec<usize>;
}

/// Uniform quantizer over the mean color of each patch. With `levels` bins per
/// channel the vocabulary has `levels^channels` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColorQuantizer {
    levels: usize,
    channels: usize,
}

impl ColorQuantizer {
    pub fn new(levels: usize, channels: usize) -> Result<Self> {
        if levels == 0 || channels == 0 {
            return Err(Error::Config(
                "quantizer needs at least one level and one channel".into(),
            ));
        }
        Ok(Self { levels, channels })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }
}

impl Default for ColorQuantizer {
    /// 8 levels over RGB: 512 tokens.
    fn default() -> Self {
        Self {
            levels: 8,
            channels: 3,
        }
    }
}

impl VisualTokenizer for ColorQuantizer {
    fn vocabulary_size(&self) -> usize {
        self.levels.pow(self.channels as u32)
    }

    fn encode(&self, patches: &Patches) -> Vec<usize> {
        let plane = patches.size() * patches.size();
        (0..patches.count())
            .map(|p| {
                let patch = patches.patch(p);
                let mut id = 0;
                let mut stride = 1;
                for c in 0..self.channels.min(patches.channels()) {
                    let sum: f64 = patch[c * plane..(c + 1) * plane]
                        .iter()
                        .map(|&v| v as f64)
                        .sum();
                    let mean = (sum / plane as f64).clamp(0.0, 1.0);
                    let bin = (libm::floor(mean * self.levels as f64) as usize).min(self.levels - 1);
                    id += bin * stride;
                    stride *= self.levels;
                }
                id
            })
            .collect()
    }
}

#[derive(Clone)]
pub struct SslTaskConfig {
    pub kind: SslTaskKind,
    /// Fraction of patches masked or shuffled; ignored for reconstruction.
    pub ratio: f64,
    pub tokenizer: Option<Arc<dyn VisualTokenizer>>,
}

impl fmt::Debug for SslTaskConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SslTaskConfig")
            .field("kind", &self.kind)
            .field("ratio", &self.ratio)
            .field(
                "vocabulary_size",
                &self.tokenizer.as_ref().map(|t| t.vocabulary_size()),
            )
            .finish()
    }
}

impl SslTaskConfig {
    /// Task config without a tokenizer; see [`SslTaskConfig::with_tokenizer`].
    pub fn new(kind: SslTaskKind, ratio: f64) -> Self {
        Self {
            kind,
            ratio,
            tokenizer: None,
        }
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn VisualTokenizer>) -> Self {
        self.tokenizer = Some(tokenizer);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_ratio() {
            check_ratio(self.ratio)?;
        }
        match (self.kind, &self.tokenizer) {
            (SslTaskKind::MimDiscrete, None) => Err(Error::Config(
                "mim_discrete requires a visual tokenizer".into(),
            )),
            (SslTaskKind::MimDiscrete, Some(t)) if t.vocabulary_size() == 0 => {
                Err(Error::Config("tokenizer vocabulary is empty".into()))
            }
            (kind, Some(_)) if kind != SslTaskKind::MimDiscrete => Err(Error::Config(format!(
                "{kind} does not take a visual tokenizer"
            ))),
            _ => Ok(()),
        }
    }

    /// Width of the per-token prediction the head must emit for this task.
    pub fn head_output_dim(&self, grid: &PatchGrid, channels: usize) -> Result<usize> {
        self.validate()?;
        Ok(match self.kind {
            SslTaskKind::JigsawDiscrete => grid.num_patches(),
            SslTaskKind::MimDiscrete => self
                .tokenizer
                .as_ref()
                .map(|t| t.vocabulary_size())
                .unwrap_or_default(),
            _ => channels * grid.patch_size() * grid.patch_size(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SslTarget {
    /// Clean image for the continuous tasks.
    Pixels(Image),
    /// One class label per entry of `loss_indices`.
    Labels { labels: Vec<usize>, num_classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslSample {
    pub kind: SslTaskKind,
    pub input_image: Image,
    pub target: SslTarget,
    /// Patches where the loss applies, ascending.
    pub loss_indices: Vec<usize>,
    pub permutation: Option<PatchPermutation>,
}

pub fn make_reconstruction(image: &Image, grid: &PatchGrid) -> Result<SslSample> {
    extract_patches(image, grid)?;
    Ok(SslSample {
        kind: SslTaskKind::Reconstruction,
        input_image: image.clone(),
        target: SslTarget::Pixels(image.clone()),
        loss_indices: (0..grid.num_patches()).collect(),
        permutation: None,
    })
}

/// Selects patches and overwrites them with the image's per-channel mean.
fn mask_with_mean<R: Rng + ?Sized>(
    image: &Image,
    grid: &PatchGrid,
    ratio: f64,
    rng: &mut R,
) -> Result<(Image, Vec<usize>)> {
    let mut patches = extract_patches(image, grid)?;
    let selection = sample_selection(grid, ratio, rng)?;
    let means = image.channel_means();
    let plane = grid.patch_size() * grid.patch_size();
    for &p in selection.indices() {
        for (c, chunk) in patches.patch_mut(p).chunks_mut(plane).enumerate() {
            chunk.fill(means[c]);
        }
    }
    Ok((reassemble_patches(&patches, grid)?, selection.indices().to_vec()))
}

pub fn make_mim_continuous<R: Rng + ?Sized>(
    image: &Image,
    grid: &PatchGrid,
    ratio: f64,
    rng: &mut R,
) -> Result<SslSample> {
    let (input_image, loss_indices) = mask_with_mean(image, grid, ratio, rng)?;
    Ok(SslSample {
        kind: SslTaskKind::MimContinuous,
        input_image,
        target: SslTarget::Pixels(image.clone()),
        loss_indices,
        permutation: None,
    })
}

pub fn make_mim_discrete<R: Rng + ?Sized>(
    image: &Image,
    grid: &PatchGrid,
    ratio: f64,
    tokenizer: Option<&dyn VisualTokenizer>,
    rng: &mut R,
) -> Result<SslSample> {
    let tokenizer = tokenizer
        .ok_or_else(|| Error::Config("mim_discrete requires a visual tokenizer".into()))?;
    let (input_image, loss_indices) = mask_with_mean(image, grid, ratio, rng)?;
    let original = extract_patches(image, grid)?;
    let labels = tokenizer.encode(&original.select(&loss_indices));
    Ok(SslSample {
        kind: SslTaskKind::MimDiscrete,
        input_image,
        target: SslTarget::Labels {
            labels,
            num_classes: tokenizer.vocabulary_size(),
        },
        loss_indices,
        permutation: None,
    })
}

fn shuffle_patches<R: Rng + ?Sized>(
    image: &Image,
    grid: &PatchGrid,
    ratio: f64,
    rng: &mut R,
) -> Result<(Image, PatchPermutation)> {
    let patches = extract_patches(image, grid)?;
    let selection = sample_selection(grid, ratio, rng)?;
    let permutation = sample_permutation(&selection, rng);
    let shuffled = reassemble_patches(&permutation.apply(&patches)?, grid)?;
    Ok((shuffled, permutation))
}

pub fn make_jigsaw_continuous<R: Rng + ?Sized>(
    image: &Image,
    grid: &PatchGrid,
    ratio: f64,
    rng: &mut R,
) -> Result<SslSample> {
    let (input_image, permutation) = shuffle_patches(image, grid, ratio, rng)?;
    Ok(SslSample {
        kind: SslTaskKind::JigsawContinuous,
        input_image,
        target: SslTarget::Pixels(image.clone()),
        loss_indices: permutation.selection().indices().to_vec(),
        permutation: Some(permutation),
    })
}

/// Labels live in the full grid-index space: the patch now at slot `j` is
/// labelled with the grid index it was taken from.
pub fn make_jigsaw_discrete<R: Rng + ?Sized>(
    image: &Image,
    grid: &PatchGrid,
    ratio: f64,
    rng: &mut R,
) -> Result<SslSample> {
    let (input_image, permutation) = shuffle_patches(image, grid, ratio, rng)?;
    Ok(SslSample {
        kind: SslTaskKind::JigsawDiscrete,
        input_image,
        target: SslTarget::Labels {
            labels: permutation.source_indices(),
            num_classes: grid.num_patches(),
        },
        loss_indices: permutation.selection().indices().to_vec(),
        permutation: Some(permutation),
    })
}

pub fn make_sample<R: Rng + ?Sized>(
    image: &Image,
    grid: &PatchGrid,
    config: &SslTaskConfig,
    rng: &mut R,
) -> Result<SslSample> {
    config.validate()?;
    match config.kind {
        SslTaskKind::Reconstruction => make_reconstruction(image, grid),
        SslTaskKind::MimContinuous => make_mim_continuous(image, grid, config.ratio, rng),
        SslTaskKind::MimDiscrete => {
            make_mim_discrete(image, grid, config.ratio, config.tokenizer.as_deref(), rng)
        }
        SslTaskKind::JigsawContinuous => make_jigsaw_continuous(image, grid, config.ratio, rng),
        SslTaskKind::JigsawDiscrete => make_jigsaw_discrete(image, grid, config.ratio, rng),
    }
}

/// Row-major `rows x classes` logits, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub classes: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn new(rows: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * classes {
            return Err(Error::Shape(format!(
                "{} logits for {rows}x{classes}",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            classes,
            data,
        })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.classes..(r + 1) * self.classes]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SslPrediction {
    Pixels(Image),
    Logits(Logits),
}

/// `-log softmax(row)[label]`, computed stably in `f64`.
pub fn cross_entropy(row: &[f32], label: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = row.iter().map(|&v| libm::exp(v as f64 - max)).sum();
    max + libm::log(sum) - row[label] as f64
}

fn shape_error(what: String) -> Error {
    Error::Shape(what)
}

/// Loss of a prediction against a sample, restricted to `loss_indices`.
///
/// Continuous tasks use the mean absolute pixel error over the loss patches;
/// discrete tasks use the mean cross-entropy over the loss patches. An empty
/// loss set scores zero.
pub fn ssl_loss(prediction: &SslPrediction, sample: &SslSample, grid: &PatchGrid) -> Result<f64> {
    match (prediction, &sample.target) {
        (SslPrediction::Pixels(pred), SslTarget::Pixels(target)) => {
            if pred.shape() != target.shape() {
                return Err(shape_error(format!(
                    "prediction {:?} vs target {:?}",
                    pred.shape(),
                    target.shape()
                )));
            }
            if sample.loss_indices.is_empty() {
                return Ok(0.0);
            }
            let pred = extract_patches(pred, grid)?;
            let target = extract_patches(target, grid)?;
            let mut sum = 0.0f64;
            for &p in &sample.loss_indices {
                sum += pred
                    .patch(p)
                    .iter()
                    .zip(target.patch(p))
                    .map(|(&a, &b)| (a as f64 - b as f64).abs())
                    .sum::<f64>();
            }
            Ok(sum / (sample.loss_indices.len() * pred.patch_len()) as f64)
        }
        (
            SslPrediction::Logits(logits),
            SslTarget::Labels {
                labels,
                num_classes,
            },
        ) => {
            if logits.rows != grid.num_patches() || logits.classes != *num_classes {
                return Err(shape_error(format!(
                    "logits {}x{} but expected {}x{num_classes}",
                    logits.rows,
                    logits.classes,
                    grid.num_patches()
                )));
            }
            if labels.len() != sample.loss_indices.len() {
                return Err(Error::Contract(
                    "one label per loss patch is required".into(),
                ));
            }
            if sample.loss_indices.is_empty() {
                return Ok(0.0);
            }
            let sum: f64 = sample
                .loss_indices
                .iter()
                .zip(labels)
                .map(|(&p, &label)| cross_entropy(logits.row(p), label))
                .sum();
            Ok(sum / labels.len() as f64)
        }
        _ => Err(shape_error(format!(
            "prediction kind does not match the {} target",
            sample.kind
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchgrid::{compute_grid, PatchSelection};
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
        Image::new(3, h, w, data).unwrap()
    }

    fn patch_differs(a: &Patches, b: &Patches, p: usize) -> bool {
        a.patch(p) != b.patch(p)
    }

    #[test]
    fn task_names_round_trip() {
        for kind in SslTaskKind::ALL {
            assert_eq!(kind.name().parse::<SslTaskKind>().unwrap(), kind);
        }
        assert!("rotation".parse::<SslTaskKind>().is_err());
    }

    #[test]
    fn reconstruction_is_identity_with_full_loss_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = compute_grid(32, 32, 8).unwrap();
        let img = random_image(&mut rng, 32, 32);
        let s = make_reconstruction(&img, &g).unwrap();
        assert_eq!(s.input_image, img);
        assert_eq!(s.target, SslTarget::Pixels(img.clone()));
        assert_eq!(s.loss_indices, (0..16).collect::<Vec<_>>());
        let perfect = SslPrediction::Pixels(img.clone());
        assert_eq!(ssl_loss(&perfect, &s, &g).unwrap(), 0.0);

        let pred = random_image(&mut rng, 32, 32);
        let direct: f64 = pred
            .data()
            .iter()
            .zip(img.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / img.data().len() as f64;
        let loss = ssl_loss(&SslPrediction::Pixels(pred), &s, &g).unwrap();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn mim_ratio_zero_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = compute_grid(32, 32, 8).unwrap();
        let img = random_image(&mut rng, 32, 32);
        let s = make_mim_continuous(&img, &g, 0.0, &mut rng).unwrap();
        assert_eq!(s.input_image, img);
        assert!(s.loss_indices.is_empty());
        let junk = SslPrediction::Pixels(random_image(&mut rng, 32, 32));
        assert_eq!(ssl_loss(&junk, &s, &g).unwrap(), 0.0);
    }

    #[test]
    fn mim_full_mask_of_constant_image_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = compute_grid(32, 32, 8).unwrap();
        let img = Image::filled(3, 32, 32, 0.3);
        let s = make_mim_continuous(&img, &g, 1.0, &mut rng).unwrap();
        assert!(s.input_image.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert_eq!(s.loss_indices.len(), 16);
    }

    #[test]
    fn mim_half_mask_at_full_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = compute_grid(512, 512, 32).unwrap();
        let img = random_image(&mut rng, 512, 512);
        let s = make_mim_continuous(&img, &g, 0.5, &mut rng).unwrap();
        assert_eq!(s.loss_indices.len(), 128);
        let a = extract_patches(&s.input_image, &g).unwrap();
        let b = extract_patches(&img, &g).unwrap();
        let mask = PatchSelection::from_indices(g, s.loss_indices.clone(), 0.5)
            .unwrap()
            .mask();
        let mut differing = 0;
        for (p, &selected) in mask.iter().enumerate() {
            if selected {
                differing += usize::from(patch_differs(&a, &b, p));
            } else {
                assert!(!patch_differs(&a, &b, p));
            }
        }
        assert_eq!(differing, 128);
    }

    #[test]
    fn mim_discrete_requires_tokenizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = compute_grid(32, 32, 8).unwrap();
        let img = random_image(&mut rng, 32, 32);
        assert!(matches!(
            make_mim_discrete(&img, &g, 0.5, None, &mut rng),
            Err(Error::Config(_))
        ));
        let cfg = SslTaskConfig::new(SslTaskKind::MimDiscrete, 0.5);
        assert!(matches!(make_sample(&img, &g, &cfg, &mut rng), Err(Error::Config(_))));
        let bad = SslTaskConfig::new(SslTaskKind::JigsawContinuous, 0.5)
            .with_tokenizer(Arc::new(ColorQuantizer::default()));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mim_discrete_single_token_vocabulary() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = compute_grid(32, 32, 8).unwrap();
        let img = random_image(&mut rng, 32, 32);
        let q = ColorQuantizer::new(1, 3).unwrap();
        assert_eq!(q.vocabulary_size(), 1);
        let s = make_mim_discrete(&img, &g, 0.5, Some(&q), &mut rng).unwrap();
        let SslTarget::Labels { labels, .. } = &s.target else {
            panic!("expected labels")
        };
        assert!(labels.iter().all(|&l| l == 0));
        let uniform = SslPrediction::Logits(Logits::new(16, 1, vec![0.0; 16]).unwrap());
        assert_eq!(ssl_loss(&uniform, &s, &g).unwrap(), 0.0);
    }

    #[test]
    fn quantizer_is_deterministic_and_in_range() {
        let q = ColorQuantizer::default();
        assert_eq!(q.vocabulary_size(), 512);
        let mut data = vec![0.2f32; 3 * 4 * 4];
        data.extend(vec![0.2f32; 3 * 4 * 4]);
        data.extend(vec![1.0f32; 3 * 4 * 4]);
        let p = Patches::new(3, 3, 4, data).unwrap();
        let ids = q.encode(&p);
        assert_eq!(ids[0], ids[1]);
        // 0.2 * 8 = 1.6 -> bin 1 in each channel
        assert_eq!(ids[0], 1 + 8 + 64);
        assert_eq!(ids[2], 511);
    }

    #[test]
    fn mim_discrete_targets_match_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = compute_grid(64, 64, 16).unwrap();
        let img = random_image(&mut rng, 64, 64);
        let q = ColorQuantizer::new(4, 3).unwrap();
        let s = make_mim_discrete(&img, &g, 0.5, Some(&q), &mut rng).unwrap();
        let all = q.encode(&extract_patches(&img, &g).unwrap());
        let expected: Vec<usize> = s.loss_indices.iter().map(|&p| all[p]).collect();
        assert_eq!(
            s.target,
            SslTarget::Labels {
                labels: expected,
                num_classes: 64
            }
        );
    }

    #[test]
    fn jigsaw_swap_of_two_patches() {
        let g = compute_grid(16, 16, 8).unwrap();
        let mut img = Image::zeros(3, 16, 16);
        for p in 0..4 {
            let (r, c) = g.position(p);
            for ch in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        img.set(ch, r * 8 + y, c * 8 + x, p as f32 / 10.0);
                    }
                }
            }
        }
        // ratio 0.5 of 4 patches selects two; the only non-identity bijection swaps them
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = make_jigsaw_continuous(&img, &g, 0.5, &mut rng).unwrap();
        let (a, b) = (s.loss_indices[0], s.loss_indices[1]);
        let orig = extract_patches(&img, &g).unwrap();
        let inp = extract_patches(&s.input_image, &g).unwrap();
        assert_eq!(inp.patch(a), orig.patch(b));
        assert_eq!(inp.patch(b), orig.patch(a));
        for p in (0..4).filter(|&p| p != a && p != b) {
            assert_eq!(inp.patch(p), orig.patch(p));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = make_jigsaw_discrete(&img, &g, 0.5, &mut rng).unwrap();
        assert_eq!(
            d.target,
            SslTarget::Labels {
                labels: vec![b, a],
                num_classes: 4
            }
        );
    }

    #[test]
    fn jigsaw_ratio_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = compute_grid(32, 32, 8).unwrap();
        let img = random_image(&mut rng, 32, 32);
        let s = make_jigsaw_continuous(&img, &g, 0.0, &mut rng).unwrap();
        assert_eq!(s.input_image, img);
        assert!(s.loss_indices.is_empty());
    }

    #[test]
    fn jigsaw_inverse_restores_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = compute_grid(64, 64, 8).unwrap();
        let img = random_image(&mut rng, 64, 64);
        let s = make_jigsaw_continuous(&img, &g, 0.5, &mut rng).unwrap();
        let perm = s.permutation.as_ref().unwrap();
        assert_eq!(perm.inverse().apply_to_image(&s.input_image).unwrap(), img);
    }

    #[test]
    fn jigsaw_discrete_labels_by_brute_force_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = compute_grid(64, 64, 8).unwrap();
        let img = random_image(&mut rng, 64, 64);
        let s = make_jigsaw_discrete(&img, &g, 0.5, &mut rng).unwrap();
        let perm = s.permutation.as_ref().unwrap();
        let idx = perm.selection().indices();
        let labels: Vec<usize> = (0..idx.len())
            .map(|slot| {
                let src = (0..idx.len())
                    .find(|&i| perm.mapping()[i] == slot)
                    .unwrap();
                idx[src]
            })
            .collect();
        let SslTarget::Labels { labels: stored, .. } = &s.target else {
            panic!("expected labels")
        };
        assert_eq!(&labels, stored);

        // a confident predictor of the true position scores zero
        let mut data = vec![-1e4f32; 64 * 64];
        for (&p, &l) in s.loss_indices.iter().zip(stored) {
            data[p * 64 + l] = 1e4;
        }
        let pred = SslPrediction::Logits(Logits::new(64, 64, data).unwrap());
        assert_eq!(ssl_loss(&pred, &s, &g).unwrap(), 0.0);
    }

    #[test]
    fn hand_built_two_patch_mean() {
        let g = compute_grid(1, 2, 1).unwrap();
        let img = Image::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let sample = SslSample {
            kind: SslTaskKind::MimContinuous,
            input_image: img.clone(),
            target: SslTarget::Pixels(img),
            loss_indices: vec![0, 1],
            permutation: None,
        };
        let pred = SslPrediction::Pixels(Image::new(1, 1, 2, vec![0.7, 0.1]).unwrap());
        let loss = ssl_loss(&pred, &sample, &g).unwrap();
        assert!((loss - 0.3).abs() < 1e-7);
    }

    #[test]
    fn perturbing_unmasked_prediction_does_not_change_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = compute_grid(32, 32, 8).unwrap();
        let img = random_image(&mut rng, 32, 32);
        let s = make_mim_continuous(&img, &g, 0.5, &mut rng).unwrap();
        let pred = random_image(&mut rng, 32, 32);
        let base = ssl_loss(&SslPrediction::Pixels(pred.clone()), &s, &g).unwrap();
        let mask = PatchSelection::from_indices(g, s.loss_indices.clone(), 0.5)
            .unwrap()
            .mask();
        let mut patches = extract_patches(&pred, &g).unwrap();
        for p in (0..16).filter(|&p| !mask[p]) {
            patches.patch_mut(p).iter_mut().for_each(|v| *v += 3.0);
        }
        let moved = reassemble_patches(&patches, &g).unwrap();
        assert_eq!(ssl_loss(&SslPrediction::Pixels(moved), &s, &g).unwrap(), base);
    }

    #[test]
    fn mismatched_prediction_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = compute_grid(32, 32, 8).unwrap();
        let img = random_image(&mut rng, 32, 32);
        let s = make_jigsaw_discrete(&img, &g, 0.5, &mut rng).unwrap();
        let wrong = SslPrediction::Pixels(img.clone());
        assert!(matches!(ssl_loss(&wrong, &s, &g), Err(Error::Shape(_))));
        let narrow = SslPrediction::Logits(Logits::new(16, 3, vec![0.0; 48]).unwrap());
        assert!(matches!(ssl_loss(&narrow, &s, &g), Err(Error::Shape(_))));
    }

    #[test]
    fn head_widths() {
        let g = compute_grid(512, 512, 32).unwrap();
        let px = SslTaskConfig::new(SslTaskKind::MimContinuous, 0.5);
        assert_eq!(px.head_output_dim(&g, 3).unwrap(), 3 * 32 * 32);
        let jd = SslTaskConfig::new(SslTaskKind::JigsawDiscrete, 0.5);
        assert_eq!(jd.head_output_dim(&g, 3).unwrap(), 256);
        let md = SslTaskConfig::new(SslTaskKind::MimDiscrete, 0.5)
            .with_tokenizer(Arc::new(ColorQuantizer::default()) as Arc<dyn VisualTokenizer>);
        assert_eq!(md.head_output_dim(&g, 3).unwrap(), 512);
    }
}

//! Seeded shapes-on-noise detection dataset.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ssldetr_core::boxes::iou;
use ssldetr_core::{BBox, Image};

use super::{Annotation, ClassInfo, DetectionDataset, ImageRecord, ImageSource};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether pixel `(x, y)` of an `s x s` cell belongs to the shape,
    /// judged at the pixel center. Every shape touches all four cell edges.
    pub fn covers(self, x: usize, y: usize, s: usize) -> bool {
        let (px, py, half) = (x as f64 + 0.5, y as f64 + 0.5, s as f64 / 2.0);
        match self {
            Shape::Square => true,
            Shape::Circle => (px - half).powi(2) + (py - half).powi(2) <= half * half,
            Shape::Triangle => (px - half).abs() <= (y as f64 + 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub image_size: usize,
    /// Uses the first `num_classes` of circle, square, triangle.
    pub num_classes: usize,
    /// Inclusive `[min, max]` object count.
    pub objects_per_image: [usize; 2],
    /// Inclusive `[min, max]` side length in pixels.
    pub object_size: [usize; 2],
    /// Amplitude of the uniform background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_images: 500,
            image_size: 128,
            num_classes: 3,
            objects_per_image: [1, 3],
            object_size: [16, 48],
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}.{f}");
        if !(1..=Shape::ALL.len()).contains(&self.num_classes) {
            return Err(LabError::config(field("num_classes"), "must be between 1 and 3"));
        }
        let [lo, hi] = self.objects_per_image;
        if lo > hi {
            return Err(LabError::config(field("objects_per_image"), "min exceeds max"));
        }
        let [smin, smax] = self.object_size;
        if smin == 0 || smin > smax || smax > self.image_size {
            return Err(LabError::config(
                field("object_size"),
                format!("[{smin}, {smax}] does not fit a {} pixel image", self.image_size),
            ));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(LabError::config(field("noise"), "must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Paints `shape` into the `size x size` cell at `(x0, y0)` and returns the
/// tight pixel extent `[x, y, w, h]` of what was painted.
pub fn plant(img: &mut Image, shape: Shape, x0: usize, y0: usize, size: usize, color: [f32; 3]) -> [usize; 4] {
    let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..size {
        for x in 0..size {
            if shape.covers(x, y, size) {
                for (c, &v) in color.iter().enumerate() {
                    img.set(c, y0 + y, x0 + x, v);
                }
                xmin = xmin.min(x);
                ymin = ymin.min(y);
                xmax = xmax.max(x);
                ymax = ymax.max(y);
            }
        }
    }
    [x0 + xmin, y0 + ymin, xmax - xmin + 1, ymax - ymin + 1]
}

fn object_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    loop {
        let c: [f32; 3] = core::array::from_fn(|_| {
            if rng.random_bool(0.5) {
                rng.random_range(0.75..1.0)
            } else {
                rng.random_range(0.0..0.25)
            }
        });
        // reject near-gray colors that vanish into the background
        let spread = c.iter().cloned().fold(f32::MIN, f32::max) - c.iter().cloned().fold(f32::MAX, f32::min);
        let mean = c.iter().sum::<f32>() / 3.0;
        if spread > 0.5 || (mean - 0.5).abs() > 0.3 {
            return c;
        }
    }
}

/// Generates the dataset described by `config`. The same config always
/// produces the same pixels and annotations.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<DetectionDataset> {
    config.validate("synthetic")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.image_size;
    let shapes = &Shape::ALL[..config.num_classes];
    let mut images = Vec::with_capacity(config.num_images);
    let mut annotations = Vec::with_capacity(config.num_images);
    for i in 0..config.num_images {
        let base = rng.random_range(0.35f32..0.65);
        let data = (0..3 * n * n)
            .map(|_| base + config.noise as f32 * rng.random_range(-1.0f32..1.0))
            .collect();
        let mut img = Image::new(3, n, n, data)?;
        let count = rng.random_range(config.objects_per_image[0]..=config.objects_per_image[1]);
        let mut anns: Vec<Annotation> = Vec::with_capacity(count);
        for _ in 0..count {
            let label = rng.random_range(0..shapes.len());
            let size = rng.random_range(config.object_size[0]..=config.object_size[1]);
            let color = object_color(&mut rng);
            let mut placed = None;
            for _ in 0..100 {
                let x0 = rng.random_range(0..=n - size);
                let y0 = rng.random_range(0..=n - size);
                let candidate = BBox::from_xywh(
                    x0 as f64 / n as f64,
                    y0 as f64 / n as f64,
                    size as f64 / n as f64,
                    size as f64 / n as f64,
                );
                if anns.iter().all(|a| iou(&a.bbox, &candidate) < 0.1) {
                    placed = Some((x0, y0));
                    break;
                }
            }
            let Some((x0, y0)) = placed else { continue };
            let [x, y, w, h] = plant(&mut img, shapes[label], x0, y0, size, color);
            anns.push(Annotation {
                label,
                bbox: BBox::from_xywh(
                    x as f64 / n as f64,
                    y as f64 / n as f64,
                    w as f64 / n as f64,
                    h as f64 / n as f64,
                ),
                iscrowd: false,
            });
        }
        let id = i as u64 + 1;
        images.push(ImageRecord {
            id,
            file_name: format!("synthetic_{id:06}.png"),
            source: ImageSource::Pixels(Arc::new(img)),
            height: n,
            width: n,
        });
        annotations.push(anns);
    }
    let classes = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| ClassInfo {
            coco_id: i as u64 + 1,
            name: s.name().to_string(),
        })
        .collect();
    Ok(DetectionDataset {
        images,
        annotations,
        classes,
        labeled: true,
    })
}

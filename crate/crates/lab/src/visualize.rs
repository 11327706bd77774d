//! Side-by-side pictures of what the encoder sees and predicts in a pretext
//! task: original | transformed input | prediction.

use std::path::{Path, PathBuf};

use candle_core::{DType, D};
use ssldetr_core::ssl::{make_sample, SslSample, SslTaskConfig};
use ssldetr_core::{Image, PatchGrid};

use crate::data::{write_png, DetectionDataset};
use crate::error::{LabError, Result};
use crate::model::Detector;
use crate::train::{images_to_tensor, load_model_image, sample_rng};

/// White gap between panels, in pixels.
pub const PANEL_GAP: usize = 4;

const HEAT_ANCHORS: [[f32; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.229, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

/// Color of `t` in `[0, 1]` on a dark-purple to yellow ramp.
pub fn heat_color(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) * (HEAT_ANCHORS.len() - 1) as f32;
    let i = t.floor() as usize;
    let u = t - i as f32;
    if u == 0.0 {
        return HEAT_ANCHORS[i];
    }
    let (a, b) = (HEAT_ANCHORS[i], HEAT_ANCHORS[i + 1]);
    [
        a[0] + (b[0] - a[0]) * u,
        a[1] + (b[1] - a[1]) * u,
        a[2] + (b[2] - a[2]) * u,
    ]
}

/// Paints patch `i` of `grid` with the color of `labels[i] / (classes - 1)`.
pub fn label_heat_map(labels: &[usize], num_classes: usize, grid: &PatchGrid) -> Result<Image> {
    if labels.len() != grid.num_patches() {
        return Err(LabError::Data(format!(
            "{} labels for {} patches",
            labels.len(),
            grid.num_patches()
        )));
    }
    let (h, w) = (grid.image_height(), grid.image_width());
    let p = grid.patch_size();
    let denom = num_classes.saturating_sub(1).max(1) as f32;
    let mut img = Image::zeros(3, h, w);
    for (i, &label) in labels.iter().enumerate() {
        let color = heat_color(label as f32 / denom);
        let (r, c) = (i / grid.cols(), i % grid.cols());
        for y in r * p..(r + 1) * p {
            for x in c * p..(c + 1) * p {
                for (ch, v) in color.iter().enumerate() {
                    img.set(ch, y, x, *v);
                }
            }
        }
    }
    Ok(img)
}

/// Places equally tall panels left to right with white gaps.
pub fn compose_row(panels: &[&Image]) -> Result<Image> {
    let first = panels
        .first()
        .ok_or_else(|| LabError::Data("no panels to compose".into()))?;
    let h = first.height();
    if panels.iter().any(|p| p.height() != h || p.channels() != 3) {
        return Err(LabError::Data("panels must be RGB and equally tall".into()));
    }
    let width = panels.iter().map(|p| p.width()).sum::<usize>() + PANEL_GAP * (panels.len() - 1);
    let mut out = Image::filled(3, h, width, 1.0);
    let mut x0 = 0;
    for panel in panels {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..panel.width() {
                    out.set(c, y, x0 + x, panel.get(c, y, x));
                }
            }
        }
        x0 += panel.width() + PANEL_GAP;
    }
    Ok(out)
}

pub struct SslPanels {
    pub original: Image,
    pub input: Image,
    pub prediction: Image,
    pub sample: SslSample,
}

impl SslPanels {
    pub fn compose(&self) -> Result<Image> {
        compose_row(&[&self.original, &self.input, &self.prediction])
    }
}

/// Runs the model's SSL head on one transformed image. Continuous tasks show
/// the predicted pixels clamped to `[0, 1]`; discrete tasks show each patch's
/// most likely label as a heat map.
pub fn ssl_panels(
    model: &Detector,
    image: &Image,
    task: &SslTaskConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<SslPanels> {
    model.check_ssl_task(task)?;
    let grid = model.config().grid()?;
    let sample = make_sample(image, &grid, task, rng)?;
    let pixels = images_to_tensor(std::slice::from_ref(&sample.input_image), model.dtype(), model.device())?;
    let (memory, grid) = model.encode(&pixels)?;
    let pred = model.ssl_forward(&memory, &grid)?;
    let prediction = if task.kind.is_discrete() {
        let classes = pred.dim(D::Minus1)?;
        let labels: Vec<u32> = pred.argmax(D::Minus1)?.squeeze(0)?.to_vec1()?;
        let labels: Vec<usize> = labels.into_iter().map(|l| l as usize).collect();
        label_heat_map(&labels, classes, &grid)?
    } else {
        let (_, c, h, w) = pred.dims4()?;
        let data: Vec<f32> = pred
            .clamp(0.0, 1.0)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?;
        Image::new(c, h, w, data)?
    };
    Ok(SslPanels {
        original: image.clone(),
        input: sample.input_image.clone(),
        prediction,
        sample,
    })
}

/// Writes `ssl_<image id>.png` in `out_dir` for every image of `dataset`;
/// the transform of image `i` uses the same generator as training epoch 0.
pub fn visualize_ssl(
    model: &Detector,
    dataset: &DetectionDataset,
    task: &SslTaskConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if dataset.is_empty() {
        return Err(LabError::Data("no images to visualize".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let size = model.config().image_size;
    let mut written = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let image = load_model_image(dataset, i, size)?;
        let panels = ssl_panels(model, &image, task, &mut sample_rng(seed, 0, i))?;
        let path = out_dir.join(format!("ssl_{:06}.png", dataset.images[i].id));
        write_png(&panels.compose()?, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_color_hits_anchors() {
        assert_eq!(heat_color(0.0), HEAT_ANCHORS[0]);
        assert_eq!(heat_color(1.0), HEAT_ANCHORS[4]);
        assert_eq!(heat_color(0.5), HEAT_ANCHORS[2]);
        assert_eq!(heat_color(-3.0), heat_color(0.0));
    }

    #[test]
    fn heat_map_paints_whole_patches() {
        let grid = PatchGrid::new(8, 8, 4).unwrap();
        let img = label_heat_map(&[0, 1, 2, 3], 4, &grid).unwrap();
        for (i, (y, x)) in [(0, 0), (0, 4), (4, 0), (4, 4)].into_iter().enumerate() {
            let want = heat_color(i as f32 / 3.0);
            for dy in 0..4 {
                for dx in 0..4 {
                    let got = [0, 1, 2].map(|c| img.get(c, y + dy, x + dx));
                    assert_eq!(got, want);
                }
            }
        }
        assert!(label_heat_map(&[0; 3], 4, &grid).is_err());
    }

    #[test]
    fn compose_leaves_white_gaps() {
        let a = Image::filled(3, 2, 3, 0.0);
        let b = Image::filled(3, 2, 1, 0.5);
        let row = compose_row(&[&a, &b]).unwrap();
        assert_eq!(row.shape(), (3, 2, 3 + PANEL_GAP + 1));
        assert_eq!(row.get(0, 1, 2), 0.0);
        assert_eq!(row.get(1, 0, 3), 1.0);
        assert_eq!(row.get(2, 1, 3 + PANEL_GAP), 0.5);
        assert!(compose_row(&[&a, &Image::zeros(3, 3, 1)]).is_err());
    }
}

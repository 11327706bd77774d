//! Channel-major float images.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A `C x H x W` image stored channel-major with raw pixel values
/// (normally in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        let i = self.offset(c, y, x);
        self.data[i] = value;
    }

    /// Mean value of each channel, accumulated in `f64`.
    pub fn channel_means(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        self.data
            .chunks(plane.max(1))
            .take(self.channels)
            .map(|ch| {
                let sum: f64 = ch.iter().map(|&v| v as f64).sum();
                (sum / plane as f64) as f32
            })
            .collect()
    }

    /// Bilinear resampling with half-pixel centers (no corner alignment).
    ///
    /// Resizing to the current size returns the pixels unchanged.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Shape(format!(
                "cannot resize {}x{} to {height}x{width}",
                self.height, self.width
            )));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let ys = sample_axis(self.height, height);
        let xs = sample_axis(self.width, width);
        let mut out = Image::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let top = self.get(c, y0, x0) as f64 * (1.0 - tx) + self.get(c, y0, x1) as f64 * tx;
                    let bottom =
                        self.get(c, y1, x0) as f64 * (1.0 - tx) + self.get(c, y1, x1) as f64 * tx;
                    out.set(c, oy, ox, (top * (1.0 - ty) + bottom * ty) as f32);
                }
            }
        }
        Ok(out)
    }
}

fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(pos) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

//! Axis-aligned boxes in normalized `(cx, cy, w, h)` form.

use alloc::format;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// Top-left origin, width, height (the COCO `bbox` layout).
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self {
            cx: x + 0.5 * w,
            cy: y + 0.5 * h,
            w,
            h,
        }
    }

    pub fn to_xyxy(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.w, self.h]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Scales a normalized box to pixel units.
    pub fn scale(&self, width: f64, height: f64) -> BBox {
        BBox::new(self.cx * width, self.cy * height, self.w * width, self.h * height)
    }

    /// Clips the box to the unit square.
    pub fn clamp_unit(&self) -> BBox {
        let [x0, y0, x1, y1] = self.to_xyxy();
        BBox::from_xyxy(
            x0.clamp(0.0, 1.0),
            y0.clamp(0.0, 1.0),
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.to_xyxy();
    let [bx0, by0, bx1, by1] = b.to_xyxy();
    let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    w * h
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - |C \ (A ∪ B)| / |C|` with `C` the smallest box
/// enclosing both. Zero-area inputs give IoU 0 and, when the enclosure is also
/// empty, GIoU 0.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let [ax0, ay0, ax1, ay1] = a.to_xyxy();
    let [bx0, by0, bx1, by1] = b.to_xyxy();
    let enclosure = (ax1.max(bx1) - ax0.min(bx0)).max(0.0) * (ay1.max(by1) - ay0.min(by0)).max(0.0);
    if enclosure <= 0.0 {
        return iou;
    }
    iou - (enclosure - union) / enclosure
}

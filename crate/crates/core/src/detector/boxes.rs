use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Class labels of the three pollen morphologies, indexed by class id.
pub const CLASS_NAMES: [&str; 3] = ["round", "triangular", "spiky"];

pub fn class_name(id: usize) -> &'static str {
    CLASS_NAMES.get(id).copied().unwrap_or("unknown")
}

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}

/// Axis-aligned box in pixel coordinates, stored as center and extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        BoundingBox::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    /// Positive extents and a non-empty intersection with `[0, width] x [0, height]`.
    pub fn is_valid_in(&self, width: f64, height: f64) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x1() > 0.0
            && self.y1() > 0.0
            && self.x0() < width
            && self.y0() < height
    }

    /// Fully contained in the frame (with `slack` pixels of tolerance).
    pub fn is_inside(&self, width: f64, height: f64, slack: f64) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x0() >= -slack
            && self.y0() >= -slack
            && self.x1() <= width + slack
            && self.y1() <= height + slack
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        iou(self, other)
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU of two `(w, h)` shapes sharing a center.
pub fn shape_iou(w0: f64, h0: f64, w1: f64, h1: f64) -> f64 {
    let inter = w0.min(w1) * h0.min(h1);
    let union = w0 * h0 + w1 * h1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    /// Objectness times class probability.
    pub confidence: f64,
}

/// Orders by confidence, highest first.
pub(crate) fn by_confidence_desc(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
}

/// Per-class greedy non-maximum suppression. A detection is dropped when its
/// IoU with an already kept detection of the same class exceeds
/// `iou_threshold`. The result is sorted by confidence, highest first; equal
/// confidences keep their input order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = detections.to_vec();
    order.sort_by(by_confidence_desc);
    let mut kept: Vec<Detection> = Vec::with_capacity(order.len());
    for d in order {
        let clash = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !clash {
            kept.push(d);
        }
    }
    kept
}

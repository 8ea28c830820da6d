use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

use super::{Anchor, BoundingBox, Detection};

/// Upper bound on the width/height logits before exponentiation.
pub(crate) const MAX_SIZE_LOGIT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub grid: usize,
    pub anchors: usize,
    pub classes: usize,
    pub input_extent: usize,
}

impl GridGeometry {
    pub fn cell(&self) -> f64 {
        self.input_extent as f64 / self.grid as f64
    }

    pub fn values_per_anchor(&self) -> usize {
        5 + self.classes
    }

    pub fn image_len(&self) -> usize {
        self.grid * self.grid * self.anchors * self.values_per_anchor()
    }

    /// Offset of anchor `b` in cell (row `i`, column `j`).
    pub fn slot(&self, i: usize, j: usize, b: usize) -> usize {
        ((i * self.grid + j) * self.anchors + b) * self.values_per_anchor()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax probabilities and the winning class (lowest index on ties).
pub(crate) fn softmax_argmax(logits: &[f64]) -> (Vec<f64>, usize) {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let max = logits[best];
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    (exps.into_iter().map(|e| e / z).collect(), best)
}

/// Box encoded by one anchor slot, in network-input pixels.
pub(crate) fn decode_box(v: &[f64], i: usize, j: usize, anchor: Anchor, cell: f64) -> BoundingBox {
    BoundingBox {
        cx: (sigmoid(v[0]) + j as f64) * cell,
        cy: (sigmoid(v[1]) + i as f64) * cell,
        w: anchor.w * v[2].min(MAX_SIZE_LOGIT).exp() * cell,
        h: anchor.h * v[3].min(MAX_SIZE_LOGIT).exp() * cell,
    }
}

/// Turns one image's raw grid (`S x S x B x (5 + C)` values) into detections
/// with confidence `sigmoid(to) * max softmax(class logits)` at or above
/// `conf_threshold`. Boxes are in network-input pixels.
pub fn decode<T: Scalar>(
    raw: &[T],
    geom: &GridGeometry,
    anchors: &[Anchor],
    conf_threshold: f64,
) -> Vec<Detection> {
    assert_eq!(raw.len(), geom.image_len(), "raw grid length");
    assert_eq!(anchors.len(), geom.anchors, "anchor count");
    let cell = geom.cell();
    let mut out = Vec::new();
    let mut v = vec![0.0f64; geom.values_per_anchor()];
    for i in 0..geom.grid {
        for j in 0..geom.grid {
            for (b, &anchor) in anchors.iter().enumerate() {
                let at = geom.slot(i, j, b);
                for (dst, src) in v.iter_mut().zip(&raw[at..at + geom.values_per_anchor()]) {
                    *dst = src.as_f64();
                }
                let objectness = sigmoid(v[4]);
                if objectness < conf_threshold {
                    continue;
                }
                let (probs, class_id) = softmax_argmax(&v[5..]);
                let confidence = (objectness * probs[class_id]).clamp(0.0, 1.0);
                if confidence >= conf_threshold {
                    out.push(Detection {
                        bbox: decode_box(&v, i, j, anchor, cell),
                        class_id,
                        confidence,
                    });
                }
            }
        }
    }
    out
}

/// Decodes every image of an `[N, S, S, B, 5 + C]` prediction tensor.
pub fn decode_batch<T: Scalar>(
    raw: &Tensor<T>,
    geom: &GridGeometry,
    anchors: &[Anchor],
    conf_threshold: f64,
) -> Vec<Vec<Detection>> {
    raw.data()
        .chunks(geom.image_len())
        .map(|img| decode(img, geom, anchors, conf_threshold))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> GridGeometry {
        GridGeometry {
            grid: 13,
            anchors: 1,
            classes: 3,
            input_extent: 416,
        }
    }

    #[test]
    fn zero_offsets_land_mid_cell_with_anchor_size() {
        let g = geom();
        let mut raw = vec![0.0f32; g.image_len()];
        raw[4] = 20.0; // objectness ~ 1 in cell (0, 0)
        raw[5] = 10.0; // class 0 dominant
        let anchors = [Anchor { w: 1.5, h: 0.75 }];
        let dets = decode(&raw, &g, &anchors, 0.5);
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        assert!((b.cx - 16.0).abs() < 1e-9 && (b.cy - 16.0).abs() < 1e-9);
        assert!((b.w - 48.0).abs() < 1e-9 && (b.h - 24.0).abs() < 1e-9);
        assert_eq!(dets[0].class_id, 0);
    }

    #[test]
    fn uniform_logits_give_third_probability_and_lowest_class() {
        let (p, c) = softmax_argmax(&[0.3, 0.3, 0.3]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(c, 0);
    }

    #[test]
    fn strongly_negative_objectness_yields_nothing() {
        let g = geom();
        let mut raw = vec![3.0f32; g.image_len()];
        for s in raw.chunks_mut(8) {
            s[4] = -1e4;
        }
        assert!(decode(&raw, &g, &[Anchor { w: 1.0, h: 1.0 }], 1e-6).is_empty());
    }
}

use serde::{Deserialize, Serialize};

use crate::detector::decode::{decode_box, sigmoid};
use crate::detector::{BoundingBox, GridGeometry};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

use super::TargetGrid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
        }
    }
}

/// Loss terms averaged over the batch. `coord_term` and `noobj_term` already
/// include their weights, so `total` is the plain sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub coord_term: f64,
    pub obj_term: f64,
    pub noobj_term: f64,
    pub class_term: f64,
}

impl LossBreakdown {
    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("coord_term", self.coord_term),
            ("obj_term", self.obj_term),
            ("noobj_term", self.noobj_term),
            ("class_term", self.class_term),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("loss {name} = {v}"),
                });
            }
        }
        Ok(())
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.coord_term += other.coord_term;
        self.obj_term += other.obj_term;
        self.noobj_term += other.noobj_term;
        self.class_term += other.class_term;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * s,
            coord_term: self.coord_term * s,
            obj_term: self.obj_term * s,
            noobj_term: self.noobj_term * s,
            class_term: self.class_term * s,
        }
    }
}

/// Objectness target for a responsible slot: the IoU between the decoded
/// prediction and its ground truth, unless a fixed value is stored.
fn objectness_target(
    v: &[f64],
    k: usize,
    t: &TargetGrid,
    gt: &BoundingBox,
    fixed: Option<f64>,
) -> f64 {
    fixed.unwrap_or_else(|| {
        let g = &t.geometry;
        let cell_idx = k / g.anchors;
        let (i, j) = (cell_idx / g.grid, cell_idx % g.grid);
        let pred = decode_box(v, i, j, t.anchors[k % g.anchors], g.cell());
        pred.iou(gt)
    })
}

/// Loss value and gradient with respect to the raw predictions of a batch.
/// `raw` holds `N x S x S x B x (5 + C)` values laid out like the network head.
pub fn loss_and_grad<T: Scalar>(
    raw: &[T],
    targets: &[TargetGrid],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::InvalidInput(
            "loss needs at least one target grid".into(),
        ));
    }
    let geom: GridGeometry = targets[0].geometry;
    let per_image = geom.image_len();
    if raw.len() != n * per_image || targets.iter().any(|t| t.geometry != geom) {
        return Err(Error::shape(
            "yolo loss",
            format!(
                "raw has {} values, {} target grids of {} values each",
                raw.len(),
                n,
                per_image
            ),
        ));
    }
    let vpa = geom.values_per_anchor();
    let norm = 1.0 / n as f64;
    let mut out = LossBreakdown::default();
    let mut grad = vec![0.0f64; raw.len()];
    let mut v = vec![0.0f64; vpa];
    for (img, t) in targets.iter().enumerate() {
        for k in 0..geom.grid * geom.grid * geom.anchors {
            let at = img * per_image + k * vpa;
            for (d, s) in v.iter_mut().zip(&raw[at..at + vpa]) {
                *d = s.as_f64();
            }
            let g = &mut grad[at..at + vpa];
            let so = sigmoid(v[4]);
            if t.noobj_mask[k] {
                out.noobj_term += cfg.lambda_noobj * so * so;
                g[4] += cfg.lambda_noobj * 2.0 * so * so * (1.0 - so) * norm;
            }
            let Some(s) = &t.slots[k] else { continue };
            if !t.obj_mask[k] {
                continue;
            }
            // coordinates: squared error on sigmoid offsets and raw log sizes
            let (sx, sy) = (sigmoid(v[0]), sigmoid(v[1]));
            let (ox, oy) = (sigmoid(s.tx), sigmoid(s.ty));
            let lc = cfg.lambda_coord;
            out.coord_term += lc
                * ((sx - ox).powi(2)
                    + (sy - oy).powi(2)
                    + (v[2] - s.tw).powi(2)
                    + (v[3] - s.th).powi(2));
            g[0] += lc * 2.0 * (sx - ox) * sx * (1.0 - sx) * norm;
            g[1] += lc * 2.0 * (sy - oy) * sy * (1.0 - sy) * norm;
            g[2] += lc * 2.0 * (v[2] - s.tw) * norm;
            g[3] += lc * 2.0 * (v[3] - s.th) * norm;

            let target = objectness_target(&v, k, t, &s.gt, s.objectness);
            out.obj_term += (so - target).powi(2);
            g[4] += 2.0 * (so - target) * so * (1.0 - so) * norm;

            let logits = &v[5..];
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let log_z = max + z.ln();
            out.class_term += log_z - logits[s.class_id];
            for (c, l) in logits.iter().enumerate() {
                let p = (l - log_z).exp();
                g[5 + c] += (p - if c == s.class_id { 1.0 } else { 0.0 }) * norm;
            }
        }
    }
    out = out.scaled(norm);
    out.total = out.coord_term + out.obj_term + out.noobj_term + out.class_term;
    out.check()?;
    Ok((out, grad))
}

/// Records the loss on the graph as a scalar node whose gradient flows back
/// into `raw`. The objectness target is treated as a constant.
pub fn yolo_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    raw: Var,
    targets: &[TargetGrid],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let value = g.value(raw);
    let (parts, grad) = loss_and_grad(value.data(), targets, cfg)?;
    let grad = Tensor::new(value.shape(), grad.into_iter().map(T::lit).collect())?;
    let loss = g.fused_scalar(raw, T::lit(parts.total), grad)?;
    Ok((loss, parts))
}

/// Pins every objectness target to the IoU of the given predictions, making
/// the loss a smooth function of `raw` (used by finite-difference checks).
pub fn freeze_objectness<T: Scalar>(raw: &[T], targets: &mut [TargetGrid]) {
    for (img, t) in targets.iter_mut().enumerate() {
        let vpa = t.geometry.values_per_anchor();
        let per_image = t.geometry.image_len();
        let frozen: Vec<(usize, f64)> = t
            .responsible()
            .map(|(k, s)| {
                let at = img * per_image + k * vpa;
                let v: Vec<f64> = raw[at..at + vpa].iter().map(|x| x.as_f64()).collect();
                (k, objectness_target(&v, k, t, &s.gt, None))
            })
            .collect();
        for (k, iou) in frozen {
            if let Some(s) = t.slots[k].as_mut() {
                s.objectness = Some(iou);
            }
        }
    }
}

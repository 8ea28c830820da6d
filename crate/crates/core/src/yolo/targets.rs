use serde::{Deserialize, Serialize};

use crate::detector::{shape_iou, Anchor, BoundingBox, GridGeometry, CLASS_NAMES};
use crate::error::{Error, Result};

/// Offsets are kept strictly inside (0, 1) so their logits stay finite.
const OFFSET_EPS: f64 = 1e-9;

/// Prior boxes overlapping a ground truth above this IoU are not pushed
/// towards "no object".
pub const NOOBJ_IOU_THRESHOLD: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotTarget {
    /// Raw-space targets: logit of the in-cell offsets and log size ratios.
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub class_id: usize,
    pub gt: BoundingBox,
    /// Fixed objectness target. `None` uses the IoU of the current
    /// prediction with `gt`.
    pub objectness: Option<f64>,
}

/// Per-image training targets over the `S x S x B` anchor slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetGrid {
    pub geometry: GridGeometry,
    pub anchors: Vec<Anchor>,
    pub obj_mask: Vec<bool>,
    pub noobj_mask: Vec<bool>,
    pub slots: Vec<Option<SlotTarget>>,
}

impl TargetGrid {
    pub fn empty(geometry: GridGeometry, anchors: &[Anchor]) -> Self {
        let n = geometry.grid * geometry.grid * geometry.anchors;
        TargetGrid {
            geometry,
            anchors: anchors.to_vec(),
            obj_mask: vec![false; n],
            noobj_mask: vec![true; n],
            slots: vec![None; n],
        }
    }

    pub fn slot_index(&self, i: usize, j: usize, b: usize) -> usize {
        (i * self.geometry.grid + j) * self.geometry.anchors + b
    }

    pub fn responsible(&self) -> impl Iterator<Item = (usize, &SlotTarget)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(k, s)| s.as_ref().map(|s| (k, s)))
    }

    pub fn responsible_count(&self) -> usize {
        self.obj_mask.iter().filter(|&&m| m).count()
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
    (p / (1.0 - p)).ln()
}

/// Assigns each ground-truth box (in network-input pixels) to the anchor slot
/// of the cell holding its center whose prior shape overlaps it best. When that
/// slot is already claimed the next best free anchor of the cell is used; a
/// box is dropped only if every anchor of its cell is taken.
pub fn assign_targets(
    gt: &[(BoundingBox, usize)],
    anchors: &[Anchor],
    grid: usize,
    image_extent: usize,
) -> Result<TargetGrid> {
    if anchors.is_empty() || grid == 0 || image_extent == 0 {
        return Err(Error::InvalidConfig("empty anchor set or grid".into()));
    }
    let geometry = GridGeometry {
        grid,
        anchors: anchors.len(),
        classes: CLASS_NAMES.len(),
        input_extent: image_extent,
    };
    assign_with_geometry(gt, anchors, geometry)
}

/// Same as [`assign_targets`] for an arbitrary class count.
pub fn assign_with_geometry(
    gt: &[(BoundingBox, usize)],
    anchors: &[Anchor],
    geometry: GridGeometry,
) -> Result<TargetGrid> {
    let grid = geometry.grid;
    let extent = geometry.input_extent as f64;
    let cell = geometry.cell();
    let mut out = TargetGrid::empty(geometry, anchors);
    for (n, (bbox, class_id)) in gt.iter().enumerate() {
        let inside = |v: f64| (0.0..=extent).contains(&v);
        if !(inside(bbox.cx) && inside(bbox.cy)) || !(bbox.w > 0.0 && bbox.h > 0.0) {
            return Err(Error::InvalidInput(format!(
                "ground-truth box {n} ({bbox:?}) has its center outside the {extent} px frame \
                 or a non-positive extent"
            )));
        }
        if *class_id >= geometry.classes {
            return Err(Error::InvalidInput(format!(
                "ground-truth box {n} has class {class_id}, model has {}",
                geometry.classes
            )));
        }
        let gx = bbox.cx / cell;
        let gy = bbox.cy / cell;
        let j = (gx.floor() as usize).min(grid - 1);
        let i = (gy.floor() as usize).min(grid - 1);
        let (gw, gh) = (bbox.w / cell, bbox.h / cell);

        let mut ranked: Vec<(usize, f64)> = anchors
            .iter()
            .enumerate()
            .map(|(b, a)| (b, shape_iou(gw, gh, a.w, a.h)))
            .collect();
        ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let Some(&(b, _)) = ranked
            .iter()
            .find(|(b, _)| !out.obj_mask[out.slot_index(i, j, *b)])
        else {
            continue;
        };
        let a = anchors[b];
        let k = out.slot_index(i, j, b);
        out.obj_mask[k] = true;
        out.slots[k] = Some(SlotTarget {
            tx: logit(gx - j as f64),
            ty: logit(gy - i as f64),
            tw: (gw / a.w).ln(),
            th: (gh / a.h).ln(),
            class_id: *class_id,
            gt: *bbox,
            objectness: None,
        });
    }
    for i in 0..grid {
        for j in 0..grid {
            let center = ((j as f64 + 0.5) * cell, (i as f64 + 0.5) * cell);
            for (b, a) in anchors.iter().enumerate() {
                let k = out.slot_index(i, j, b);
                if out.obj_mask[k] {
                    out.noobj_mask[k] = false;
                    continue;
                }
                let prior = BoundingBox::new(center.0, center.1, a.w * cell, a.h * cell);
                if gt.iter().any(|(g, _)| g.iou(&prior) > NOOBJ_IOU_THRESHOLD) {
                    out.noobj_mask[k] = false;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::decode;

    fn anchors() -> Vec<Anchor> {
        vec![
            Anchor { w: 1.0, h: 1.0 },
            Anchor { w: 2.0, h: 1.0 },
            Anchor { w: 3.0, h: 3.0 },
        ]
    }

    #[test]
    fn image_center_lands_in_middle_cell() {
        let t = assign_targets(
            &[(BoundingBox::new(208.0, 208.0, 40.0, 40.0), 0)],
            &anchors(),
            13,
            416,
        )
        .unwrap();
        let (k, _) = t.responsible().next().unwrap();
        assert_eq!(k / 3, 6 * 13 + 6);
        assert_eq!(t.responsible_count(), 1);
    }

    #[test]
    fn prior_at_cell_center_is_a_fixed_point() {
        let gt = BoundingBox::new(48.0, 80.0, 64.0, 32.0);
        let t = assign_targets(&[(gt, 1)], &anchors(), 13, 416).unwrap();
        let (k, s) = t.responsible().next().unwrap();
        assert_eq!(k, t.slot_index(2, 1, 1));
        for v in [s.tx, s.ty, s.tw, s.th] {
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn masks_are_disjoint_and_center_outside_is_rejected() {
        let gts = [
            (BoundingBox::new(100.0, 100.0, 30.0, 30.0), 0),
            (BoundingBox::new(102.0, 98.0, 60.0, 30.0), 1),
        ];
        let t = assign_targets(&gts, &anchors(), 13, 416).unwrap();
        assert_eq!(t.responsible_count(), 2);
        assert!(t.obj_mask.iter().zip(&t.noobj_mask).all(|(a, b)| !(a & b)));
        let bad = [(BoundingBox::new(420.0, 10.0, 5.0, 5.0), 0)];
        assert!(assign_targets(&bad, &anchors(), 13, 416).is_err());
    }

    #[test]
    fn decode_of_targets_reproduces_boxes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let anchors = anchors();
        for _ in 0..200 {
            let gt = BoundingBox::new(
                rng.random_range(0.0..416.0),
                rng.random_range(0.0..416.0),
                rng.random_range(8.0..120.0),
                rng.random_range(8.0..120.0),
            );
            let mut geom = GridGeometry {
                grid: 13,
                anchors: 3,
                classes: 3,
                input_extent: 416,
            };
            let t = assign_with_geometry(&[(gt, 2)], &anchors, geom).unwrap();
            let (k, s) = t.responsible().next().unwrap();
            let mut raw = vec![-30.0f64; geom.image_len()];
            let at = k * geom.values_per_anchor();
            raw[at..at + 5].copy_from_slice(&[s.tx, s.ty, s.tw, s.th, 30.0]);
            raw[at + 5 + s.class_id] = 30.0;
            geom.classes = 3;
            let dets = decode(&raw, &geom, &anchors, 0.5);
            assert_eq!(dets.len(), 1);
            let d = dets[0].bbox;
            for (a, b) in [(d.cx, gt.cx), (d.cy, gt.cy), (d.w, gt.w), (d.h, gt.h)] {
                assert!((a - b).abs() < 1e-4, "{d:?} vs {gt:?}");
            }
            assert_eq!(dets[0].class_id, 2);
        }
    }
}

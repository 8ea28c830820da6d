//! Detection matching and the four summary metrics.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{by_confidence_desc, class_id, class_name, BoundingBox, Detection};
use crate::error::{Error, Result};
use crate::io_util::{atomic_write, read_text};
use crate::synth::Annotation;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl MatchCounts {
    pub fn add(&mut self, o: &MatchCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

fn cell_of(b: &BoundingBox, cell: f64, s: usize) -> usize {
    let idx = |v: f64| ((v / cell).floor().max(0.0) as usize).min(s - 1);
    idx(b.cy) * s + idx(b.cx)
}

/// Greedy one-to-one matching of one image's detections against its ground
/// truth. Detections are visited by descending confidence; each takes the
/// highest-IoU free box of its class at or above `iou_threshold`. True
/// negatives are the cells of the `grid` x `grid` partition of the
/// `extent`-pixel frame holding neither a box center nor a detection center.
pub fn match_detections(
    dets: &[Detection],
    gts: &[(BoundingBox, usize)],
    iou_threshold: f64,
    grid: usize,
    extent: f64,
) -> MatchCounts {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| by_confidence_desc(a, b));
    let mut used = vec![false; gts.len()];
    let mut counts = MatchCounts::default();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (k, (g, c)) in gts.iter().enumerate() {
            if used[k] || *c != d.class_id {
                continue;
            }
            let v = d.bbox.iou(g);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        match best {
            Some((k, _)) => {
                used[k] = true;
                counts.tp += 1;
            }
            None => counts.fp += 1,
        }
    }
    counts.fn_ = used.iter().filter(|u| !**u).count() as u64;
    let cell = extent / grid as f64;
    let mut occupied = vec![false; grid * grid];
    for b in gts
        .iter()
        .map(|(b, _)| b)
        .chain(dets.iter().map(|d| &d.bbox))
    {
        occupied[cell_of(b, cell, grid)] = true;
    }
    counts.tn = occupied.iter().filter(|o| !**o).count() as u64;
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Names of metrics whose denominator was zero (reported as 0).
    pub undefined: Undefined,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Undefined {
    pub precision: bool,
    pub sensitivity: bool,
    pub specificity: bool,
    pub f1: bool,
}

impl Rates {
    pub fn from_counts(c: &MatchCounts) -> Self {
        let ratio = |num: u64, den: u64| {
            if den == 0 {
                (0.0, true)
            } else {
                (num as f64 / den as f64, false)
            }
        };
        let (precision, up) = ratio(c.tp, c.tp + c.fp);
        let (sensitivity, us) = ratio(c.tp, c.tp + c.fn_);
        let (specificity, usp) = ratio(c.tn, c.tn + c.fp);
        let (f1, uf) = f1_score(precision, sensitivity);
        Rates {
            precision,
            sensitivity,
            specificity,
            f1,
            undefined: Undefined {
                precision: up,
                sensitivity: us,
                specificity: usp,
                f1: uf,
            },
        }
    }
}

/// Harmonic mean; `(0, true)` when both inputs are zero.
pub fn f1_score(precision: f64, sensitivity: f64) -> (f64, bool) {
    let den = precision + sensitivity;
    if den == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * sensitivity / den, false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub counts: MatchCounts,
    pub rates: Rates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub iou_threshold: f64,
    pub counts: MatchCounts,
    pub rates: Rates,
    pub per_class: Vec<ClassReport>,
}

pub fn compute_metrics(counts: &MatchCounts) -> Rates {
    Rates::from_counts(counts)
}

/// Micro-averaged report over a test set. `detections[i]` belongs to
/// `annotations[i]`. Per-class counts treat every other class as absent, so
/// their true negatives are counted per class.
pub fn evaluate(
    detections: &[Vec<Detection>],
    annotations: &[Annotation],
    iou_threshold: f64,
    grid: usize,
) -> Result<MetricsReport> {
    if detections.len() != annotations.len() {
        return Err(Error::InvalidInput(format!(
            "{} detection lists for {} annotated images",
            detections.len(),
            annotations.len()
        )));
    }
    let mut total = MatchCounts::default();
    let mut per = [MatchCounts::default(); 3];
    for (dets, a) in detections.iter().zip(annotations) {
        if a.width != a.height {
            return Err(Error::Validation {
                image: a.image.clone(),
                msg: "grid cells need a square frame".into(),
            });
        }
        let gts: Vec<(BoundingBox, usize)> = a.boxes.iter().map(|b| (b.bbox, b.class_id)).collect();
        let extent = a.width as f64;
        total.add(&match_detections(dets, &gts, iou_threshold, grid, extent));
        for (c, slot) in per.iter_mut().enumerate() {
            let d: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
            let g: Vec<(BoundingBox, usize)> =
                gts.iter().filter(|(_, k)| *k == c).copied().collect();
            slot.add(&match_detections(&d, &g, iou_threshold, grid, extent));
        }
    }
    Ok(MetricsReport {
        images: annotations.len(),
        iou_threshold,
        counts: total,
        rates: Rates::from_counts(&total),
        per_class: per
            .iter()
            .enumerate()
            .map(|(c, counts)| ClassReport {
                class: class_name(c).to_string(),
                counts: *counts,
                rates: Rates::from_counts(counts),
            })
            .collect(),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}

fn cell(v: f64, undefined: bool) -> String {
    if undefined {
        "   n/a".into()
    } else {
        format!("{v:6.3}")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} images, IoU >= {}", self.images, self.iou_threshold)?;
        writeln!(
            f,
            "{:<12} {:>6} {:>6} {:>6} {:>6} {:>9} {:>11} {:>11} {:>6}",
            "class", "tp", "fp", "fn", "tn", "precision", "sensitivity", "specificity", "f1"
        )?;
        let rows = self
            .per_class
            .iter()
            .map(|c| (c.class.as_str(), &c.counts, &c.rates))
            .chain(std::iter::once(("all", &self.counts, &self.rates)));
        for (name, c, r) in rows {
            let u = &r.undefined;
            writeln!(
                f,
                "{:<12} {:>6} {:>6} {:>6} {:>6} {:>9} {:>11} {:>11} {:>6}",
                name,
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                cell(r.precision, u.precision),
                cell(r.sensitivity, u.sensitivity),
                cell(r.specificity, u.specificity),
                cell(r.f1, u.f1)
            )?;
        }
        Ok(())
    }
}

/// One detection per line: `image_id class_name cx cy w h confidence`, in
/// source-image pixels.
pub fn format_detections(records: &[(String, Vec<Detection>)]) -> String {
    let mut out = String::new();
    for (image, dets) in records {
        for d in dets {
            let b = &d.bbox;
            out.push_str(&format!(
                "{image} {} {} {} {} {} {}\n",
                class_name(d.class_id),
                b.cx,
                b.cy,
                b.w,
                b.h,
                d.confidence
            ));
        }
    }
    out
}

/// Parses a detection record file into per-image lists. Images without
/// detections simply do not appear.
pub fn parse_detections(text: &str) -> Result<Vec<(String, Vec<Detection>)>> {
    let mut out: Vec<(String, Vec<Detection>)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        let err = |msg: String| Error::Parse { line, msg };
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let class =
            class_id(fields[1]).ok_or_else(|| err(format!("unknown class {:?}", fields[1])))?;
        let mut v = [0.0f64; 5];
        for (slot, s) in v.iter_mut().zip(&fields[2..]) {
            *slot = s
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("bad number {s:?}")))?;
        }
        let det = Detection {
            bbox: BoundingBox::new(v[0], v[1], v[2], v[3]),
            class_id: class,
            confidence: v[4],
        };
        match out.last_mut() {
            Some((id, list)) if id == fields[0] => list.push(det),
            _ => match out.iter_mut().find(|(id, _)| id == fields[0]) {
                Some((_, list)) => list.push(det),
                None => out.push((fields[0].to_string(), vec![det])),
            },
        }
    }
    Ok(out)
}

pub fn save_detections(records: &[(String, Vec<Detection>)], path: &Path) -> Result<()> {
    atomic_write(path, format_detections(records).as_bytes())
}

pub fn load_detections(path: &Path) -> Result<Vec<(String, Vec<Detection>)>> {
    parse_detections(&read_text(path)?)
}

/// Aligns loaded detection records with annotations by image id; images
/// with no records get an empty list. Unknown ids are an error.
pub fn align_detections(
    records: Vec<(String, Vec<Detection>)>,
    annotations: &[Annotation],
) -> Result<Vec<Vec<Detection>>> {
    let mut out = vec![Vec::new(); annotations.len()];
    for (id, dets) in records {
        let k = annotations
            .iter()
            .position(|a| a.image == id)
            .ok_or_else(|| Error::Validation {
                image: id.clone(),
                msg: "detections for an image missing from the annotations".into(),
            })?;
        out[k].extend(dets);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, cy: f64, c: usize, conf: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(cx, cy, 20.0, 20.0),
            class_id: c,
            confidence: conf,
        }
    }

    #[test]
    fn exact_detections_are_all_true_positives() {
        let gts = vec![
            (BoundingBox::new(50.0, 50.0, 20.0, 20.0), 0),
            (BoundingBox::new(200.0, 300.0, 20.0, 20.0), 2),
        ];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|(b, c)| Detection {
                bbox: *b,
                class_id: *c,
                confidence: 0.9,
            })
            .collect();
        let m = match_detections(&dets, &gts, 0.5, 13, 416.0);
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (2, 0, 0, 167));
        let none = match_detections(&[], &gts, 0.5, 13, 416.0);
        assert_eq!((none.tp, none.fp, none.fn_), (0, 0, 2));
    }

    #[test]
    fn wrong_class_is_false_positive() {
        let gts = vec![(BoundingBox::new(50.0, 50.0, 20.0, 20.0), 0)];
        let m = match_detections(&[det(50.0, 50.0, 1, 0.9)], &gts, 0.5, 13, 416.0);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn degenerate_counts_flag_undefined() {
        let r = compute_metrics(&MatchCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 169,
        });
        assert_eq!(r.specificity, 1.0);
        assert!(r.undefined.precision && r.undefined.sensitivity && r.undefined.f1);
        let r = compute_metrics(&MatchCounts {
            tp: 2,
            fp: 1,
            fn_: 0,
            tn: 0,
        });
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15 && r.sensitivity == 1.0);
    }

    #[test]
    fn record_text_round_trip() {
        let recs = vec![
            (
                "slide_0001".to_string(),
                vec![det(10.25, 20.5, 2, 0.75), det(1.0 / 3.0, 9.0, 0, 0.5)],
            ),
            ("slide_0002".to_string(), vec![det(7.0, 8.0, 1, 0.6)]),
        ];
        assert_eq!(parse_detections(&format_detections(&recs)).unwrap(), recs);
        assert!(matches!(
            parse_detections("a round 1 2 3\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}

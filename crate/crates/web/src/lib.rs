//! wasm-bindgen bindings behind `www/index.html`.
//!
//! Boxes cross the boundary as flat `f64` arrays, six numbers per box:
//! `cx, cy, w, h, class_id, confidence`.

use pollen_core::auth::{
    dilution_check, distribution_compare, features_from_annotations, train_auth, AuthConfig,
    AuthFeatures, AuthModel, HoneyProfile, DEFAULT_TOLERANCE,
};
use pollen_core::detector::{iou, nms, BoundingBox, Detection};
use pollen_core::synth::{derive_seed, gen_slide, SlideSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const STRIDE: usize = 6;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// A rendered slide and its labels.
#[wasm_bindgen]
pub struct Slide {
    width: u32,
    height: u32,
    rgba: Vec<u8>,
    boxes: Vec<f64>,
}

#[wasm_bindgen]
impl Slide {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Pixels ready for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Ground-truth boxes with confidence 1.
    pub fn boxes(&self) -> Vec<f64> {
        self.boxes.clone()
    }
}

/// Renders slide `seed` with every grain count multiplied by `count_scale`.
#[wasm_bindgen]
pub fn render_slide(seed: u32, count_scale: f64) -> Result<Slide, JsValue> {
    let spec = SlideSpec::default().with_counts_scaled(count_scale);
    let (slide, ann) = gen_slide(&spec, "demo", seed as u64).map_err(js_err)?;
    let img = slide.image;
    let rgba = img
        .data
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect();
    let boxes = ann
        .boxes
        .iter()
        .flat_map(|b| {
            [
                b.bbox.cx,
                b.bbox.cy,
                b.bbox.w,
                b.bbox.h,
                b.class_id as f64,
                1.0,
            ]
        })
        .collect();
    Ok(Slide {
        width: img.width as u32,
        height: img.height as u32,
        rgba,
        boxes,
    })
}

fn unpack(flat: &[f64]) -> Result<Vec<Detection>, JsValue> {
    if !flat.len().is_multiple_of(STRIDE) {
        return Err(js_err(format!(
            "box array length {} is not a multiple of {STRIDE}",
            flat.len()
        )));
    }
    Ok(flat
        .chunks_exact(STRIDE)
        .map(|c| Detection {
            bbox: BoundingBox::new(c[0], c[1], c[2], c[3]),
            class_id: c[4] as usize,
            confidence: c[5],
        })
        .collect())
}

/// Indices of the boxes kept by class-wise NMS, most confident first.
#[wasm_bindgen]
pub fn nms_keep(flat: &[f64], iou_threshold: f64) -> Result<Vec<u32>, JsValue> {
    let dets = unpack(flat)?;
    let kept = nms(&dets, iou_threshold);
    Ok(kept
        .iter()
        .map(|k| {
            dets.iter()
                .position(|d| d == k)
                .expect("kept boxes come from the input") as u32
        })
        .collect())
}

#[wasm_bindgen]
pub fn box_iou(a: &[f64], b: &[f64]) -> Result<f64, JsValue> {
    match (unpack(a)?.as_slice(), unpack(b)?.as_slice()) {
        ([x], [y]) => Ok(iou(&x.bbox, &y.bbox)),
        _ => Err(js_err("expected exactly one box on each side")),
    }
}

#[derive(Serialize)]
struct CheckReport {
    decision: String,
    genuine: bool,
    score: f64,
    density: f64,
    dilution_ratio: f64,
    diluted: bool,
    distance: Option<f64>,
}

/// Authentication network trained on five synthetic samples per profile.
#[wasm_bindgen]
pub struct Authenticator {
    model: AuthModel,
    reference_density: f64,
    reference_counts: [u64; 3],
}

#[wasm_bindgen]
impl Authenticator {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Authenticator, JsValue> {
        let spec = SlideSpec::default();
        let mut samples = Vec::new();
        for (p, profile) in [HoneyProfile::eucalyptus(), HoneyProfile::manuka()]
            .iter()
            .enumerate()
        {
            for i in 0..5 {
                let frames = profile
                    .sample_frames(
                        &spec,
                        10,
                        derive_seed(derive_seed(seed as u64, p as u64), i),
                    )
                    .map_err(js_err)?;
                samples.push((
                    features_from_annotations(&frames).map_err(js_err)?,
                    profile.label.clone(),
                ));
            }
        }
        let (model, _) = train_auth(&samples, &AuthConfig::default()).map_err(js_err)?;
        let genuine: Vec<&AuthFeatures> = samples
            .iter()
            .filter(|(_, l)| *l == model.genuine_label)
            .map(|(f, _)| f)
            .collect();
        let frames: u64 = genuine.iter().map(|f| f.frames).sum();
        let mut reference_counts = [0u64; 3];
        for f in &genuine {
            for (r, c) in reference_counts.iter_mut().zip(f.counts) {
                *r += c;
            }
        }
        Ok(Authenticator {
            model,
            reference_density: reference_counts.iter().sum::<u64>() as f64 / frames as f64,
            reference_counts,
        })
    }

    /// Verdict for grain totals counted over `frames` frames, as JSON.
    pub fn check(
        &self,
        round: u32,
        triangular: u32,
        spiky: u32,
        frames: u32,
    ) -> Result<String, JsValue> {
        let counts = [round as u64, triangular as u64, spiky as u64];
        let f = AuthFeatures::new(counts, frames as u64).map_err(js_err)?;
        let verdict = self.model.authenticate(&f);
        let dilution =
            dilution_check(f.density, self.reference_density, DEFAULT_TOLERANCE).map_err(js_err)?;
        let distance = if f.total() > 0 {
            distribution_compare(&counts, &self.reference_counts).ok()
        } else {
            None
        };
        let report = CheckReport {
            decision: verdict.decision,
            genuine: verdict.genuine,
            score: verdict.score,
            density: f.density,
            dilution_ratio: dilution.ratio,
            diluted: dilution.diluted,
            distance,
        };
        serde_json::to_string(&report).map_err(js_err)
    }
}

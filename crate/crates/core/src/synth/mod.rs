//! Procedural bright-field slide generator.
//!
//! A slide is produced in two passes. [`layout_slide`] draws every object and
//! its label box from the seed; [`render_layout`] paints the layout, blurs it
//! and adds sensor noise. Labels therefore never depend on the pixels.

mod annotations;
mod dataset;
mod shapes;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{BoundingBox, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

pub use annotations::{
    format_annotations, load_annotations, parse_annotations, save_annotations, Annotation,
    LabeledBox,
};
pub use dataset::{
    derive_seed, gen_dataset, load_dataset, read_manifest, DatasetItem, ImageEntry, Manifest,
    ANNOTATIONS_FILE, MANIFEST_FILE,
};
pub use shapes::{coverage, covered_box, Shape, Spike, BOX_PAD};

pub const DEFAULT_SLIDE_EXTENT: usize = 1080;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Round,
    Triangular,
    Spiky,
    Bubble,
}

impl ObjectKind {
    pub fn class_id(self) -> Option<usize> {
        match self {
            ObjectKind::Round => Some(0),
            ObjectKind::Triangular => Some(1),
            ObjectKind::Spiky => Some(2),
            ObjectKind::Bubble => None,
        }
    }

    pub fn from_class(id: usize) -> Self {
        [ObjectKind::Round, ObjectKind::Triangular, ObjectKind::Spiky][id]
    }

    fn name(self) -> &'static str {
        self.class_id().map(|c| CLASS_NAMES[c]).unwrap_or("bubble")
    }
}

/// Inclusive `[min, max]` range.
pub type Span<T> = [T; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideSpec {
    pub extent: usize,
    /// Grains per slide for round, triangular and spiky.
    pub counts: [Span<u32>; 3],
    /// Radius of round grains, circumradius of triangular ones and core
    /// radius of spiky ones, in pixels.
    pub sizes: [Span<f64>; 3],
    pub spike_count: Span<u32>,
    pub spike_length: Span<f64>,
    pub bubbles: Span<u32>,
    pub bubble_radius: Span<f64>,
    pub blur_sigma: f64,
    /// Standard deviation of additive noise in 8-bit levels.
    pub noise: f64,
    pub background: [u8; 3],
    /// Largest IoU allowed between any two placed objects.
    pub overlap_limit: f64,
}

impl Default for SlideSpec {
    fn default() -> Self {
        SlideSpec {
            extent: DEFAULT_SLIDE_EXTENT,
            counts: [[2, 6]; 3],
            sizes: [[20.0, 60.0], [25.0, 55.0], [20.0, 45.0]],
            spike_count: [8, 16],
            spike_length: [10.0, 20.0],
            bubbles: [1, 4],
            bubble_radius: [15.0, 50.0],
            blur_sigma: 1.0,
            noise: 3.0,
            background: [236, 226, 204],
            overlap_limit: 0.2,
        }
    }
}

impl SlideSpec {
    pub fn empty() -> Self {
        SlideSpec {
            counts: [[0, 0]; 3],
            bubbles: [0, 0],
            ..SlideSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let span_u = |name: &str, s: Span<u32>| {
            if s[0] > s[1] {
                Some(format!("{name} range {s:?} is empty"))
            } else {
                None
            }
        };
        let span_f = |name: &str, s: Span<f64>, min: f64| {
            if !(s[0] >= min && s[0] <= s[1] && s[1].is_finite()) {
                Some(format!(
                    "{name} range {s:?} must satisfy {min} <= min <= max"
                ))
            } else {
                None
            }
        };
        let mut problems = Vec::new();
        for (c, name) in CLASS_NAMES.iter().enumerate() {
            problems.extend(span_u(&format!("{name} count"), self.counts[c]));
            problems.extend(span_f(&format!("{name} size"), self.sizes[c], 2.0));
        }
        problems.extend(span_u("spike count", self.spike_count));
        problems.extend(span_f("spike length", self.spike_length, 0.0));
        problems.extend(span_u("bubble count", self.bubbles));
        problems.extend(span_f("bubble radius", self.bubble_radius, 2.0));
        if let Some(p) = problems.into_iter().next() {
            return bad(p);
        }
        if !(0.0..1.0).contains(&self.overlap_limit) {
            return bad(format!(
                "overlap limit {} must lie in [0, 1)",
                self.overlap_limit
            ));
        }
        if !(self.blur_sigma >= 0.0 && self.noise >= 0.0) {
            return bad("blur and noise must be non-negative".into());
        }
        let largest = self.sizes.iter().map(|s| s[1]).fold(0.0, f64::max) + self.spike_length[1];
        if self.extent == 0 || (self.extent as f64) < 2.0 * (largest + 4.0) {
            return bad(format!(
                "extent {} too small for grains of reach {largest}",
                self.extent
            ));
        }
        Ok(())
    }

    /// Same slide with grain counts scaled by `factor` (bounds rounded).
    pub fn with_counts_scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        for c in &mut s.counts {
            *c = [
                (c[0] as f64 * factor).round() as u32,
                (c[1] as f64 * factor).round() as u32,
            ];
        }
        s
    }

    /// Same slide with exact per-class counts and no variation.
    pub fn with_exact_counts(&self, counts: [u32; 3]) -> Self {
        let mut s = self.clone();
        s.counts = counts.map(|n| [n, n]);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub kind: ObjectKind,
    pub cx: f64,
    pub cy: f64,
    pub shape: Shape,
    /// Body color, linear 0..1.
    pub color: [f64; 3],
    /// Interior dots as `(dx, dy, radius)` relative to the center.
    pub speckles: Vec<[f64; 3]>,
    pub bbox: BoundingBox,
}

impl PlacedObject {
    /// Object with default styling for its kind; `None` when the shape covers
    /// no pixel.
    pub fn new(kind: ObjectKind, cx: f64, cy: f64, shape: Shape) -> Option<Self> {
        let bbox = covered_box(&shape, cx, cy)?;
        Some(PlacedObject {
            kind,
            cx,
            cy,
            shape,
            color: base_color(kind),
            speckles: Vec::new(),
            bbox,
        })
    }
}

fn base_color(kind: ObjectKind) -> [f64; 3] {
    match kind {
        ObjectKind::Round => [0.86, 0.70, 0.38],
        ObjectKind::Triangular => [0.78, 0.52, 0.30],
        ObjectKind::Spiky => [0.84, 0.80, 0.42],
        ObjectKind::Bubble => [0.22, 0.22, 0.25],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub extent: usize,
    /// In placement (and painting) order.
    pub objects: Vec<PlacedObject>,
    /// Per-slide illumination tint multiplier.
    pub tint: [f64; 3],
}

impl Layout {
    pub fn new(extent: usize, objects: Vec<PlacedObject>) -> Self {
        Layout {
            extent,
            objects,
            tint: [1.0; 3],
        }
    }

    pub fn annotation(&self, image: &str) -> Annotation {
        let mut boxes = Vec::new();
        let mut bubbles = Vec::new();
        for o in &self.objects {
            match o.kind.class_id() {
                Some(class_id) => boxes.push(LabeledBox {
                    bbox: o.bbox,
                    class_id,
                }),
                None => bubbles.push(o.bbox),
            }
        }
        Annotation {
            image: image.to_string(),
            width: self.extent,
            height: self.extent,
            boxes,
            bubbles,
        }
    }
}

fn draw_shape(kind: ObjectKind, spec: &SlideSpec, rng: &mut ChaCha8Rng) -> Shape {
    let range = |rng: &mut ChaCha8Rng, s: Span<f64>| {
        if s[0] < s[1] {
            rng.random_range(s[0]..=s[1])
        } else {
            s[0]
        }
    };
    match kind {
        ObjectKind::Round => Shape::Disc {
            radius: range(rng, spec.sizes[0]),
        },
        ObjectKind::Triangular => Shape::Triangle {
            circumradius: range(rng, spec.sizes[1]),
            rotation: rng.random_range(0.0..std::f64::consts::TAU),
        },
        ObjectKind::Spiky => {
            let core = range(rng, spec.sizes[2]);
            let n = rng.random_range(spec.spike_count[0]..=spec.spike_count[1]);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let step = std::f64::consts::TAU / n.max(1) as f64;
            let spikes = (0..n)
                .map(|k| Spike {
                    angle: phase + k as f64 * step + rng.random_range(-0.15..=0.15) * step,
                    length: range(rng, spec.spike_length),
                })
                .collect();
            Shape::Spiky { core, spikes }
        }
        ObjectKind::Bubble => Shape::Ring {
            radius: range(rng, spec.bubble_radius),
            thickness: rng.random_range(2.0..=3.5),
        },
    }
}

fn style(obj: &mut PlacedObject, rng: &mut ChaCha8Rng) {
    let jitter = rng.random_range(0.93..=1.05);
    for c in &mut obj.color {
        *c = (*c * jitter + rng.random_range(-0.02..=0.02)).clamp(0.0, 1.0);
    }
    let reach = match &obj.shape {
        Shape::Disc { radius } => 0.8 * radius,
        Shape::Triangle { circumradius, .. } => 0.35 * circumradius,
        Shape::Spiky { core, .. } => 0.7 * core,
        Shape::Ring { .. } => return,
    };
    let n = rng.random_range(6..=18);
    obj.speckles = (0..n)
        .map(|_| {
            let r = reach * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            [r * a.cos(), r * a.sin(), rng.random_range(1.0..=2.5)]
        })
        .collect();
}

/// Draws the objects of one slide. Objects are kept fully inside the frame
/// and no two of them overlap by more than `spec.overlap_limit` in IoU.
pub fn layout_slide(spec: &SlideSpec, seed: u64) -> Result<Layout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds = Vec::new();
    for (c, span) in spec.counts.iter().enumerate() {
        let n = rng.random_range(span[0]..=span[1]);
        kinds.extend(std::iter::repeat_n(ObjectKind::from_class(c), n as usize));
    }
    let nb = rng.random_range(spec.bubbles[0]..=spec.bubbles[1]);
    kinds.extend(std::iter::repeat_n(ObjectKind::Bubble, nb as usize));
    kinds.shuffle(&mut rng);

    let extent = spec.extent as f64;
    let tint = [
        rng.random_range(0.97..=1.02),
        rng.random_range(0.97..=1.02),
        rng.random_range(0.96..=1.01),
    ];
    let mut placed: Vec<PlacedObject> = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let shape = draw_shape(kind, spec, &mut rng);
        let margin = shape.reach() + BOX_PAD + 1.0;
        let mut accepted = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cx = rng.random_range(margin..=extent - margin);
            let cy = rng.random_range(margin..=extent - margin);
            let Some(obj) = PlacedObject::new(kind, cx, cy, shape.clone()) else {
                continue;
            };
            let fits = obj.bbox.is_inside(extent, extent, 0.0)
                && placed
                    .iter()
                    .all(|p| p.bbox.iou(&obj.bbox) <= spec.overlap_limit);
            if fits {
                accepted = Some(obj);
                break;
            }
        }
        let mut obj = accepted.ok_or_else(|| Error::Placement {
            kind: kind.name().to_string(),
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        style(&mut obj, &mut rng);
        placed.push(obj);
    }
    Ok(Layout {
        extent: spec.extent,
        objects: placed,
        tint,
    })
}

fn paint(canvas: &mut [f64], extent: usize, obj: &PlacedObject) {
    let reach = obj.shape.reach() + 2.0;
    let x0 = ((obj.cx - reach).floor().max(0.0)) as usize;
    let y0 = ((obj.cy - reach).floor().max(0.0)) as usize;
    let x1 = ((obj.cx + reach).ceil() as usize).min(extent - 1);
    let y1 = ((obj.cy + reach).ceil() as usize).min(extent - 1);
    let rim = obj.shape.rim_width();
    let is_ring = obj.kind == ObjectKind::Bubble;
    let opacity = if is_ring { 0.85 } else { 0.92 };
    for py in y0..=y1 {
        for px in x0..=x1 {
            let (dx, dy) = (px as f64 + 0.5 - obj.cx, py as f64 + 0.5 - obj.cy);
            let d = obj.shape.sdf(dx, dy);
            let cov = coverage(d);
            if cov <= 0.0 {
                continue;
            }
            let mut color = obj.color;
            if !is_ring {
                // darker rim fading in over one pixel
                let rim_mix = (1.0 - (-d - rim).clamp(0.0, 1.0)) * 0.45;
                let speck = obj
                    .speckles
                    .iter()
                    .map(|s| coverage(((dx - s[0]).powi(2) + (dy - s[1]).powi(2)).sqrt() - s[2]))
                    .fold(0.0, f64::max)
                    * 0.3;
                let shade = 1.0 - rim_mix.max(speck);
                for c in &mut color {
                    *c *= shade;
                }
            }
            let a = opacity * cov;
            let at = (py * extent + px) * 3;
            for c in 0..3 {
                canvas[at + c] = canvas[at + c] * (1.0 - a) + color[c] * a;
            }
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped borders.
fn blur(canvas: &mut [f64], extent: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let n = extent as i64;
    let mut tmp = vec![0.0; canvas.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = [0.0; 3];
            for (t, w) in k.iter().enumerate() {
                let sx = (x + t as i64 - r).clamp(0, n - 1);
                let at = ((y * n + sx) * 3) as usize;
                for c in 0..3 {
                    acc[c] += w * canvas[at + c];
                }
            }
            let at = ((y * n + x) * 3) as usize;
            tmp[at..at + 3].copy_from_slice(&acc);
        }
    }
    for y in 0..n {
        for x in 0..n {
            let mut acc = [0.0; 3];
            for (t, w) in k.iter().enumerate() {
                let sy = (y + t as i64 - r).clamp(0, n - 1);
                let at = ((sy * n + x) * 3) as usize;
                for c in 0..3 {
                    acc[c] += w * tmp[at + c];
                }
            }
            let at = ((y * n + x) * 3) as usize;
            canvas[at..at + 3].copy_from_slice(&acc);
        }
    }
}

/// Background plus painted objects before blur and noise, linear 0..1.
pub fn render_clean(spec: &SlideSpec, layout: &Layout) -> Vec<f64> {
    let e = layout.extent;
    let bg = spec.background.map(|v| v as f64 / 255.0);
    let mut canvas = vec![0.0; e * e * 3];
    let half = e as f64 / 2.0;
    for y in 0..e {
        for x in 0..e {
            let (u, v) = (
                (x as f64 + 0.5 - half) / half,
                (y as f64 + 0.5 - half) / half,
            );
            let light = 1.0 - 0.05 * (u * u + v * v);
            let at = (y * e + x) * 3;
            for c in 0..3 {
                canvas[at + c] = bg[c] * light * layout.tint[c];
            }
        }
    }
    for obj in &layout.objects {
        paint(&mut canvas, e, obj);
    }
    canvas
}

/// Paints a layout, then blurs it and adds Gaussian noise drawn from `seed`.
pub fn render_layout(spec: &SlideSpec, layout: &Layout, seed: u64) -> RgbImage {
    let e = layout.extent;
    let mut canvas = render_clean(spec, layout);
    blur(&mut canvas, e, spec.blur_sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let data = canvas
        .iter()
        .map(|&v| {
            let n = if spec.noise > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (v * 255.0 + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    RgbImage {
        width: e,
        height: e,
        data,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlideImage {
    pub id: String,
    pub image: RgbImage,
}

/// Generates one annotated slide; `(spec, seed)` fixes every output bit.
pub fn gen_slide(spec: &SlideSpec, id: &str, seed: u64) -> Result<(SlideImage, Annotation)> {
    let layout = layout_slide(spec, seed)?;
    let image = render_layout(spec, &layout, seed);
    Ok((
        SlideImage {
            id: id.to_string(),
            image,
        },
        layout.annotation(id),
    ))
}

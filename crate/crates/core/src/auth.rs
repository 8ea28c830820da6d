//! Honey authentication from grain counts: features, a one-hidden-layer
//! classifier, and the dilution and mixture checks.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::container::{self, Record};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::io_util::{atomic_write, read_file};
use crate::synth::{derive_seed, layout_slide, Annotation, SlideSpec};

pub const NUM_FEATURES: usize = 4;
pub const DEFAULT_TOLERANCE: f64 = 0.3;

/// Grain totals of one honey sample and the frames they were counted over.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuthFeatures {
    pub counts: [u64; 3],
    pub frames: u64,
    /// Mean grains per frame.
    pub density: f64,
}

impl AuthFeatures {
    pub fn new(counts: [u64; 3], frames: u64) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidInput(
                "a sample needs at least one frame".into(),
            ));
        }
        Ok(AuthFeatures {
            counts,
            frames,
            density: counts.iter().sum::<u64>() as f64 / frames as f64,
        })
    }

    /// Per-frame class counts followed by density.
    pub fn vector(&self) -> [f64; NUM_FEATURES] {
        let f = self.frames as f64;
        let v = [
            self.counts[0] as f64 / f,
            self.counts[1] as f64 / f,
            self.counts[2] as f64 / f,
            self.density,
        ];
        debug_assert!((v[0] + v[1] + v[2] - self.density).abs() <= 1e-9 * self.density.max(1.0));
        v
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Features from per-frame detection lists.
pub fn extract_features(per_frame: &[Vec<Detection>]) -> Result<AuthFeatures> {
    let mut counts = [0u64; 3];
    for d in per_frame.iter().flatten() {
        let slot = counts.get_mut(d.class_id).ok_or_else(|| {
            Error::InvalidInput(format!("detection class {} out of range", d.class_id))
        })?;
        *slot += 1;
    }
    AuthFeatures::new(counts, per_frame.len() as u64)
}

/// Features from ground-truth annotations, one per frame.
pub fn features_from_annotations(frames: &[Annotation]) -> Result<AuthFeatures> {
    let mut counts = [0u64; 3];
    for a in frames {
        for (t, c) in counts.iter_mut().zip(a.class_counts()) {
            *t += c as u64;
        }
    }
    AuthFeatures::new(counts, frames.len() as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuthConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Training stops once the mean cross-entropy falls below this.
    pub target_loss: f64,
    pub threshold: f64,
    /// Label scored as 1 by the network; the other label is the fallback.
    pub genuine_label: String,
    pub seed: u64,
}

impl Default for AuthConfig {
    fn default() -> Self {
        AuthConfig {
            hidden: 8,
            learning_rate: 0.05,
            max_epochs: 20_000,
            target_loss: 1e-3,
            threshold: 0.5,
            genuine_label: "manuka".into(),
            seed: 0,
        }
    }
}

impl AuthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "auth learning rate must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidConfig(
                "auth threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuthModel {
    pub mean: [f64; NUM_FEATURES],
    pub scale: [f64; NUM_FEATURES],
    /// `hidden x NUM_FEATURES`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub threshold: f64,
    pub genuine_label: String,
    pub other_label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: String,
    pub genuine: bool,
    pub score: f64,
    pub features: AuthFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuthTraining {
    pub epochs: usize,
    pub final_loss: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl AuthModel {
    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    fn standardize(&self, f: &AuthFeatures) -> [f64; NUM_FEATURES] {
        let v = f.vector();
        std::array::from_fn(|i| (v[i] - self.mean[i]) / self.scale[i])
    }

    fn forward(&self, x: &[f64; NUM_FEATURES], h: &mut [f64]) -> f64 {
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &self.w1[j * NUM_FEATURES..(j + 1) * NUM_FEATURES];
            *hj = (self.b1[j] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()).tanh();
        }
        sigmoid(
            self.b2
                + self
                    .w2
                    .iter()
                    .zip(h.iter())
                    .map(|(w, h)| w * h)
                    .sum::<f64>(),
        )
    }

    /// Probability that the sample carries the genuine label.
    pub fn score(&self, f: &AuthFeatures) -> f64 {
        let mut h = vec![0.0; self.hidden()];
        self.forward(&self.standardize(f), &mut h)
    }

    /// A score exactly at the threshold is not genuine.
    pub fn authenticate(&self, f: &AuthFeatures) -> Verdict {
        let score = self.score(f);
        let genuine = score > self.threshold;
        Verdict {
            decision: if genuine {
                &self.genuine_label
            } else {
                &self.other_label
            }
            .clone(),
            genuine,
            score,
            features: *f,
        }
    }

    fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        self.mean
            .iter_mut()
            .chain(self.scale.iter_mut())
            .for_each(r);
        self.w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .for_each(r);
        r(&mut self.b2);
        r(&mut self.threshold);
    }
}

/// Trains the classifier by full-batch gradient descent on binary
/// cross-entropy. Exactly two labels must be present, one of them
/// `config.genuine_label`. Parameters are rounded to `f32` afterwards so the
/// in-memory model equals its saved form.
pub fn train_auth(
    samples: &[(AuthFeatures, String)],
    config: &AuthConfig,
) -> Result<(AuthModel, AuthTraining)> {
    config.validate()?;
    let mut labels: Vec<&str> = samples.iter().map(|(_, l)| l.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "training needs exactly two labels, found {:?}",
            labels
        )));
    }
    if !labels.contains(&config.genuine_label.as_str()) {
        return Err(Error::InvalidInput(format!(
            "genuine label {:?} absent from training labels {:?}",
            config.genuine_label, labels
        )));
    }
    let other = labels
        .iter()
        .find(|l| **l != config.genuine_label)
        .expect("two labels")
        .to_string();
    for (i, (a, la)) in samples.iter().enumerate() {
        for (b, lb) in &samples[i + 1..] {
            if la != lb && a.vector() == b.vector() {
                return Err(Error::NotSeparable(format!(
                    "identical features {:?} labeled both {la:?} and {lb:?}",
                    a.vector()
                )));
            }
        }
    }

    let n = samples.len() as f64;
    let raw: Vec<[f64; NUM_FEATURES]> = samples.iter().map(|(f, _)| f.vector()).collect();
    let mut mean = [0.0; NUM_FEATURES];
    let mut scale = [0.0; NUM_FEATURES];
    for i in 0..NUM_FEATURES {
        mean[i] = raw.iter().map(|v| v[i]).sum::<f64>() / n;
        let var = raw.iter().map(|v| (v[i] - mean[i]).powi(2)).sum::<f64>() / n;
        scale[i] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let h = config.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lim1 = (6.0 / (NUM_FEATURES + h) as f64).sqrt();
    let lim2 = (6.0 / (h + 1) as f64).sqrt();
    let mut model = AuthModel {
        mean,
        scale,
        w1: (0..h * NUM_FEATURES)
            .map(|_| rng.random_range(-lim1..lim1))
            .collect(),
        b1: vec![0.0; h],
        w2: (0..h).map(|_| rng.random_range(-lim2..lim2)).collect(),
        b2: 0.0,
        threshold: config.threshold,
        genuine_label: config.genuine_label.clone(),
        other_label: other,
    };
    let xs: Vec<[f64; NUM_FEATURES]> = samples.iter().map(|(f, _)| model.standardize(f)).collect();
    let ys: Vec<f64> = samples
        .iter()
        .map(|(_, l)| (*l == config.genuine_label) as u8 as f64)
        .collect();

    let mut hid = vec![0.0; h];
    let mut g_w1 = vec![0.0; h * NUM_FEATURES];
    let mut g_b1 = vec![0.0; h];
    let mut g_w2 = vec![0.0; h];
    let mut loss = f64::INFINITY;
    let mut epochs = 0;
    while epochs < config.max_epochs {
        g_w1.fill(0.0);
        g_b1.fill(0.0);
        g_w2.fill(0.0);
        let mut g_b2 = 0.0;
        loss = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let p = model.forward(x, &mut hid);
            let eps = 1e-12;
            loss -= y * (p + eps).ln() + (1.0 - y) * (1.0 - p + eps).ln();
            let d_out = p - y;
            g_b2 += d_out;
            for j in 0..h {
                g_w2[j] += d_out * hid[j];
                let d_h = d_out * model.w2[j] * (1.0 - hid[j] * hid[j]);
                g_b1[j] += d_h;
                for (k, xk) in x.iter().enumerate() {
                    g_w1[j * NUM_FEATURES + k] += d_h * xk;
                }
            }
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "auth training loss".into(),
            });
        }
        if loss < config.target_loss {
            break;
        }
        let step = config.learning_rate / n;
        model
            .w1
            .iter_mut()
            .zip(&g_w1)
            .for_each(|(w, g)| *w -= step * g);
        model
            .b1
            .iter_mut()
            .zip(&g_b1)
            .for_each(|(w, g)| *w -= step * g);
        model
            .w2
            .iter_mut()
            .zip(&g_w2)
            .for_each(|(w, g)| *w -= step * g);
        model.b2 -= step * g_b2;
        epochs += 1;
    }
    model.round_to_f32();
    Ok((
        model,
        AuthTraining {
            epochs,
            final_loss: loss,
        },
    ))
}

pub const AUTH_MAGIC: &[u8; 4] = b"PLNA";

const TAG_SCALER: u32 = 1;
const TAG_HIDDEN: u32 = 2;
const TAG_OUTPUT: u32 = 3;
const TAG_LABELS: u32 = 4;

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

// Labels travel as one f32 per UTF-8 byte.
fn label_buffer(s: &str) -> Vec<f32> {
    s.bytes().map(f32::from).collect()
}

fn buffer_label(v: &[f32]) -> Result<String> {
    let bytes: Option<Vec<u8>> = v
        .iter()
        .map(|&x| (x.fract() == 0.0 && (0.0..=255.0).contains(&x)).then_some(x as u8))
        .collect();
    bytes
        .and_then(|b| String::from_utf8(b).ok())
        .ok_or_else(|| Error::Corrupt {
            offset: 0,
            reason: "label is not UTF-8".into(),
        })
}

impl AuthModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = self.hidden() as u32;
        let records = [
            Record::new(
                TAG_SCALER,
                vec![NUM_FEATURES as u32],
                vec![to_f32(&self.mean), to_f32(&self.scale)],
            ),
            Record::new(
                TAG_HIDDEN,
                vec![h, NUM_FEATURES as u32],
                vec![to_f32(&self.w1), to_f32(&self.b1)],
            ),
            Record::new(
                TAG_OUTPUT,
                vec![h],
                vec![
                    to_f32(&self.w2),
                    vec![self.b2 as f32, self.threshold as f32],
                ],
            ),
            Record::new(
                TAG_LABELS,
                vec![2],
                vec![
                    label_buffer(&self.genuine_label),
                    label_buffer(&self.other_label),
                ],
            ),
        ];
        container::encode(AUTH_MAGIC, &records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let records = container::decode(AUTH_MAGIC, bytes)?;
        let corrupt = |reason: &str| Error::Corrupt {
            offset: 0,
            reason: reason.to_string(),
        };
        let find = |tag: u32| {
            records
                .iter()
                .find(|r| r.tag == tag)
                .ok_or_else(|| corrupt(&format!("missing record {tag}")))
        };
        let scaler = find(TAG_SCALER)?;
        let hidden = find(TAG_HIDDEN)?;
        let output = find(TAG_OUTPUT)?;
        let labels = find(TAG_LABELS)?;
        let h = *hidden
            .extents
            .first()
            .ok_or_else(|| corrupt("hidden extents"))? as usize;
        let shapes_ok = scaler.extents == [NUM_FEATURES as u32]
            && scaler.buffers.len() == 2
            && scaler.buffers.iter().all(|b| b.len() == NUM_FEATURES)
            && hidden.extents == [h as u32, NUM_FEATURES as u32]
            && hidden.buffers.len() == 2
            && hidden.buffers[0].len() == h * NUM_FEATURES
            && hidden.buffers[1].len() == h
            && output.extents == [h as u32]
            && output.buffers.len() == 2
            && output.buffers[0].len() == h
            && output.buffers[1].len() == 2
            && labels.buffers.len() == 2;
        if !shapes_ok || h == 0 {
            return Err(corrupt("auth model records have inconsistent shapes"));
        }
        let arr = |b: &[f32]| -> [f64; NUM_FEATURES] { std::array::from_fn(|i| b[i] as f64) };
        Ok(AuthModel {
            mean: arr(&scaler.buffers[0]),
            scale: arr(&scaler.buffers[1]),
            w1: to_f64(&hidden.buffers[0]),
            b1: to_f64(&hidden.buffers[1]),
            w2: to_f64(&output.buffers[0]),
            b2: output.buffers[1][0] as f64,
            threshold: output.buffers[1][1] as f64,
            genuine_label: buffer_label(&labels.buffers[0])?,
            other_label: buffer_label(&labels.buffers[1])?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilutionCheck {
    pub ratio: f64,
    pub diluted: bool,
}

/// Flags a sample whose density falls below `1 - tolerance` of the reference.
pub fn dilution_check(
    sample_density: f64,
    reference_density: f64,
    tolerance: f64,
) -> Result<DilutionCheck> {
    if !(reference_density > 0.0 && reference_density.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "reference density must be positive, got {reference_density}"
        )));
    }
    if !(sample_density >= 0.0 && sample_density.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "sample density {sample_density} is invalid"
        )));
    }
    let ratio = sample_density / reference_density;
    Ok(DilutionCheck {
        ratio,
        diluted: ratio < 1.0 - tolerance,
    })
}

/// Total-variation distance between the class proportions of two count
/// vectors.
pub fn distribution_compare(a: &[u64; 3], b: &[u64; 3]) -> Result<f64> {
    let (ta, tb) = (a.iter().sum::<u64>(), b.iter().sum::<u64>());
    if ta == 0 || tb == 0 {
        return Err(Error::InvalidInput(
            "class distribution of an empty sample".into(),
        ));
    }
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / ta as f64 - y as f64 / tb as f64).abs())
        .sum();
    Ok((0.5 * d).min(1.0))
}

/// Synthetic honey type: class mixture and grains-per-frame range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoneyProfile {
    pub label: String,
    pub mixture: [f64; 3],
    pub density: [f64; 2],
}

impl HoneyProfile {
    pub fn eucalyptus() -> Self {
        HoneyProfile {
            label: "eucalyptus".into(),
            mixture: [0.8, 0.15, 0.05],
            density: [8.0, 12.0],
        }
    }

    pub fn manuka() -> Self {
        HoneyProfile {
            label: "manuka".into(),
            mixture: [0.25, 0.15, 0.6],
            density: [4.0, 7.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.mixture.iter().sum();
        if self.mixture.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "profile {} mixture {:?} must be non-negative and sum to 1",
                self.label, self.mixture
            )));
        }
        let [lo, hi] = self.density;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "profile {} density range {:?} must be positive",
                self.label, self.density
            )));
        }
        Ok(())
    }

    /// Per-frame class counts of one sample: the sample draws a density from
    /// the profile range, each frame a Poisson count at that density, each
    /// grain a class from the mixture.
    pub fn sample_counts(&self, frames: usize, seed: u64) -> Result<Vec<[u32; 3]>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(self.density[0]..=self.density[1]);
        let poisson = Poisson::new(d).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let classes =
            WeightedIndex::new(self.mixture).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok((0..frames)
            .map(|_| {
                let n = poisson.sample(&mut rng) as u64;
                let mut c = [0u32; 3];
                for _ in 0..n {
                    c[classes.sample(&mut rng)] += 1;
                }
                c
            })
            .collect())
    }

    /// Lays out every frame of a sample on slides of `spec` (its count
    /// ranges replaced by the sampled counts) and returns the annotations.
    /// No pixels are rendered.
    pub fn sample_frames(
        &self,
        spec: &SlideSpec,
        frames: usize,
        seed: u64,
    ) -> Result<Vec<Annotation>> {
        let counts = self.sample_counts(frames, seed)?;
        counts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let layout =
                    layout_slide(&spec.with_exact_counts(*c), derive_seed(seed, 1 + i as u64))?;
                Ok(layout.annotation(&format!("{}_{i:03}", self.label)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_is_total_over_frames() {
        let f = AuthFeatures::new([20, 20, 10], 10).unwrap();
        assert_eq!(f.density, 5.0);
        assert!(AuthFeatures::new([1, 0, 0], 0).is_err());
    }

    #[test]
    fn total_variation_examples() {
        assert_eq!(distribution_compare(&[1, 0, 0], &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(distribution_compare(&[2, 1, 1], &[1, 1, 2]).unwrap(), 0.25);
        assert_eq!(distribution_compare(&[3, 3, 3], &[1, 1, 1]).unwrap(), 0.0);
        assert!(distribution_compare(&[0, 0, 0], &[1, 1, 1]).is_err());
    }

    #[test]
    fn dilution_examples() {
        let c = dilution_check(2.5, 5.0, 0.3).unwrap();
        assert!(c.diluted && c.ratio == 0.5);
        assert!(!dilution_check(5.0, 5.0, 0.3).unwrap().diluted);
        assert!(dilution_check(1.0, 0.0, 0.3).is_err());
    }

    #[test]
    fn contradictory_duplicate_is_not_separable() {
        let f = AuthFeatures::new([5, 1, 1], 1).unwrap();
        let g = AuthFeatures::new([1, 1, 5], 1).unwrap();
        let samples = vec![
            (f, "manuka".to_string()),
            (f, "eucalyptus".to_string()),
            (g, "manuka".to_string()),
        ];
        assert!(matches!(
            train_auth(&samples, &AuthConfig::default()),
            Err(Error::NotSeparable(_))
        ));
    }

    #[test]
    fn tie_at_threshold_is_not_genuine() {
        let f = AuthFeatures::new([1, 1, 1], 1).unwrap();
        let model = AuthModel {
            mean: [0.0; 4],
            scale: [1.0; 4],
            w1: vec![0.0; 4],
            b1: vec![0.0],
            w2: vec![0.0],
            b2: 0.0,
            threshold: 0.5,
            genuine_label: "manuka".into(),
            other_label: "eucalyptus".into(),
        };
        let v = model.authenticate(&f);
        assert_eq!(v.score, 0.5);
        assert_eq!(v.decision, "eucalyptus");
        assert!(!v.genuine);
    }
}

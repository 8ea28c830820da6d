//! Detector training: dataset preparation, anchor fitting, the epoch loop and
//! optimizer snapshots.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Record};
use crate::detector::{Anchor, BoundingBox, DetectorModel, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::imaging::{load_image, resize_area};
use crate::io_util::{atomic_write, read_file};
use crate::synth::{derive_seed, DatasetItem};
use crate::tensor::parallel::map_range;
use crate::tensor::{Graph, Mode, OptimizerConfig, OptimizerState, ParamId, Tensor};
use crate::yolo::{
    assign_with_geometry, kmeans_anchors, yolo_loss, LossBreakdown, LossConfig, TargetGrid,
};

/// One training image resized to the network input, with its labels in
/// network-input pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub id: String,
    pub extent: usize,
    /// HWC, 8 bits per channel.
    pub pixels: Vec<u8>,
    pub boxes: Vec<(BoundingBox, usize)>,
    /// Network-input pixels per source pixel.
    pub scale: f64,
}

impl PreparedImage {
    pub fn from_rgb(
        id: &str,
        img: &crate::imaging::RgbImage,
        extent: usize,
        boxes: &[(BoundingBox, usize)],
    ) -> Self {
        let scale = extent as f64 / img.width as f64;
        let pixels = resize_area(img, extent, extent)
            .into_iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        PreparedImage {
            id: id.to_string(),
            extent,
            pixels,
            boxes: boxes.iter().map(|(b, c)| (b.scaled(scale), *c)).collect(),
            scale,
        }
    }
}

/// Loads and resizes every dataset image. Slides must be square.
pub fn prepare_dataset(items: &[DatasetItem], extent: usize) -> Result<Vec<PreparedImage>> {
    map_range(items.len(), |i| {
        let item = &items[i];
        let img = load_image(&item.image_path)?;
        let a = &item.annotation;
        if img.width != img.height || img.width != a.width || img.height != a.height {
            return Err(Error::Validation {
                image: a.image.clone(),
                msg: format!(
                    "image is {}x{}, annotation says {}x{}; slides must be square",
                    img.width, img.height, a.width, a.height
                ),
            });
        }
        let boxes: Vec<(BoundingBox, usize)> =
            a.boxes.iter().map(|b| (b.bbox, b.class_id)).collect();
        Ok(PreparedImage::from_rgb(&a.image, &img, extent, &boxes))
    })
    .into_iter()
    .collect()
}

/// k-means anchor priors (grid-cell units) over every training box.
pub fn fit_anchors(
    images: &[PreparedImage],
    k: usize,
    grid: usize,
    seed: u64,
) -> Result<Vec<Anchor>> {
    let shapes: Vec<(f64, f64)> = images
        .iter()
        .flat_map(|img| {
            let cell = img.extent as f64 / grid as f64;
            img.boxes.iter().map(move |(b, _)| (b.w / cell, b.h / cell))
        })
        .collect();
    Ok(kmeans_anchors(&shapes, k, seed)?.anchors)
}

/// One of the eight symmetries of the square: optional transpose, then
/// optional horizontal and vertical flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dihedral {
    pub transpose: bool,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl Dihedral {
    pub fn from_index(i: u8) -> Self {
        Dihedral {
            transpose: i & 1 != 0,
            flip_x: i & 2 != 0,
            flip_y: i & 4 != 0,
        }
    }

    fn map_point(self, x: f64, y: f64, extent: f64) -> (f64, f64) {
        let (mut x, mut y) = if self.transpose { (y, x) } else { (x, y) };
        if self.flip_x {
            x = extent - x;
        }
        if self.flip_y {
            y = extent - y;
        }
        (x, y)
    }

    pub fn apply_box(self, b: &BoundingBox, extent: f64) -> BoundingBox {
        let (cx, cy) = self.map_point(b.cx, b.cy, extent);
        let (w, h) = if self.transpose {
            (b.h, b.w)
        } else {
            (b.w, b.h)
        };
        BoundingBox::new(cx, cy, w, h)
    }

    /// Writes the transformed image as floats in [0, 1].
    pub fn apply_pixels(self, src: &[u8], extent: usize, dst: &mut [f32]) {
        let e = extent;
        for oy in 0..e {
            for ox in 0..e {
                // invert: undo flips, then transpose
                let x = if self.flip_x { e - 1 - ox } else { ox };
                let y = if self.flip_y { e - 1 - oy } else { oy };
                let (sx, sy) = if self.transpose { (y, x) } else { (x, y) };
                let s = (sy * e + sx) * 3;
                let d = (oy * e + ox) * 3;
                for c in 0..3 {
                    dst[d + c] = src[s + c] as f32 / 255.0;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Linear learning-rate ramp over the first steps.
    pub warmup_steps: usize,
    /// Cosine decay from the base rate down to this fraction of it at the
    /// last planned step; 1 keeps the rate constant.
    pub final_lr_fraction: f64,
    pub loss: LossConfig,
    /// Random flips and transposes of each training image.
    pub augment: bool,
    /// Training images used to re-estimate batch-norm statistics after each
    /// epoch; 0 keeps the running averages.
    pub recalibration_images: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 2,
            optimizer: OptimizerConfig::default(),
            warmup_steps: 50,
            final_lr_fraction: 0.05,
            loss: LossConfig::default(),
            augment: true,
            recalibration_images: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.optimizer.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::InvalidConfig(
                "final_lr_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.loss.lambda_coord < 0.0 || self.loss.lambda_noobj < 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, images: usize) -> usize {
        images.div_ceil(self.batch_size)
    }

    /// Learning rate at global step `step` (0-based) of `total` planned steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let base = self.optimizer.lr;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / (self.warmup_steps + 1) as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let f = self.final_lr_fraction;
        base * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,total,coord,obj,noobj,class,lr,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.1}",
            self.epoch,
            l.total,
            l.coord_term,
            l.obj_term,
            l.noobj_term,
            l.class_term,
            self.lr,
            self.seconds
        )
    }
}

pub struct Trainer {
    pub model: DetectorModel<f32>,
    pub optimizer: OptimizerState<f32>,
    pub config: TrainConfig,
    /// Epochs completed so far (including those before a resume).
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: DetectorModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            optimizer: OptimizerState::new(config.optimizer),
            config,
            epoch: 0,
        })
    }

    /// Continues from a saved optimizer snapshot.
    pub fn resume(
        model: DetectorModel<f32>,
        config: TrainConfig,
        snapshot: OptimizerSnapshot,
    ) -> Result<Self> {
        config.validate()?;
        let mut optimizer = OptimizerState::new(config.optimizer);
        optimizer.step = snapshot.step;
        optimizer.first = snapshot.first;
        optimizer.second = snapshot.second;
        Ok(Trainer {
            model,
            optimizer,
            config,
            epoch: snapshot.epoch,
        })
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            epoch: self.epoch,
            step: self.optimizer.step,
            first: self.optimizer.first.clone(),
            second: self.optimizer.second.clone(),
        }
    }

    fn targets_for(&self, boxes: &[(BoundingBox, usize)]) -> Result<TargetGrid> {
        let c = &self.model.config;
        assign_with_geometry(boxes, &c.anchors, c.geometry())
    }

    /// Loss of a batch in training mode, without updating anything.
    pub fn batch_loss(&self, images: &[&PreparedImage]) -> Result<LossBreakdown> {
        let (x, targets) = self.assemble(images, &vec![Dihedral::default(); images.len()])?;
        let mut g = Graph::new(&self.model.params, Mode::Train);
        let xi = g.input(x, false);
        let out = self.model.forward(&mut g, xi)?;
        Ok(yolo_loss(&mut g, out.raw, &targets, &self.config.loss)?.1)
    }

    fn assemble(
        &self,
        images: &[&PreparedImage],
        aug: &[Dihedral],
    ) -> Result<(Tensor<f32>, Vec<TargetGrid>)> {
        let x = batch_tensor(images, aug, self.model.config.input_extent)?;
        let e = self.model.config.input_extent as f64;
        let targets = images
            .iter()
            .zip(aug)
            .map(|(img, t)| {
                let boxes: Vec<(BoundingBox, usize)> = img
                    .boxes
                    .iter()
                    .map(|(b, c)| (t.apply_box(b, e), *c))
                    .collect();
                self.targets_for(&boxes)
            })
            .collect::<Result<_>>()?;
        Ok((x, targets))
    }

    /// One optimizer update on a batch; returns the loss before the update.
    pub fn step(
        &mut self,
        images: &[&PreparedImage],
        aug: &[Dihedral],
        lr: f64,
    ) -> Result<LossBreakdown> {
        let (x, targets) = self.assemble(images, aug)?;
        let (grads, parts, updates) = {
            let mut g = Graph::new(&self.model.params, Mode::Train);
            let xi = g.input(x, false);
            let out = self.model.forward(&mut g, xi)?;
            let (loss, parts) = yolo_loss(&mut g, out.raw, &targets, &self.config.loss)?;
            let grads = g.backward(loss)?;
            (grads, parts, g.bn_updates().to_vec())
        };
        self.optimizer.config.lr = lr;
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.model.params.apply_bn_updates(&updates, BN_MOMENTUM);
        Ok(parts)
    }

    /// Runs one epoch over `data` in a seed- and epoch-determined order.
    pub fn train_epoch(&mut self, data: &[PreparedImage]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch as u64));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let per_epoch = self.config.steps_per_epoch(data.len());
        let total_steps = per_epoch * self.config.epochs.max(epoch + 1);
        let mut sum = LossBreakdown::default();
        let mut lr = self.config.optimizer.lr;
        for (s, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&PreparedImage> = chunk.iter().map(|&i| &data[i]).collect();
            let aug: Vec<Dihedral> = chunk
                .iter()
                .map(|_| {
                    if self.config.augment {
                        Dihedral::from_index(rng.random_range(0..8))
                    } else {
                        Dihedral::default()
                    }
                })
                .collect();
            lr = self.config.lr_at(epoch * per_epoch + s, total_steps);
            let parts = self.step(&batch, &aug, lr)?;
            sum.add(&parts.scaled(chunk.len() as f64));
        }
        if self.config.recalibration_images > 0 {
            let k = self.config.recalibration_images.min(data.len());
            let subset: Vec<&PreparedImage> = data[..k].iter().collect();
            recalibrate_bn(&mut self.model, &subset, self.config.batch_size)?;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            loss: sum.scaled(1.0 / data.len() as f64),
            lr,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Stacks prepared images into an `[N, E, E, 3]` batch after applying
/// `aug[i]` to image `i`.
pub fn batch_tensor(
    images: &[&PreparedImage],
    aug: &[Dihedral],
    extent: usize,
) -> Result<Tensor<f32>> {
    let e = extent;
    let mut data = vec![0.0f32; images.len() * e * e * 3];
    for ((img, &t), dst) in images.iter().zip(aug).zip(data.chunks_mut(e * e * 3)) {
        if img.extent != e {
            return Err(Error::shape(
                "training batch",
                format!(
                    "image {} prepared at {} px, network expects {e}",
                    img.id, img.extent
                ),
            ));
        }
        t.apply_pixels(&img.pixels, e, dst);
    }
    Tensor::new(&[images.len(), e, e, 3], data)
}

/// Replaces the batch-norm running statistics with the average batch
/// statistics over `images`, taken in training mode with the given batch
/// size. Running averages lag behind fast-moving weights; this pass makes
/// inference match the final weights.
pub fn recalibrate_bn(
    model: &mut DetectorModel<f32>,
    images: &[&PreparedImage],
    batch_size: usize,
) -> Result<()> {
    let mut sums: Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut batches = 0usize;
    for chunk in images.chunks(batch_size.max(1)) {
        let x = batch_tensor(
            chunk,
            &vec![Dihedral::default(); chunk.len()],
            model.config.input_extent,
        )?;
        let mut g = Graph::new(&model.params, Mode::Train);
        let xi = g.input(x, false);
        model.forward(&mut g, xi)?;
        for (k, u) in g.bn_updates().iter().enumerate() {
            if sums.len() <= k {
                sums.push((
                    u.running_mean,
                    u.running_var,
                    vec![0.0; u.batch_mean.len()],
                    vec![0.0; u.batch_var.len()],
                ));
            }
            let m = u.count as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let s = &mut sums[k];
            s.2.iter_mut()
                .zip(&u.batch_mean)
                .for_each(|(a, &b)| *a += b as f64);
            s.3.iter_mut()
                .zip(&u.batch_var)
                .for_each(|(a, &b)| *a += b as f64 * unbias);
        }
        batches += 1;
    }
    if batches == 0 {
        return Ok(());
    }
    let n = batches as f64;
    for (mean_id, var_id, mean, var) in sums {
        for (dst, s) in model
            .params
            .value_mut(mean_id)
            .data_mut()
            .iter_mut()
            .zip(mean)
        {
            *dst = (s / n) as f32;
        }
        for (dst, s) in model
            .params
            .value_mut(var_id)
            .data_mut()
            .iter_mut()
            .zip(var)
        {
            *dst = (s / n) as f32;
        }
    }
    Ok(())
}

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"PLNO";

/// Optimizer moments plus the position in the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub epoch: usize,
    pub step: u64,
    pub first: Vec<Option<Vec<f32>>>,
    pub second: Vec<Option<Vec<f32>>>,
}

impl OptimizerSnapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.first.len().max(self.second.len());
        let mut records = vec![Record::new(
            0,
            vec![
                self.epoch as u32,
                self.step as u32,
                (self.step >> 32) as u32,
                n as u32,
            ],
            vec![],
        )];
        for i in 0..n {
            let f = self.first.get(i).cloned().flatten();
            let s = self.second.get(i).cloned().flatten();
            let mut bufs = Vec::new();
            let flags = [f.is_some() as u32, s.is_some() as u32];
            bufs.extend(f);
            bufs.extend(s);
            records.push(Record::new(1, vec![i as u32, flags[0], flags[1]], bufs));
        }
        container::encode(OPTIMIZER_MAGIC, &records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let records = container::decode(OPTIMIZER_MAGIC, bytes)?;
        let corrupt = |reason: &str| Error::Corrupt {
            offset: 0,
            reason: reason.to_string(),
        };
        let meta = records
            .first()
            .filter(|r| r.tag == 0 && r.extents.len() == 4);
        let meta = meta.ok_or_else(|| corrupt("missing optimizer header"))?;
        let n = meta.extents[3] as usize;
        if records.len() != n + 1 {
            return Err(corrupt("optimizer record count mismatch"));
        }
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for (i, r) in records[1..].iter().enumerate() {
            let ok = r.tag == 1 && r.extents.len() == 3 && r.extents[0] as usize == i;
            let want =
                r.extents.get(1).copied().unwrap_or(0) + r.extents.get(2).copied().unwrap_or(0);
            if !ok || r.buffers.len() != want as usize {
                return Err(corrupt("malformed optimizer moment record"));
            }
            let mut bufs = r.buffers.iter().cloned();
            first.push(if r.extents[1] == 1 { bufs.next() } else { None });
            second.push(if r.extents[2] == 1 { bufs.next() } else { None });
        }
        Ok(OptimizerSnapshot {
            epoch: meta.extents[0] as usize,
            step: meta.extents[1] as u64 | ((meta.extents[2] as u64) << 32),
            first,
            second,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dihedral_boxes_follow_pixels() {
        let e = 8usize;
        let mut src = vec![0u8; e * e * 3];
        // mark the pixel at (x=1, y=2)
        src[(2 * e + 1) * 3] = 255;
        let b = BoundingBox::new(1.5, 2.5, 1.0, 1.0);
        for i in 0..8 {
            let t = Dihedral::from_index(i);
            let mut dst = vec![0.0f32; e * e * 3];
            t.apply_pixels(&src, e, &mut dst);
            let k = dst.iter().position(|&v| v == 1.0).unwrap() / 3;
            let tb = t.apply_box(&b, e as f64);
            assert_eq!(
                ((k % e) as f64 + 0.5, (k / e) as f64 + 0.5),
                (tb.cx, tb.cy),
                "transform {i}"
            );
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            warmup_steps: 4,
            final_lr_fraction: 0.1,
            ..TrainConfig::default()
        };
        let lr: Vec<f64> = (0..20).map(|s| cfg.lr_at(s, 20)).collect();
        assert!(lr[0] < lr[3] && lr[3] < lr[4]);
        assert!((lr[4] - 1e-3).abs() < 1e-12);
        assert!(lr[5..].windows(2).all(|w| w[1] <= w[0]));
        assert!((cfg.lr_at(20, 20) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn snapshot_round_trip() {
        let s = OptimizerSnapshot {
            epoch: 3,
            step: (1 << 33) + 5,
            first: vec![Some(vec![1.0, 2.0]), None],
            second: vec![Some(vec![0.5, 0.25]), None],
        };
        assert_eq!(OptimizerSnapshot::from_bytes(&s.to_bytes()).unwrap(), s);
    }
}

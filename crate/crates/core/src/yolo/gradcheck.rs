use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{BoundingBox, DetectorConfig, DetectorModel, Kink};
use crate::error::Result;
use crate::imaging::to_input_tensor;
use crate::synth::{gen_slide, SlideSpec};
use crate::tensor::gradcheck::{relative_error, GradCheckReport, PERTURBATION};
use crate::tensor::kernels::maxpool2;
use crate::tensor::{Graph, Mode, ParamId, Tensor};

use super::{assign_with_geometry, freeze_objectness, yolo_loss, LossConfig, TargetGrid};

// Inference-mode batch norm keeps the units of a channel independent, so a
// step only moves the units downstream of the perturbed entry. Train-mode
// normalization is covered by the per-op suite.
const MODE: Mode = Mode::Infer;
const MAX_REDRAWS: usize = 200;

struct Eval<'a> {
    x: Tensor<f64>,
    targets: &'a [TargetGrid],
    cfg: LossConfig,
}

impl Eval<'_> {
    /// Loss plus the on/off pattern of every leaky unit and the winner of
    /// every pooling window.
    fn run(&self, model: &DetectorModel<f64>, x: &Tensor<f64>) -> Result<(f64, Vec<u8>)> {
        let mut g = Graph::new(&model.params, MODE);
        let xi = g.input(x.clone(), false);
        let out = model.forward(&mut g, xi)?;
        let mut pattern = Vec::new();
        for (v, kind) in &out.kinks {
            let t = g.value(*v);
            match kind {
                Kink::LeakyRelu => pattern.extend(t.data().iter().map(|&a| (a > 0.0) as u8)),
                Kink::MaxPool => pattern.extend(maxpool2(t)?.1),
            }
        }
        let (loss, _) = yolo_loss(&mut g, out.raw, self.targets, &self.cfg)?;
        Ok((g.value(loss).item(), pattern))
    }
}

/// Central difference at one coordinate, or `None` when either side of the
/// step lands on a different linear piece of the network.
fn smooth_difference(
    mut f: impl FnMut(f64) -> Result<(f64, Vec<u8>)>,
    x: f64,
    base: &[u8],
) -> Result<Option<f64>> {
    let (hi, p_hi) = f(x + PERTURBATION)?;
    if p_hi != base {
        return Ok(None);
    }
    let (lo, p_lo) = f(x - PERTURBATION)?;
    if p_lo != base {
        return Ok(None);
    }
    Ok(Some((hi - lo) / (2.0 * PERTURBATION)))
}

/// Finite-difference check of the whole detector plus loss in `f64`, on a
/// random two-grain slide shrunk to `extent` pixels. Each trial checks one
/// parameter entry and one input pixel; every other trial starts from the
/// entry with the largest analytic gradient instead of a random one. An
/// entry whose step flips a leaky unit or a pooling winner is replaced by a
/// random entry of the same tensor.
pub fn network_gradcheck(extent: usize, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = [rng.random_range(0..3u32), rng.random_range(0..3u32)];
    let mut counts = [0u32; 3];
    for c in classes {
        counts[c as usize] += 1;
    }
    let spec = SlideSpec {
        bubbles: [0, 0],
        ..SlideSpec::default().with_exact_counts(counts)
    };
    let (slide, ann) = gen_slide(&spec, "gradcheck", rng.random())?;
    let scale = extent as f64 / slide.image.width as f64;
    let boxes: Vec<(BoundingBox, usize)> = ann
        .boxes
        .iter()
        .map(|b| (b.bbox.scaled(scale), b.class_id))
        .collect();
    let x = to_input_tensor(&slide.image, extent).cast::<f64>();

    let config = DetectorConfig::default().with_input_extent(extent);
    let mut model = DetectorModel::<f64>::build(config, rng.random())?;
    let mut targets = vec![assign_with_geometry(
        &boxes,
        &model.config.anchors,
        model.config.geometry(),
    )?];
    let raw = model.predict(x.clone())?;
    freeze_objectness(raw.data(), &mut targets);
    let eval = Eval {
        x: x.clone(),
        targets: &targets,
        cfg: LossConfig::default(),
    };

    let (grads, dx) = {
        let mut g = Graph::new(&model.params, MODE);
        let xi = g.input(x.clone(), true);
        let out = model.forward(&mut g, xi)?;
        let (loss, _) = yolo_loss(&mut g, out.raw, &targets, &eval.cfg)?;
        let grads = g.backward(loss)?;
        let dx = grads
            .wrt(xi)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        (grads, dx)
    };
    let base = eval.run(&model, &x)?.1;
    let trainable: Vec<ParamId> = model
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut redrawn = 0;
    for t in 0..trials {
        let id = trainable[rng.random_range(0..trainable.len())];
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.params.value(id).shape()));
        let mut i = if t % 2 == 1 {
            argmax_abs(analytic.data())
        } else {
            rng.random_range(0..analytic.len())
        };
        for attempt in 0..=MAX_REDRAWS {
            let x0 = model.params.value(id).data()[i];
            let numeric = smooth_difference(
                |v| {
                    model.params.value_mut(id).data_mut()[i] = v;
                    eval.run(&model, &eval.x)
                },
                x0,
                &base,
            );
            model.params.value_mut(id).data_mut()[i] = x0;
            if let Some(n) = numeric? {
                worst = worst.max(relative_error(analytic.data()[i], n));
                checked += 1;
                break;
            }
            if attempt == MAX_REDRAWS {
                return Err(crate::error::Error::InvalidInput(format!(
                    "no smooth entry found in {}",
                    model.params.get(id).name
                )));
            }
            redrawn += 1;
            i = rng.random_range(0..analytic.len());
        }

        let mut p = if t % 2 == 1 {
            argmax_abs(dx.data())
        } else {
            rng.random_range(0..x.len())
        };
        for attempt in 0..=MAX_REDRAWS {
            let mut xp = x.clone();
            let numeric = smooth_difference(
                |v| {
                    xp.data_mut()[p] = v;
                    eval.run(&model, &xp)
                },
                x.data()[p],
                &base,
            )?;
            if let Some(n) = numeric {
                worst = worst.max(relative_error(dx.data()[p], n));
                checked += 1;
                break;
            }
            if attempt == MAX_REDRAWS {
                return Err(crate::error::Error::InvalidInput(
                    "no smooth input pixel found".into(),
                ));
            }
            redrawn += 1;
            p = rng.random_range(0..x.len());
        }
    }
    Ok(GradCheckReport {
        name: format!("detector + loss at {extent} px"),
        trials,
        checked_entries: checked,
        max_relative_error: worst,
        redrawn_at_kinks: redrawn,
    })
}

fn argmax_abs(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, -1.0), |(bi, bv), (i, x)| {
            if x.abs() > bv {
                (i, x.abs())
            } else {
                (bi, bv)
            }
        })
        .0
}

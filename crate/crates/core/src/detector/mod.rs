//! The pollen identification network: a YOLOv2-style single-shot detector
//! with a 26x26 reorg skip connection, plus box decoding and suppression.

mod boxes;
pub(crate) mod decode;
mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize_area, RgbImage};
use crate::tensor::{Graph, Mode, Padding, ParamId, ParamStore, Scalar, Tensor, Var};

pub(crate) use boxes::by_confidence_desc;
pub use boxes::{class_id, class_name, iou, nms, shape_iou, BoundingBox, Detection, CLASS_NAMES};
pub use decode::{decode, decode_batch, GridGeometry};
pub use weights::{
    load_weights, save_weights, weights_from_bytes, weights_to_bytes, WEIGHTS_MAGIC,
};

/// Total downsampling of the network (five 2x2 pools).
pub const NETWORK_STRIDE: usize = 32;
pub const DEFAULT_INPUT_EXTENT: usize = 416;
pub const DEFAULT_NUM_ANCHORS: usize = 10;
pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_MOMENTUM: f64 = 0.99;

/// Anchor prior, in grid-cell units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_extent: usize,
    pub num_classes: usize,
    pub anchors: Vec<Anchor>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_extent: DEFAULT_INPUT_EXTENT,
            num_classes: CLASS_NAMES.len(),
            anchors: default_anchors(DEFAULT_NUM_ANCHORS),
        }
    }
}

/// Square-ish priors spread over the grain sizes expected at 416 px; replaced
/// by k-means priors before training.
pub fn default_anchors(n: usize) -> Vec<Anchor> {
    (0..n)
        .map(|i| {
            let s = 0.5 + 1.5 * i as f64 / (n.max(2) - 1) as f64;
            let aspect = if i % 2 == 0 { 1.0 } else { 1.15 };
            Anchor {
                w: s * aspect,
                h: s / aspect,
            }
        })
        .collect()
}

impl DetectorConfig {
    pub fn with_input_extent(mut self, extent: usize) -> Self {
        self.input_extent = extent;
        self
    }

    pub fn grid(&self) -> usize {
        self.input_extent / NETWORK_STRIDE
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn values_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn head_filters(&self) -> usize {
        self.num_anchors() * self.values_per_anchor()
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            grid: self.grid(),
            anchors: self.num_anchors(),
            classes: self.num_classes,
            input_extent: self.input_extent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig(
                "number of classes must be positive".into(),
            ));
        }
        if self.anchors.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one anchor is required".into(),
            ));
        }
        if let Some(a) = self.anchors.iter().find(|a| !(a.w > 0.0 && a.h > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "anchor {a:?} must be positive"
            )));
        }
        if self.input_extent == 0 || !self.input_extent.is_multiple_of(NETWORK_STRIDE) {
            return Err(Error::InvalidConfig(format!(
                "input extent {} must be a positive multiple of {NETWORK_STRIDE}",
                self.input_extent
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        size: usize,
        filters: usize,
        batch_norm: bool,
        leaky: bool,
    },
    MaxPool,
    /// Forwards one earlier layer's output, or concatenates two along channels.
    Route(Vec<usize>),
    Reorg(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub bn: Option<BnParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub label: String,
    /// False for the skip branch (tap, 1x1 squeeze, reorg).
    pub on_main_path: bool,
    /// Per-image output extents (H, W, C).
    pub output: [usize; 3],
    pub params: Option<ConvParams>,
}

/// One entry of the forward shape audit.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub layer: usize,
    pub label: String,
    pub on_main_path: bool,
    pub shape: [usize; 3],
}

pub struct ForwardPass {
    /// `[N, S, S, B, 5 + C]` raw predictions.
    pub raw: Var,
    pub audit: Vec<ShapeRecord>,
    /// Inputs of every piecewise-linear op, in evaluation order.
    pub kinks: Vec<(Var, Kink)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kink {
    LeakyRelu,
    MaxPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel<T = f32> {
    pub config: DetectorConfig,
    pub layers: Vec<Layer>,
    pub params: ParamStore<T>,
}

enum Spec {
    C(usize, usize),
    M,
}

/// Initial objectness logit of the head: sigmoid gives 0.01, so the many
/// empty slots start near their target.
pub const OBJECTNESS_PRIOR_LOGIT: f64 = -4.595_119_850_134_59;

/// Layer index whose 26x26x512 output feeds the skip branch.
pub const SKIP_TAP_LAYER: usize = 14;

impl<T: Scalar> DetectorModel<T> {
    /// Builds the detector and initializes it: He-normal kernels, zero
    /// biases apart from the objectness prior, unit gamma, zero beta.
    pub fn build(mut config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        // Anchors are persisted as f32; keep the in-memory copy identical.
        for a in &mut config.anchors {
            a.w = a.w as f32 as f64;
            a.h = a.h as f32 as f64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = DetectorModel {
            config,
            layers: Vec::new(),
            params: ParamStore::new(),
        };
        use Spec::*;
        let trunk = [
            C(32, 3),
            M,
            C(64, 3),
            M,
            C(128, 3),
            C(64, 1),
            C(128, 3),
            M,
            C(256, 3),
            C(128, 1),
            C(256, 3),
            M,
            C(512, 3),
            C(256, 1),
            C(512, 3),
            M,
            C(1024, 3),
            C(512, 1),
            C(1024, 3),
            C(512, 1),
            C(1024, 3),
            C(1024, 3),
            C(1024, 3),
        ];
        let e = model.config.input_extent;
        let mut shape = [e, e, 3];
        for s in trunk {
            shape = match s {
                C(f, k) => model.push_conv(&mut rng, shape, f, k, true, true),
                M => model.push_layer(
                    LayerKind::MaxPool,
                    "Max Pool",
                    true,
                    [shape[0] / 2, shape[1] / 2, shape[2]],
                ),
            };
        }
        debug_assert_eq!(model.layers[SKIP_TAP_LAYER].output[2], 512);
        let main_end = model.layers.len() - 1;
        let tap = model.layers[SKIP_TAP_LAYER].output;
        model.push_layer(
            LayerKind::Route(vec![SKIP_TAP_LAYER]),
            "Route (skip tap)",
            false,
            tap,
        );
        let squeezed = model.push_conv_branch(&mut rng, tap, 64);
        let reorg = [squeezed[0] / 2, squeezed[1] / 2, squeezed[2] * 4];
        let reorg_idx = model.layers.len();
        model.push_layer(LayerKind::Reorg(2), "Reorg", false, reorg);
        let main = model.layers[main_end].output;
        let cat = [main[0], main[1], main[2] + reorg[2]];
        model.push_layer(
            LayerKind::Route(vec![main_end, reorg_idx]),
            "Concatenate",
            true,
            cat,
        );
        let shape = model.push_conv(&mut rng, cat, 1024, 3, true, true);
        let head = model.config.head_filters();
        model.push_conv(&mut rng, shape, head, 1, false, false);
        let bias = model
            .layers
            .last()
            .and_then(|l| l.params.as_ref())
            .expect("head conv")
            .bias;
        let per_anchor = model.config.geometry().values_per_anchor();
        for chunk in model
            .params
            .value_mut(bias)
            .data_mut()
            .chunks_mut(per_anchor)
        {
            chunk[4] = T::lit(OBJECTNESS_PRIOR_LOGIT);
        }
        Ok(model)
    }

    fn push_layer(
        &mut self,
        kind: LayerKind,
        label: &str,
        main: bool,
        output: [usize; 3],
    ) -> [usize; 3] {
        self.layers.push(Layer {
            kind,
            label: label.to_string(),
            on_main_path: main,
            output,
            params: None,
        });
        output
    }

    fn push_conv_branch(
        &mut self,
        rng: &mut ChaCha8Rng,
        input: [usize; 3],
        filters: usize,
    ) -> [usize; 3] {
        let out = self.push_conv(rng, input, filters, 1, true, true);
        self.layers.last_mut().expect("just pushed").on_main_path = false;
        out
    }

    fn push_conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        input: [usize; 3],
        filters: usize,
        size: usize,
        batch_norm: bool,
        leaky: bool,
    ) -> [usize; 3] {
        let idx = self.layers.len();
        let cin = input[2];
        let std = (2.0 / (size * size * cin) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let kernel = Tensor::from_fn(&[size, size, cin, filters], |_| T::lit(normal.sample(rng)));
        let kernel = self.params.add(format!("conv{idx}.kernel"), kernel, true);
        // A following batch norm removes any per-channel offset, so the conv
        // bias only trains on the linear head.
        let bias = self.params.add(
            format!("conv{idx}.bias"),
            Tensor::zeros(&[filters]),
            !batch_norm,
        );
        let bn = batch_norm.then(|| BnParams {
            gamma: self.params.add(
                format!("bn{idx}.gamma"),
                Tensor::full(&[filters], T::one()),
                true,
            ),
            beta: self
                .params
                .add(format!("bn{idx}.beta"), Tensor::zeros(&[filters]), true),
            mean: self.params.add(
                format!("bn{idx}.running_mean"),
                Tensor::zeros(&[filters]),
                false,
            ),
            var: self.params.add(
                format!("bn{idx}.running_var"),
                Tensor::full(&[filters], T::one()),
                false,
            ),
        });
        let output = [input[0], input[1], filters];
        self.layers.push(Layer {
            kind: LayerKind::Conv {
                size,
                filters,
                batch_norm,
                leaky,
            },
            label: format!("Convolutional {filters} {size} x {size} / 1"),
            on_main_path: true,
            output,
            params: Some(ConvParams { kernel, bias, bn }),
        });
        output
    }

    /// Kernel plus bias scalars of layer `i` (zero for parameterless layers).
    pub fn conv_param_count(&self, i: usize) -> usize {
        self.layers[i]
            .params
            .map(|p| self.params.value(p.kernel).len() + self.params.value(p.bias).len())
            .unwrap_or(0)
    }

    /// Runs the network on an `[N, E, E, 3]` input already on `g`.
    pub fn forward(&self, g: &mut Graph<'_, T>, input: Var) -> Result<ForwardPass> {
        let e = self.config.input_extent;
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != e || shape[2] != e || shape[3] != 3 {
            return Err(Error::shape(
                "detector forward",
                format!("expected [N, {e}, {e}, 3] input, got {shape:?}"),
            ));
        }
        let n = shape[0];
        let slope = T::lit(LEAKY_SLOPE);
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut audit = Vec::with_capacity(self.layers.len());
        let mut kinks = Vec::new();
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match &layer.kind {
                LayerKind::Conv { leaky, .. } => {
                    let p = layer.params.expect("conv layers own parameters");
                    let k = g.param(p.kernel);
                    let mut y = match p.bn {
                        Some(bn) => {
                            let y = g.conv2d(x, k, None, 1, Padding::Same)?;
                            let (gamma, beta) = (g.param(bn.gamma), g.param(bn.beta));
                            g.batch_norm(y, gamma, beta, bn.mean, bn.var)?
                        }
                        None => {
                            let b = g.param(p.bias);
                            g.conv2d(x, k, Some(b), 1, Padding::Same)?
                        }
                    };
                    if *leaky {
                        kinks.push((y, Kink::LeakyRelu));
                        y = g.leaky_relu(y, slope)?;
                    }
                    y
                }
                LayerKind::MaxPool => {
                    kinks.push((x, Kink::MaxPool));
                    g.maxpool2(x)?
                }
                LayerKind::Route(from) => match from.as_slice() {
                    [a] => outs[*a],
                    [a, b] => g.concat_channels(outs[*a], outs[*b])?,
                    _ => return Err(Error::InvalidConfig("route takes one or two layers".into())),
                },
                LayerKind::Reorg(block) => g.space_to_depth(x, *block)?,
            };
            let s = g.value(x).shape();
            audit.push(ShapeRecord {
                layer: i,
                label: layer.label.clone(),
                on_main_path: layer.on_main_path,
                shape: [s[1], s[2], s[3]],
            });
            outs.push(x);
        }
        let c = &self.config;
        let raw = g.reshape(
            x,
            &[
                n,
                c.grid(),
                c.grid(),
                c.num_anchors(),
                c.values_per_anchor(),
            ],
        )?;
        Ok(ForwardPass { raw, audit, kinks })
    }

    /// Inference-mode forward pass returning `[N, S, S, B, 5 + C]`.
    pub fn predict(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.params, Mode::Infer);
        let x = g.input(batch, false);
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out.raw).clone())
    }

    /// Detections for one image after thresholding and suppression, with
    /// boxes mapped back to the image's own pixel frame. The image goes
    /// through the same 8-bit resize as the training data.
    pub fn detect(
        &self,
        img: &RgbImage,
        conf_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<Detection>> {
        let e = self.config.input_extent;
        let x: Vec<T> = resize_area(img, e, e)
            .into_iter()
            .map(|v| T::lit((v * 255.0).round().clamp(0.0, 255.0) as f64 / 255.0))
            .collect();
        let raw = self.predict(Tensor::new(&[1, e, e, 3], x)?)?;
        let sx = img.width as f64 / e as f64;
        let sy = img.height as f64 / e as f64;
        let found = decode(
            raw.data(),
            &self.config.geometry(),
            &self.config.anchors,
            conf_threshold,
        );
        Ok(nms(&found, nms_iou)
            .into_iter()
            .map(|mut d| {
                d.bbox =
                    BoundingBox::new(d.bbox.cx * sx, d.bbox.cy * sy, d.bbox.w * sx, d.bbox.h * sy);
                d
            })
            .collect())
    }

    pub fn cast<U: Scalar>(&self) -> DetectorModel<U> {
        DetectorModel {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_conv_has_896_parameters() {
        let m = DetectorModel::<f32>::build(DetectorConfig::default().with_input_extent(64), 0)
            .unwrap();
        assert_eq!(m.conv_param_count(0), 3 * 3 * 3 * 32 + 32);
    }

    #[test]
    fn head_width_follows_anchors_and_classes() {
        let m = DetectorModel::<f32>::build(DetectorConfig::default(), 0).unwrap();
        let head = m.layers.last().unwrap();
        assert_eq!(head.output, [13, 13, 80]);
        assert_eq!(
            head.kind,
            LayerKind::Conv {
                size: 1,
                filters: 80,
                batch_norm: false,
                leaky: false
            }
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = DetectorConfig {
            num_classes: 0,
            ..DetectorConfig::default()
        };
        assert!(DetectorModel::<f32>::build(c, 0).is_err());
        let mut c = DetectorConfig::default();
        c.anchors.clear();
        assert!(DetectorModel::<f32>::build(c, 0).is_err());
        assert!(
            DetectorModel::<f32>::build(DetectorConfig::default().with_input_extent(100), 0)
                .is_err()
        );
    }

    #[test]
    fn wrong_input_extent_is_shape_error() {
        let m = DetectorModel::<f32>::build(DetectorConfig::default().with_input_extent(64), 0)
            .unwrap();
        let err = m.predict(Tensor::zeros(&[1, 32, 32, 3])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn small_forward_is_deterministic_and_finite() {
        let m = DetectorModel::<f32>::build(DetectorConfig::default().with_input_extent(64), 3)
            .unwrap();
        let a = m.predict(Tensor::zeros(&[1, 64, 64, 3])).unwrap();
        let b = m.predict(Tensor::zeros(&[1, 64, 64, 3])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 2, 2, 10, 8]);
        assert!(a.all_finite());
    }
}

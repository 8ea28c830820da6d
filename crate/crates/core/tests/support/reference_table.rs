//! Expected main-path layer stack of the detector at 416 px.

#![allow(dead_code)]

use pollen_core::detector::{DetectorModel, LayerKind};
use pollen_core::tensor::{Graph, Mode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Row {
    /// Filters, kernel size.
    Conv(usize, usize),
    MaxPool,
    Concat,
}

pub const INPUT_EXTENT: usize = 416;

/// Every row up to and including the concatenation.
pub const TRUNK: [(Row, [usize; 3]); 24] = [
    (Row::Conv(32, 3), [416, 416, 32]),
    (Row::MaxPool, [208, 208, 32]),
    (Row::Conv(64, 3), [208, 208, 64]),
    (Row::MaxPool, [104, 104, 64]),
    (Row::Conv(128, 3), [104, 104, 128]),
    (Row::Conv(64, 1), [104, 104, 64]),
    (Row::Conv(128, 3), [104, 104, 128]),
    (Row::MaxPool, [52, 52, 128]),
    (Row::Conv(256, 3), [52, 52, 256]),
    (Row::Conv(128, 1), [52, 52, 128]),
    (Row::Conv(256, 3), [52, 52, 256]),
    (Row::MaxPool, [26, 26, 256]),
    (Row::Conv(512, 3), [26, 26, 512]),
    (Row::Conv(256, 1), [26, 26, 256]),
    (Row::Conv(512, 3), [26, 26, 512]),
    (Row::MaxPool, [13, 13, 512]),
    (Row::Conv(1024, 3), [13, 13, 1024]),
    (Row::Conv(512, 1), [13, 13, 512]),
    (Row::Conv(1024, 3), [13, 13, 1024]),
    (Row::Conv(512, 1), [13, 13, 512]),
    (Row::Conv(1024, 3), [13, 13, 1024]),
    (Row::Conv(1024, 3), [13, 13, 1024]),
    (Row::Conv(1024, 3), [13, 13, 1024]),
    (Row::Concat, [13, 13, 1280]),
];

/// The conv after the concatenation.
pub const POST_CONCAT: (Row, [usize; 3]) = (Row::Conv(1024, 3), [13, 13, 1024]);

/// Head width printed in the reference table. It cannot hold 10 anchors of
/// box, objectness and three class scores; the model uses `10 * (5 + 3)`.
pub const PRINTED_HEAD_FILTERS: usize = 60;
pub const PRINTED_RESHAPE: [usize; 4] = [13, 13, 10, 6];

/// Layer kind and output shape of every main-path layer in a forward pass.
pub fn main_path_rows(model: &DetectorModel<f32>) -> Vec<(Row, [usize; 3])> {
    let e = model.config.input_extent;
    let mut g = Graph::new(&model.params, Mode::Infer);
    let x = g.input(Tensor::zeros(&[1, e, e, 3]), false);
    let out = model.forward(&mut g, x).unwrap();
    out.audit
        .iter()
        .filter(|r| r.on_main_path)
        .map(|r| {
            let row = match &model.layers[r.layer].kind {
                LayerKind::Conv { size, filters, .. } => Row::Conv(*filters, *size),
                LayerKind::MaxPool => Row::MaxPool,
                LayerKind::Route(from) if from.len() == 2 => Row::Concat,
                other => panic!("unexpected main-path layer {other:?}"),
            };
            (row, r.shape)
        })
        .collect()
}

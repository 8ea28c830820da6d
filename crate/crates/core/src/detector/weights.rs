use std::path::Path;

use crate::container::{self, Record};
use crate::error::{Error, Result};
use crate::io_util::{atomic_write, read_file};

use super::{Anchor, DetectorConfig, DetectorModel, LayerKind};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PLNW";

const TAG_META: u32 = 0;
const TAG_CONV_LINEAR: u32 = 1;
const TAG_CONV_BN_LEAKY: u32 = 2;
const TAG_MAXPOOL: u32 = 3;
const TAG_ROUTE: u32 = 4;
const TAG_REORG: u32 = 5;

pub fn weights_to_bytes(model: &DetectorModel<f32>) -> Vec<u8> {
    let c = &model.config;
    let mut records = vec![Record::new(
        TAG_META,
        vec![
            c.input_extent as u32,
            c.num_classes as u32,
            c.num_anchors() as u32,
            model.layers.len() as u32,
        ],
        vec![c
            .anchors
            .iter()
            .flat_map(|a| [a.w as f32, a.h as f32])
            .collect()],
    )];
    for layer in &model.layers {
        let rec = match &layer.kind {
            LayerKind::Conv { .. } => {
                let p = layer.params.expect("conv params");
                let kernel = model.params.value(p.kernel);
                let extents = kernel.shape().iter().map(|&e| e as u32).collect();
                let mut bufs = vec![
                    kernel.data().to_vec(),
                    model.params.value(p.bias).data().to_vec(),
                ];
                let tag = match p.bn {
                    Some(bn) => {
                        for id in [bn.gamma, bn.beta, bn.mean, bn.var] {
                            bufs.push(model.params.value(id).data().to_vec());
                        }
                        TAG_CONV_BN_LEAKY
                    }
                    None => TAG_CONV_LINEAR,
                };
                Record::new(tag, extents, bufs)
            }
            LayerKind::MaxPool => Record::new(TAG_MAXPOOL, vec![2], vec![]),
            LayerKind::Route(from) => {
                Record::new(TAG_ROUTE, from.iter().map(|&i| i as u32).collect(), vec![])
            }
            LayerKind::Reorg(b) => Record::new(TAG_REORG, vec![*b as u32], vec![]),
        };
        records.push(rec);
    }
    container::encode(WEIGHTS_MAGIC, &records)
}

fn mismatch(layer: usize, msg: impl Into<String>) -> Error {
    Error::Corrupt {
        offset: 0,
        reason: format!("layer {layer}: {}", msg.into()),
    }
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<DetectorModel<f32>> {
    let records = container::decode(WEIGHTS_MAGIC, bytes)?;
    let meta = records
        .first()
        .filter(|r| r.tag == TAG_META && r.extents.len() == 4);
    let meta = meta.ok_or_else(|| mismatch(0, "missing model header record"))?;
    let anchors_flat = meta
        .buffers
        .first()
        .ok_or_else(|| mismatch(0, "missing anchors"))?;
    let num_anchors = meta.extents[2] as usize;
    if anchors_flat.len() != 2 * num_anchors {
        return Err(mismatch(
            0,
            "anchor buffer length disagrees with anchor count",
        ));
    }
    let config = DetectorConfig {
        input_extent: meta.extents[0] as usize,
        num_classes: meta.extents[1] as usize,
        anchors: anchors_flat
            .chunks(2)
            .map(|p| Anchor {
                w: p[0] as f64,
                h: p[1] as f64,
            })
            .collect(),
    };
    let mut model = DetectorModel::<f32>::build(config, 0)
        .map_err(|e| mismatch(0, format!("invalid stored config: {e}")))?;
    if records.len() != model.layers.len() + 1 || meta.extents[3] as usize != model.layers.len() {
        return Err(mismatch(
            0,
            format!(
                "expected {} layers, file has {}",
                model.layers.len(),
                records.len().saturating_sub(1)
            ),
        ));
    }
    for (i, rec) in records[1..].iter().enumerate() {
        let layer = model.layers[i].clone();
        match (&layer.kind, rec.tag) {
            (LayerKind::Conv { batch_norm, .. }, tag)
                if tag
                    == if *batch_norm {
                        TAG_CONV_BN_LEAKY
                    } else {
                        TAG_CONV_LINEAR
                    } =>
            {
                let p = layer.params.expect("conv params");
                let mut ids = vec![p.kernel, p.bias];
                if let Some(bn) = p.bn {
                    ids.extend([bn.gamma, bn.beta, bn.mean, bn.var]);
                }
                let shape: Vec<u32> = model
                    .params
                    .value(p.kernel)
                    .shape()
                    .iter()
                    .map(|&e| e as u32)
                    .collect();
                if rec.extents != shape || rec.buffers.len() != ids.len() {
                    return Err(mismatch(
                        i,
                        format!("conv shape {:?} != {shape:?}", rec.extents),
                    ));
                }
                for (id, buf) in ids.into_iter().zip(&rec.buffers) {
                    let dst = model.params.value_mut(id);
                    if dst.len() != buf.len() {
                        return Err(mismatch(i, "parameter buffer length"));
                    }
                    dst.data_mut().copy_from_slice(buf);
                }
            }
            (LayerKind::MaxPool, TAG_MAXPOOL) => {}
            (LayerKind::Route(from), TAG_ROUTE)
                if rec
                    .extents
                    .iter()
                    .map(|&e| e as usize)
                    .eq(from.iter().copied()) => {}
            (LayerKind::Reorg(b), TAG_REORG) if rec.extents == [*b as u32] => {}
            (kind, tag) => {
                return Err(mismatch(
                    i,
                    format!("record tag {tag} does not match {kind:?}"),
                ))
            }
        }
    }
    Ok(model)
}

pub fn save_weights(model: &DetectorModel<f32>, path: &Path) -> Result<()> {
    atomic_write(path, &weights_to_bytes(model))
}

pub fn load_weights(path: &Path) -> Result<DetectorModel<f32>> {
    weights_from_bytes(&read_file(path)?)
}

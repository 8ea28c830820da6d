#![allow(dead_code)]

use pollen_core::detector::{BoundingBox, Detection};
use pollen_core::tensor::Tensor;

pub fn conv_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (n, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ks, cout) = (k.shape()[0], k.shape()[3]);
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; n * ho * wo * cout];
    for bi in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut s = b[co];
                    for dy in 0..ks {
                        for dx in 0..ks {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv =
                                    x.data()[((bi * h + iy as usize) * w + ix as usize) * cin + ci];
                                let kv = k.data()[((dy * ks + dx) * cin + ci) * cout + co];
                                s += xv * kv;
                            }
                        }
                    }
                    out[((bi * ho + oy) * wo + ox) * cout + co] = s;
                }
            }
        }
    }
    (vec![n, ho, wo, cout], out)
}

/// Values and first-position argmax of 2x2 stride-2 windows, NHWC.
pub fn maxpool_oracle(x: &Tensor<f32>) -> (Vec<f32>, Vec<usize>) {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (mut vals, mut args) = (Vec::new(), Vec::new());
    for b in 0..n {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for ch in 0..c {
                    let at = |dy: usize, dx: usize| {
                        x.data()[((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch]
                    };
                    let window = [at(0, 0), at(0, 1), at(1, 0), at(1, 1)];
                    let m = window.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    vals.push(m);
                    args.push(window.iter().position(|&v| v == m).unwrap());
                }
            }
        }
    }
    (vals, args)
}

/// Quadratic reference: walk candidates from most to least confident (ties
/// by input position) and keep one unless a kept box of its class overlaps
/// it by more than the threshold.
pub fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    for i in 0..idx.len() {
        for j in 0..idx.len() - 1 - i {
            let (a, b) = (&dets[idx[j]], &dets[idx[j + 1]]);
            if b.confidence > a.confidence {
                idx.swap(j, j + 1);
            }
        }
    }
    let mut keep = vec![false; dets.len()];
    for (pos, &i) in idx.iter().enumerate() {
        keep[i] = idx[..pos].iter().all(|&j| {
            !keep[j]
                || dets[j].class_id != dets[i].class_id
                || corner_iou(&dets[i].bbox, &dets[j].bbox) <= thr
        });
    }
    idx.into_iter()
        .filter(|&i| keep[i])
        .map(|i| dets[i])
        .collect()
}

pub fn corner_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = (
        a.cx - a.w / 2.0,
        a.cy - a.h / 2.0,
        a.cx + a.w / 2.0,
        a.cy + a.h / 2.0,
    );
    let (bx0, by0, bx1, by1) = (
        b.cx - b.w / 2.0,
        b.cy - b.h / 2.0,
        b.cx + b.w / 2.0,
        b.cy + b.h / 2.0,
    );
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Fraction of shared pixel centres on a 16384^2 bit raster of the unit square.
pub fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    const N: usize = 16384;
    const WORDS: usize = N / 64;
    let span = |lo: f64, hi: f64| {
        let first = ((lo * N as f64) - 0.5).ceil().max(0.0) as usize;
        let last = (((hi * N as f64) - 0.5).floor() as isize).min(N as isize - 1);
        (first, last)
    };
    let row_bits = |x0: f64, x1: f64| {
        let mut bits = vec![0u64; WORDS];
        let (f, l) = span(x0, x1);
        for i in (f as isize..=l).map(|i| i as usize) {
            bits[i / 64] |= 1 << (i % 64);
        }
        bits
    };
    let (ra, rb) = (row_bits(a.x0(), a.x1()), row_bits(b.x0(), b.x1()));
    let (ya, yb) = (span(a.y0(), a.y1()), span(b.y0(), b.y1()));
    let (mut ca, mut cb, mut both) = (0u64, 0u64, 0u64);
    for y in 0..N {
        let ina = y >= ya.0 && (y as isize) <= ya.1;
        let inb = y >= yb.0 && (y as isize) <= yb.1;
        for w in 0..WORDS {
            let wa = if ina { ra[w] } else { 0 };
            let wb = if inb { rb[w] } else { 0 };
            ca += wa.count_ones() as u64;
            cb += wb.count_ones() as u64;
            both += (wa & wb).count_ones() as u64;
        }
    }
    let union = ca + cb - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

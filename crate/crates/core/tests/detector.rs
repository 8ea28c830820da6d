mod support;

use pollen_core::detector::{
    decode, iou, load_weights, nms, save_weights, BoundingBox, Detection, DetectorConfig,
    DetectorModel,
};
use pollen_core::tensor::kernels::{conv2d, depth_to_space, maxpool2, space_to_depth, Padding};
use pollen_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles::{conv_oracle, maxpool_oracle, nms_reference, raster_iou};
use support::reference_table::{main_path_rows, Row, INPUT_EXTENT, POST_CONCAT, TRUNK};

#[test]
fn forward_shapes_follow_the_reference_stack() {
    let model = DetectorModel::<f32>::build(DetectorConfig::default(), 0).unwrap();
    assert_eq!(model.config.input_extent, INPUT_EXTENT);
    let rows = main_path_rows(&model);
    assert_eq!(rows.len(), TRUNK.len() + 2);
    for (i, (got, want)) in rows.iter().zip(TRUNK.iter()).enumerate() {
        assert_eq!(got, want, "row {}", i + 1);
    }
    assert_eq!(rows[TRUNK.len()], POST_CONCAT);
    assert_eq!(rows[TRUNK.len() + 1], (Row::Conv(80, 1), [13, 13, 80]));
    let raw = model.predict(Tensor::zeros(&[1, 416, 416, 3])).unwrap();
    assert_eq!(raw.shape(), &[1, 13, 13, 10, 8]);
}

#[test]
fn skip_branch_squeezes_then_reorganizes() {
    let model = DetectorModel::<f32>::build(DetectorConfig::default(), 0).unwrap();
    let branch: Vec<[usize; 3]> = model
        .layers
        .iter()
        .filter(|l| !l.on_main_path)
        .map(|l| l.output)
        .collect();
    assert_eq!(branch, vec![[26, 26, 512], [26, 26, 64], [13, 13, 256]]);
}

#[test]
fn weights_round_trip_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.plnw");
    let model =
        DetectorModel::<f32>::build(DetectorConfig::default().with_input_extent(64), 11).unwrap();
    save_weights(&model, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back.config, model.config);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[1, 64, 64, 3], |_| rng.random::<f32>());
    assert_eq!(back.predict(x.clone()).unwrap(), model.predict(x).unwrap());
    let again = dir.path().join("again.plnw");
    save_weights(&back, &again).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = [
        (2, 9, 7, 3, 3, 5, 1, Padding::Same),
        (1, 8, 8, 4, 1, 6, 1, Padding::Same),
        (2, 11, 10, 2, 3, 4, 2, Padding::Valid),
        (1, 12, 12, 5, 3, 3, 2, Padding::Same),
        (3, 6, 5, 8, 3, 7, 1, Padding::Valid),
        (1, 20, 20, 16, 3, 32, 1, Padding::Same),
    ];
    let mut worst = 0.0f64;
    for (n, h, w, cin, ks, cout, stride, padding) in cases {
        let x = Tensor::from_fn(&[n, h, w, cin], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::from_fn(&[ks, ks, cin, cout], |_| rng.random_range(-1.0..1.0));
        let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pad = if padding == Padding::Same { ks / 2 } else { 0 };
        let (shape, want) = conv_oracle(&x, &k, &b, stride, pad);
        let bt = Tensor::new(&[cout], b.clone()).unwrap();

        let got = conv2d(&x, &k, Some(&bt), stride, padding).unwrap();
        assert_eq!(got.shape(), shape.as_slice());
        let got32 = conv2d(
            &x.cast::<f32>(),
            &k.cast::<f32>(),
            Some(&bt.cast::<f32>()),
            stride,
            padding,
        )
        .unwrap();
        for ((a, a32), o) in got.data().iter().zip(got32.data()).zip(&want) {
            worst = worst.max((a - o).abs()).max((*a32 as f64 - o).abs());
        }
    }
    assert!(worst <= 1e-5, "max abs error {worst:e}");
}

#[test]
fn maxpool_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (n, h, w, c) in [(1, 4, 4, 1), (2, 8, 6, 3), (3, 26, 26, 5)] {
        // Coarse values force ties; the first window position wins them.
        let x = Tensor::from_fn(&[n, h, w, c], |_| rng.random_range(-3i32..3) as f32);
        let (got, arg) = maxpool2(&x).unwrap();
        let (want, first) = maxpool_oracle(&x);
        for ((g, a), (m, f)) in got.data().iter().zip(&arg).zip(want.iter().zip(&first)) {
            assert!((g - m).abs() <= 1e-5);
            assert_eq!(*a as usize, *f);
        }
    }
}

#[test]
fn nms_equals_quadratic_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let dets: Vec<Detection> = (0..50)
            .map(|_| Detection {
                bbox: BoundingBox::new(
                    rng.random_range(0.0..200.0),
                    rng.random_range(0.0..200.0),
                    rng.random_range(10.0..80.0),
                    rng.random_range(10.0..80.0),
                ),
                class_id: rng.random_range(0..3),
                // Two decimals so equal confidences occur.
                confidence: (rng.random_range(0..100) as f64) / 100.0,
            })
            .collect();
        let thr = rng.random_range(0.2..0.7);
        assert_eq!(nms(&dets, thr), nms_reference(&dets, thr));
    }
}

#[test]
fn iou_agrees_with_rasterization() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let w = rng.random_range(0.1..0.6);
        let h = rng.random_range(0.1..0.6);
        BoundingBox::new(
            // Margin keeps the shifted copy below on the canvas.
            rng.random_range(0.03 + w / 2.0..0.97 - w / 2.0),
            rng.random_range(0.03 + h / 2.0..0.97 - h / 2.0),
            w,
            h,
        )
    };
    let mut worst = 0.0f64;
    for i in 0..100 {
        let a = rand_box(&mut rng);
        // Every fourth pair is nested or a shifted copy, so high overlaps occur.
        let b = match i % 4 {
            0 => BoundingBox::new(a.cx, a.cy, a.w * 0.5, a.h * 0.7),
            1 => BoundingBox::new(a.cx + 0.02, a.cy - 0.01, a.w, a.h),
            _ => rand_box(&mut rng),
        };
        worst = worst.max((iou(&a, &b) - raster_iou(&a, &b)).abs());
    }
    assert!(worst <= 1e-3, "max deviation {worst:e}");
}

proptest! {
    #[test]
    fn reorg_is_a_permutation_undone_by_its_inverse(
        n in 1usize..3, hb in 1usize..4, wb in 1usize..4, c in 1usize..5, block in 1usize..4, seed in any::<u64>()
    ) {
        let (h, w) = (hb * block, wb * block);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[n, h, w, c], |_| rng.random::<f64>());
        let y = space_to_depth(&x, block).unwrap();
        prop_assert_eq!(y.shape(), &[n, hb, wb, c * block * block][..]);
        for b in 0..n {
            for oy in 0..hb {
                for ox in 0..wb {
                    for dy in 0..block {
                        for dx in 0..block {
                            for ch in 0..c {
                                let src = ((b * h + oy * block + dy) * w + ox * block + dx) * c + ch;
                                let dst = ((b * hb + oy) * wb + ox) * c * block * block + (dy * block + dx) * c + ch;
                                prop_assert_eq!(x.data()[src], y.data()[dst]);
                            }
                        }
                    }
                }
            }
        }
        prop_assert_eq!(depth_to_space(&y, block).unwrap(), x);
    }

    #[test]
    fn decoded_confidences_respect_the_threshold(seed in any::<u64>(), lo in 0.0f64..0.5, gap in 0.0f64..0.5) {
        let config = DetectorConfig::default().with_input_extent(96);
        let geom = config.geometry();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..geom.image_len()).map(|_| rng.random_range(-4.0..4.0)).collect();
        let loose = decode(&raw, &geom, &config.anchors, lo);
        let strict = decode(&raw, &geom, &config.anchors, lo + gap);
        prop_assert!(strict.len() <= loose.len());
        for d in &loose {
            prop_assert!(d.confidence >= lo && d.confidence <= 1.0);
            prop_assert!(d.class_id < 3);
            prop_assert!(d.bbox.w > 0.0 && d.bbox.h > 0.0);
        }
        for d in &strict {
            prop_assert!(loose.contains(d));
        }
        let kept = nms(&loose, 0.45);
        prop_assert!(kept.windows(2).all(|p| p[0].confidence >= p[1].confidence));
    }
}

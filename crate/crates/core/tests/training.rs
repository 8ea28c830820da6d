use pollen_core::detector::{
    load_weights, save_weights, BoundingBox, DetectorConfig, DetectorModel,
};
use pollen_core::synth::{gen_slide, SlideSpec};
use pollen_core::train::{fit_anchors, OptimizerSnapshot, PreparedImage, TrainConfig, Trainer};
use pollen_core::yolo::kmeans_anchors;
use proptest::prelude::*;

const EXTENT: usize = 128;

fn slides(n: usize, seed: u64) -> Vec<PreparedImage> {
    let spec = SlideSpec::default();
    (0..n)
        .map(|i| {
            let (slide, ann) = gen_slide(&spec, &format!("s{i}"), seed + i as u64).unwrap();
            let boxes: Vec<(BoundingBox, usize)> =
                ann.boxes.iter().map(|b| (b.bbox, b.class_id)).collect();
            PreparedImage::from_rgb(&ann.image, &slide.image, EXTENT, &boxes)
        })
        .collect()
}

fn trainer(data: &[PreparedImage], config: TrainConfig) -> Trainer {
    let anchors = fit_anchors(data, 5, EXTENT / 32, 1).unwrap();
    let det = DetectorConfig {
        anchors,
        ..DetectorConfig::default().with_input_extent(EXTENT)
    };
    Trainer::new(DetectorModel::<f32>::build(det, 2).unwrap(), config).unwrap()
}

#[test]
fn one_slide_is_memorized_within_two_hundred_steps() {
    let data = slides(1, 40);
    let mut config = TrainConfig {
        epochs: 200,
        batch_size: 1,
        augment: false,
        recalibration_images: 0,
        ..TrainConfig::default()
    };
    config.optimizer.lr = 1e-3;
    let mut t = trainer(&data, config);
    let refs: Vec<&PreparedImage> = data.iter().collect();
    let initial = t.batch_loss(&refs).unwrap().total;
    for _ in 0..200 {
        t.train_epoch(&data).unwrap();
    }
    let last = t.batch_loss(&refs).unwrap().total;
    assert!(last <= 0.1 * initial, "loss {initial:.3} -> {last:.3}");
}

#[test]
fn resuming_from_disk_continues_the_same_run() {
    let data = slides(4, 60);
    let config = TrainConfig {
        epochs: 3,
        batch_size: 2,
        recalibration_images: 2,
        ..TrainConfig::default()
    };
    let mut straight = trainer(&data, config.clone());
    let logs: Vec<f64> = (0..3)
        .map(|_| straight.train_epoch(&data).unwrap().loss.total)
        .collect();

    let dir = tempfile::tempdir().unwrap();
    let mut first = trainer(&data, config.clone());
    for _ in 0..2 {
        first.train_epoch(&data).unwrap();
    }
    save_weights(&first.model, &dir.path().join("w.plnw")).unwrap();
    first.snapshot().save(&dir.path().join("o.plno")).unwrap();
    drop(first);

    let model = load_weights(&dir.path().join("w.plnw")).unwrap();
    let snap = OptimizerSnapshot::load(&dir.path().join("o.plno")).unwrap();
    let mut resumed = Trainer::resume(model, config, snap).unwrap();
    let third = resumed.train_epoch(&data).unwrap();
    assert_eq!(third.epoch, 3);
    assert_eq!(third.loss.total, logs[2]);
    assert_eq!(resumed.model.params, straight.model.params);
}

#[test]
fn resumed_loss_starts_near_the_saved_one() {
    let data = slides(2, 80);
    // The schedule has decayed by the end of the first run, so the resumed
    // epoch continues at the same small step size.
    let config = TrainConfig {
        epochs: 30,
        batch_size: 2,
        warmup_steps: 20,
        augment: false,
        recalibration_images: 2,
        ..TrainConfig::default()
    };
    let mut t = trainer(&data, config.clone());
    let mut last = 0.0;
    for _ in 0..30 {
        last = t.train_epoch(&data).unwrap().loss.total;
    }
    let dir = tempfile::tempdir().unwrap();
    save_weights(&t.model, &dir.path().join("w.plnw")).unwrap();
    t.snapshot().save(&dir.path().join("o.plno")).unwrap();
    let model = load_weights(&dir.path().join("w.plnw")).unwrap();
    let snap = OptimizerSnapshot::load(&dir.path().join("o.plno")).unwrap();
    let more = TrainConfig {
        epochs: 31,
        ..config
    };
    let next = Trainer::resume(model, more, snap)
        .unwrap()
        .train_epoch(&data)
        .unwrap()
        .loss
        .total;
    assert!(
        (next - last).abs() <= 0.05 * last,
        "saved {last:.4}, resumed {next:.4}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn kmeans_cost_never_increases(
        shapes in prop::collection::vec((0.2f64..6.0, 0.2f64..6.0), 12..80),
        k in 1usize..8,
        seed in any::<u64>(),
    ) {
        let fit = kmeans_anchors(&shapes, k, seed).unwrap();
        prop_assert_eq!(fit.anchors.len(), k);
        for w in fit.cost_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", fit.cost_history);
        }
        let areas: Vec<f64> = fit.anchors.iter().map(|a| a.w * a.h).collect();
        prop_assert!(areas.windows(2).all(|p| p[0] <= p[1]));
    }
}

use pollen_core::auth::*;
use pollen_core::detector::{BoundingBox, Detection};
use pollen_core::synth::{derive_seed, SlideSpec};

fn sample(profile: &HoneyProfile, frames: usize, seed: u64) -> AuthFeatures {
    let anns = profile
        .sample_frames(&SlideSpec::default(), frames, seed)
        .unwrap();
    features_from_annotations(&anns).unwrap()
}

fn five_and_five(seed: u64) -> Vec<(AuthFeatures, String)> {
    let (e, m) = (HoneyProfile::eucalyptus(), HoneyProfile::manuka());
    (0..5)
        .flat_map(|i| {
            [
                (sample(&e, 10, derive_seed(seed, 2 * i)), e.label.clone()),
                (
                    sample(&m, 10, derive_seed(seed, 2 * i + 1)),
                    m.label.clone(),
                ),
            ]
        })
        .collect()
}

#[test]
fn ten_training_samples_classified_and_fresh_samples_mostly() {
    let train = five_and_five(1);
    let (model, fit) = train_auth(&train, &AuthConfig::default()).unwrap();
    assert!(fit.final_loss < 0.05, "{fit:?}");
    for (f, label) in &train {
        assert_eq!(&model.authenticate(f).decision, label);
    }
    let fresh = five_and_five(99).into_iter().chain(five_and_five(100));
    let correct = fresh
        .filter(|(f, l)| &model.authenticate(f).decision == l)
        .count();
    assert!(correct >= 18, "{correct}/20");
}

#[test]
fn retraining_is_bit_identical_and_file_round_trips() {
    let train = five_and_five(3);
    let (a, _) = train_auth(&train, &AuthConfig::default()).unwrap();
    let (b, _) = train_auth(&train, &AuthConfig::default()).unwrap();
    assert_eq!(a, b);
    let back = AuthModel::from_bytes(&a.to_bytes()).unwrap();
    assert_eq!(back, a);
    for (f, _) in &train {
        assert_eq!(back.score(f).to_bits(), a.score(f).to_bits());
    }
    let mut bytes = a.to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(AuthModel::from_bytes(&bytes).is_err());
}

#[test]
fn separable_pair_converges_fast() {
    let samples = vec![
        (
            AuthFeatures::new([9, 1, 0], 1).unwrap(),
            "eucalyptus".to_string(),
        ),
        (
            AuthFeatures::new([1, 1, 4], 1).unwrap(),
            "manuka".to_string(),
        ),
    ];
    let cfg = AuthConfig {
        max_epochs: 5000,
        target_loss: 0.0,
        ..AuthConfig::default()
    };
    let (_, fit) = train_auth(&samples, &cfg).unwrap();
    assert!(fit.final_loss < 0.01, "{fit:?}");
    let one = vec![samples[0].clone()];
    assert!(train_auth(&one, &cfg).is_err());
}

#[test]
fn scaling_frames_and_counts_leaves_features_unchanged() {
    let f = AuthFeatures::new([12, 5, 3], 4).unwrap();
    let g = AuthFeatures::new([36, 15, 9], 12).unwrap();
    assert_eq!(f.vector(), g.vector());
    let (model, _) = train_auth(&five_and_five(5), &AuthConfig::default()).unwrap();
    assert_eq!(
        model.authenticate(&f).decision,
        model.authenticate(&g).decision
    );
}

#[test]
fn ground_truth_boxes_pass_through_as_counts() {
    let anns = HoneyProfile::eucalyptus()
        .sample_frames(&SlideSpec::default(), 6, 8)
        .unwrap();
    let per_frame: Vec<Vec<Detection>> = anns
        .iter()
        .map(|a| {
            a.boxes
                .iter()
                .map(|b| Detection {
                    bbox: b.bbox,
                    class_id: b.class_id,
                    confidence: 1.0,
                })
                .collect()
        })
        .collect();
    let from_dets = extract_features(&per_frame).unwrap();
    assert_eq!(from_dets, features_from_annotations(&anns).unwrap());
    let mut reversed = per_frame.clone();
    reversed.reverse();
    assert_eq!(extract_features(&reversed).unwrap(), from_dets);
    assert!(extract_features(&[]).is_err());
    let one = extract_features(&[vec![
        Detection {
            bbox: BoundingBox::new(5.0, 5.0, 2.0, 2.0),
            class_id: 0,
            confidence: 0.9
        };
        3
    ]])
    .unwrap();
    assert_eq!((one.counts, one.density), ([3, 0, 0], 3.0));
}

#[test]
fn halved_counts_are_flagged_as_diluted() {
    let reference = SlideSpec::default();
    let halved = reference.with_counts_scaled(0.5);
    let mut flagged = 0;
    for t in 0..100u64 {
        let density = |spec: &SlideSpec, salt: u64| {
            let anns: Vec<_> = (0..20u64)
                .map(|i| {
                    pollen_core::synth::layout_slide(spec, derive_seed(t * 2 + salt, i))
                        .unwrap()
                        .annotation("frame")
                })
                .collect();
            features_from_annotations(&anns).unwrap().density
        };
        let r = density(&reference, 0);
        let s = density(&halved, 1);
        flagged += dilution_check(s, r, DEFAULT_TOLERANCE).unwrap().diluted as u32;
    }
    assert!(flagged >= 95, "{flagged}/100");
}

#[test]
fn mixtures_differ_and_resamples_agree() {
    let (e, m) = (HoneyProfile::eucalyptus(), HoneyProfile::manuka());
    for t in 0..100u64 {
        let ce = e.sample_counts(50, derive_seed(7, 4 * t)).unwrap();
        let cm = m.sample_counts(50, derive_seed(7, 4 * t + 1)).unwrap();
        let ce2 = e.sample_counts(50, derive_seed(7, 4 * t + 2)).unwrap();
        let cm2 = m.sample_counts(50, derive_seed(7, 4 * t + 3)).unwrap();
        let tot = |c: &[[u32; 3]]| -> [u64; 3] {
            let mut s = [0u64; 3];
            for f in c {
                for k in 0..3 {
                    s[k] += f[k] as u64;
                }
            }
            s
        };
        assert!(distribution_compare(&tot(&ce), &tot(&cm)).unwrap() > 0.3);
        assert!(distribution_compare(&tot(&ce), &tot(&ce2)).unwrap() < 0.15);
        assert!(distribution_compare(&tot(&cm), &tot(&cm2)).unwrap() < 0.15);
    }
}

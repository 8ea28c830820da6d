use pollen_web::{box_iou, nms_keep, render_slide, Authenticator};

#[test]
fn slide_pixels_and_boxes_line_up() {
    let slide = render_slide(3, 1.0).unwrap();
    assert_eq!(
        slide.rgba().len(),
        (slide.width() * slide.height() * 4) as usize
    );
    let boxes = slide.boxes();
    assert_eq!(boxes.len() % 6, 0);
    assert!(boxes.chunks(6).all(|b| b[5] == 1.0 && b[4] < 3.0));
    let sparse = render_slide(3, 0.0).unwrap();
    assert!(sparse.boxes().is_empty());
}

#[test]
fn kept_indices_point_into_the_input() {
    let boxes = [
        50.0, 50.0, 20.0, 20.0, 0.0, 0.6, //
        51.0, 50.0, 20.0, 20.0, 0.0, 0.9, //
        51.0, 50.0, 20.0, 20.0, 1.0, 0.5, //
        150.0, 50.0, 20.0, 20.0, 0.0, 0.7,
    ];
    assert_eq!(nms_keep(&boxes, 0.45).unwrap(), vec![1, 3, 2]);
    assert_eq!(nms_keep(&boxes, 1.0).unwrap(), vec![1, 3, 0, 2]);
    let iou = box_iou(&boxes[..6], &boxes[6..12]).unwrap();
    assert!((iou - 19.0 / 21.0).abs() < 1e-12);
}

#[test]
fn reference_like_counts_pass_and_thin_samples_are_diluted() {
    let auth = Authenticator::new(1).unwrap();
    let manuka: serde_json::Value =
        serde_json::from_str(&auth.check(15, 9, 36, 10).unwrap()).unwrap();
    assert_eq!(manuka["decision"], "manuka");
    assert_eq!(manuka["diluted"], false);
    let thin: serde_json::Value = serde_json::from_str(&auth.check(5, 3, 12, 10).unwrap()).unwrap();
    assert_eq!(thin["diluted"], true);
    let empty: serde_json::Value = serde_json::from_str(&auth.check(0, 0, 0, 10).unwrap()).unwrap();
    assert!(empty["distance"].is_null());
}

use pollen_core::tensor::gradcheck::op_suite;
use pollen_core::yolo::network_gradcheck;

#[test]
fn every_op_within_tolerance_over_twenty_trials() {
    for r in op_suite(11, 20).unwrap() {
        assert!(r.trials >= 20);
        assert!(
            r.max_relative_error <= 1e-4,
            "{}: {:.3e}",
            r.name,
            r.max_relative_error
        );
    }
}

#[test]
fn full_detector_loss_matches_finite_differences() {
    let r = network_gradcheck(64, 20, 5).unwrap();
    assert_eq!(r.checked_entries, 40);
    eprintln!("{r:?}");
    assert!(r.max_relative_error <= 1e-4, "{:.3e}", r.max_relative_error);
}

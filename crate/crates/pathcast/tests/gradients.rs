mod common;

use common::*;

#[test]
fn codec_generator_gradient_matches_finite_differences() {
    let (err, n) = codec_gradient_error(11).unwrap();
    assert!(n <= 500, "{n} parameters");
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn mapper_gradient_matches_finite_differences() {
    let (err, _) = mapper_gradient_error(5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn straight_through_copies_decoder_gradient() {
    checks::straight_through_exact(2).unwrap();
}

#[test]
fn stop_gradient_isolation() {
    checks::stop_gradient_exact(4).unwrap();
}

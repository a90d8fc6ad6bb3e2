use liftrefine::checks::{
    camera_roundtrip_oracle, composite_reference, ddim_inversion_oracle, gradient_suite, guidance_identity_oracle,
    rendering_oracle,
};
use liftrefine::diffusion::NoiseSchedule;

#[test]
fn gradient_suite_passes_on_five_seeds() {
    let outcomes = gradient_suite(&[0, 1, 2, 3, 4]).unwrap();
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.line()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    for family in ["render-path-images", "render-path-param:", "diffusion-loss-param:", "composite-sigma"] {
        assert!(outcomes.iter().any(|o| o.name.starts_with(family)), "missing {family}");
    }
}

#[test]
fn oracles_pass() {
    assert!(camera_roundtrip_oracle(7, 50, 1000).unwrap().passed);
    assert!(rendering_oracle(7, 100).unwrap().passed);
    assert!(ddim_inversion_oracle(7, 20, &NoiseSchedule::default()).unwrap().passed);
    assert!(guidance_identity_oracle(7).unwrap().passed);
}

#[test]
fn reference_compositing_limits() {
    let white = [1.0; 3];
    assert_eq!(composite_reference(&[], &[], &[], white), white);
    let opaque = composite_reference(&[1e9, 1.0], &[[0.1, 0.2, 0.3], [1.0; 3]], &[1.0, 1.0], white);
    assert!((opaque[2] - 0.3).abs() < 1e-12);
}

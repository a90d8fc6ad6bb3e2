use liftrefine::nn::ParamStore;
use liftrefine::renderer::{
    composite, march_rays, render, render_pixels, Decoder, FieldSample, RadianceField, RenderConfig, TriPlaneField,
    WHITE,
};
use liftrefine::tensor::{grad_check, GradCheckConfig};
use liftrefine::triplane::{bicubic_resize, planes_from_fn, TriPlane};
use liftrefine::{CameraPose, Intrinsics, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Isotropic Gaussian blob of density with a smoothly varying colour.
struct GaussianField {
    peak: f64,
    std: f64,
}

impl<'t> RadianceField<'t> for GaussianField {
    fn evaluate(&self, tape: &'t Tape, points: Tensor, _with_feature: bool) -> Result<FieldSample<'t>> {
        let n = points.shape()[0];
        let mut sigma = Vec::with_capacity(n);
        let mut color = Vec::with_capacity(3 * n);
        for p in points.data().chunks(3) {
            let r2 = p.iter().map(|v| v * v).sum::<f64>();
            sigma.push(self.peak * (-r2 / (2.0 * self.std * self.std)).exp());
            color.extend([0.5 + 0.4 * (5.0 * p[0]).sin(), 0.5 + 0.4 * (4.0 * p[1]).cos(), 0.5 + p[2]]);
        }
        Ok(FieldSample {
            sigma: tape.constant(Tensor::new([n, 1], sigma)?),
            color: tape.constant(Tensor::new([n, 3], color)?),
            feature: None,
        })
    }
}

fn orbit(az: f64, el: f64, size: usize) -> CameraPose {
    CameraPose::orbit(Intrinsics::centered(1.5 * size as f64, size, size), az, el, 1.3).unwrap()
}

fn rendered(field: &GaussianField, pose: &CameraPose, n_samples: usize) -> Tensor {
    let tape = Tape::no_grad();
    let cfg = RenderConfig {
        n_samples,
        ..RenderConfig::default()
    };
    (*render(&tape, field, pose, &cfg, false).unwrap().image.value()).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weights_are_a_subprobability_with_falling_transmittance(
        sigma in prop::collection::vec(0.0f64..40.0, 1..24),
        delta_scale in 0.001f64..0.2,
    ) {
        let s = sigma.len();
        let tape = Tape::no_grad();
        // One-hot features make the composited feature vector the weights.
        let field = FieldSample {
            sigma: tape.constant(Tensor::new([s, 1], sigma.clone()).unwrap()),
            color: tape.constant(Tensor::full([s, 3], 0.5)),
            feature: Some(tape.constant(Tensor::identity(s))),
        };
        let deltas = Tensor::from_fn([1, s], |i| delta_scale * (1.0 + (i % 3) as f64));
        let out = composite(&tape, &field, deltas, WHITE).unwrap();
        let weights = out.feature.unwrap().value().data().to_vec();
        let total = out.weight_sum.item();
        prop_assert!(weights.iter().all(|&w| w >= 0.0));
        prop_assert!(weights.iter().sum::<f64>() <= 1.0 + 1e-9);
        prop_assert!((0.0..=1.0).contains(&total));
        let mut transmittance = 1.0;
        for w in weights {
            let next = transmittance - w;
            prop_assert!(next <= transmittance);
            transmittance = next;
        }
    }

    #[test]
    fn doubling_samples_shrinks_the_error(
        peak in 5.0f64..30.0,
        std in 0.08f64..0.2,
        az in -3.0f64..3.0,
        el in -0.5f64..1.0,
    ) {
        let field = GaussianField { peak, std };
        let pose = orbit(az, el, 6);
        let reference = rendered(&field, &pose, 4096);
        let errors: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&n| rendered(&field, &pose, n).max_abs_diff(&reference))
            .collect();
        for pair in errors.windows(2) {
            prop_assert!(pair[0] >= 1.5 * pair[1], "errors {:?}", errors);
        }
    }

    #[test]
    fn triplane_query_is_affine_along_axis_segments(
        seed in any::<u64>(),
        axis in 0usize..3,
        cell in 0usize..4,
        others in (0.0f64..1.0, 0.0f64..1.0),
        fractions in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
    ) {
        let r = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Tensor::randn([3, 2, r, r], 1.0, &mut rng);
        let tape = Tape::no_grad();
        let tri = planes_from_fn(&tape, 2, r, |p, c, y, x| values.data()[((p * 2 + c) * r + y) * r + x]);
        // Plane nodes sit at i / (r − 1) − 0.5.
        let node = |g: f64| g / (r - 1) as f64 - 0.5;
        let point = |f: f64| {
            let mut fixed = [others.0, others.1].into_iter();
            let p: [f64; 3] = std::array::from_fn(|a| {
                if a == axis {
                    node(cell as f64 + f)
                } else {
                    node(fixed.next().unwrap() * (r - 1) as f64)
                }
            });
            p
        };
        let fs = [fractions.0, fractions.1, fractions.2];
        let pts: Vec<f64> = fs.iter().flat_map(|&f| point(f)).collect();
        let q = tri.query(tape.constant(Tensor::new([3, 3], pts).unwrap())).unwrap();
        let q = q.value();
        for c in 0..2 {
            let v = |i: usize| q.data()[i * 2 + c];
            let lhs = (v(2) - v(0)) * (fs[1] - fs[0]);
            let rhs = (v(1) - v(0)) * (fs[2] - fs[0]);
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn bicubic_upsampling_keeps_constants(value in -10.0f64..10.0, r in 2usize..17, log2 in 1usize..4) {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::full([3, 2, r, r], value));
        let y = bicubic_resize(x, r << log2).unwrap();
        // Exact up to rounding in the two separable passes.
        let tol = 4.0 * f64::EPSILON * value.abs();
        prop_assert!(y.value().data().iter().all(|&v| (v - value).abs() <= tol));
    }
}

#[test]
fn pixel_loss_gradient_reaches_triplane_entries() {
    let pose = orbit(0.6, 0.3, 8);
    let pixels = [(3, 3), (4, 4), (2, 5), (5, 2), (4, 3), (1, 1)];
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let decoder = Decoder::new(&mut store, "decoder", 2, 8, 2, 2.0, &mut rng);
        let planes = Tensor::randn([3, 2, 4, 4], 1.0, &mut rng);
        let target = Tensor::uniform([pixels.len(), 3], 0.0, 1.0, &mut rng);
        let cfg = RenderConfig {
            n_samples: 8,
            ..RenderConfig::default()
        };
        let report = grad_check(
            |tape, x: Var| {
                let params = store.bind(tape);
                let field = TriPlaneField {
                    triplane: TriPlane::new(x)?,
                    decoder: &decoder,
                    params: &params,
                };
                let out = render_pixels(tape, &field, &pose, &pixels, &cfg, true)?;
                let err = out.color.sub(tape.constant(target.clone()))?.square().mean();
                err.add(out.feature.unwrap().square().mean().scale(0.1))
            },
            &planes,
            &GradCheckConfig::with_tol(1e-5, 1e-3),
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: max relative error {}", report.max_error);
        assert!(report.coords.iter().any(|c| c.autodiff.abs() > 1e-8));
    }
}

#[test]
fn background_pixels_are_white_and_empty() {
    assert_eq!(RenderConfig::default().background, WHITE);
    let field = GaussianField { peak: 20.0, std: 0.1 };
    // Wide field of view: the corner rays miss the unit cube entirely.
    let pose = CameraPose::orbit(Intrinsics::centered(2.0, 8, 8), 0.4, 0.2, 1.3).unwrap();
    let tape = Tape::no_grad();
    let corner = pose.pixel_to_ray(0.5, 0.5);
    assert!(corner.intersect_cube(0.5).is_none());
    let out = march_rays(&tape, &field, &[corner], &[0], &RenderConfig::default(), false).unwrap();
    assert!(out.weight_sum.item() < 1e-6);
    assert_eq!(out.color.value().data(), &WHITE);

    // A ray through the cube far from a narrow blob is background to within 1e-6 too.
    let field = GaussianField { peak: 20.0, std: 0.05 };
    let grazing = CameraPose::orbit(Intrinsics::centered(12.0, 8, 8), 0.4, 0.2, 1.3).unwrap();
    let out = render_pixels(&tape, &field, &grazing, &[(0, 0)], &RenderConfig::default(), false).unwrap();
    assert!(out.weight_sum.item() < 1e-6, "weight sum {}", out.weight_sum.item());
}

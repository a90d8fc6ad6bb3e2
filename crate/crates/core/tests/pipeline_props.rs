use liftrefine::checks::tiny_recon_config;
use liftrefine::model::{Reconstructor, View};
use liftrefine::pipeline::{infer_progressive, EchoRefiner, Provenance};
use liftrefine::{CameraPose, Intrinsics, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pose(az: f64, el: f64) -> CameraPose {
    CameraPose::orbit(Intrinsics::centered(10.0, 8, 8), az, el, 1.3).unwrap()
}

fn model(seed: u64) -> Reconstructor {
    let mut model = Reconstructor::new(tiny_recon_config(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.gen_range(-1.0..1.0));
    }
    model
}

fn views(seed: u64, n: usize) -> Vec<View> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| View {
            image: Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut rng),
            pose: pose(0.7 * i as f64, 0.1 * i as f64),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn echo_progression_grows_the_buffer_and_matches_direct_reconstruction(
        seed in any::<u64>(),
        n_inputs in 1usize..4,
        n_iters in 0usize..4,
    ) {
        let model = model(seed);
        let inputs = views(seed, n_inputs);
        let target = pose(2.4, 0.4);
        let out = infer_progressive(&model, &inputs, &target, n_iters, &EchoRefiner, seed).unwrap();

        prop_assert_eq!(out.buffer.len(), n_inputs + n_iters);
        prop_assert_eq!(&out.buffer.views()[..n_inputs], inputs.as_slice());
        prop_assert!(out.buffer.tags()[..n_inputs].iter().all(|&t| t == Provenance::Input));
        prop_assert!(out.buffer.tags()[n_inputs..].iter().all(|&t| t == Provenance::Generated));
        prop_assert_eq!(&out.buffer.views()[n_inputs..], out.intermediates.as_slice());

        // Each echoed view is the reconstruction from the buffer as it stood.
        for (k, view) in out.intermediates.iter().enumerate() {
            let prefix = &out.buffer.views()[..n_inputs + k];
            prop_assert_eq!(&view.image, &model.predict_image(prefix, &view.pose).unwrap());
        }
        let direct = model.predict_image(out.buffer.views(), &target).unwrap();
        prop_assert_eq!(out.image, direct);
    }
}

#[test]
fn every_input_view_shapes_the_first_reconstruction() {
    let model = model(5);
    let inputs = views(6, 3);
    let target = pose(2.0, 0.2);
    let base = model.predict_image(&inputs, &target).unwrap();
    for k in 0..inputs.len() {
        let mut altered = inputs.clone();
        altered[k].image = altered[k].image.map(|v| 1.0 - v);
        let changed = model.predict_image(&altered, &target).unwrap();
        assert!(changed.max_abs_diff(&base) > 1e-9, "input view {k} had no effect");
    }
}

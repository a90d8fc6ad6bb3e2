use liftrefine::losses::{psnr, recon_loss, ssim, LossConfig, PerceptualMode};
use liftrefine::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    Tensor::uniform([3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn loss(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> f64 {
    let tape = Tape::no_grad();
    recon_loss(tape.constant(pred.clone()), tape.constant(target.clone()), cfg)
        .unwrap()
        .item()
}

fn loss_config() -> impl Strategy<Value = LossConfig> {
    (0.0f64..2.0, any::<bool>()).prop_map(|(lambda_perc, perc)| LossConfig {
        lambda_perc,
        perceptual_mode: if perc { PerceptualMode::GradientPyramid } else { PerceptualMode::Off },
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recon_loss_is_zero_exactly_on_equal_images(
        seed in any::<u64>(),
        cfg in loss_config(),
        pixel in 0usize..(3 * 8 * 8),
        bump in prop_oneof![-0.5f64..-1e-6, 1e-6f64..0.5],
    ) {
        let target = image(seed, 8, 8);
        prop_assert_eq!(loss(&target, &target, &cfg), 0.0);
        let mut pred = target.clone();
        pred.data_mut()[pixel] += bump;
        prop_assert!(loss(&pred, &target, &cfg) > 0.0);
        let other = image(seed ^ 0x5eed, 8, 8);
        prop_assert!(loss(&other, &target, &cfg) >= 0.0);
    }

    #[test]
    fn psnr_is_symmetric_and_order_free(seed in any::<u64>(), peak in 0.5f64..2.0) {
        let (a, b) = (image(seed, 6, 6), image(seed.wrapping_add(1), 6, 6));
        let ab = psnr(&a, &b, peak).unwrap();
        prop_assert_eq!(ab, psnr(&b, &a, peak).unwrap());

        let mut order: Vec<usize> = (0..a.numel()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permute = |t: &Tensor| Tensor::from_fn([3, 6, 6], |i| t.data()[order[i]]);
        let shuffled = psnr(&permute(&a), &permute(&b), peak).unwrap();
        prop_assert!((ab - shuffled).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_an_image_with_itself_is_one(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let x = image(seed, h, w);
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }
}

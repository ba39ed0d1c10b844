//! Randomized invariants over the library's core algebra.

use proptest::prelude::*;

use layerdiff::attention::pool_mask;
use layerdiff::composer;
use layerdiff::config::TrainingConfig;
use layerdiff::metrics::{psnr, ssim};
use layerdiff::scenes::MaskSet;
use layerdiff::tensor::Tensor;
use layerdiff::training::StageController;

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..=1.0, c * h * w)
        .prop_map(move |d| Tensor::new(&[c, h, w], d))
}

fn binary_mask(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::bool::ANY, h * w)
        .prop_map(move |bits| {
            Tensor::new(&[h, w], bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Removal sets are order- and duplicate-insensitive.
    #[test]
    fn removal_sets_behave_like_sets(
        bg in image(3, 6, 6),
        l0 in image(3, 6, 6),
        l1 in image(3, 6, 6),
        m0 in binary_mask(6, 6),
        m1 in binary_mask(6, 6),
        swap in prop::bool::ANY,
    ) {
        let order = if swap { vec![1, 0] } else { vec![0, 1] };
        let masks = MaskSet::new(vec![m0, m1], order);
        let layers = [l0, l1];
        let a = composer::compose(&bg, &layers, &masks, &[0, 1]).unwrap();
        let b = composer::compose(&bg, &layers, &masks, &[1, 0, 0, 1]).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    /// Composing after removing everything returns the background.
    #[test]
    fn full_removal_restores_background(
        bg in image(3, 6, 6),
        l0 in image(3, 6, 6),
        m0 in binary_mask(6, 6),
    ) {
        let masks = MaskSet::new(vec![m0], vec![0]);
        let out = composer::compose(&bg, &[l0], &masks, &[0]).unwrap();
        prop_assert_eq!(out.data(), bg.data());
    }

    #[test]
    fn psnr_is_symmetric_and_nonnegative_on_unit_range(
        a in image(1, 4, 4),
        b in image(1, 4, 4),
    ) {
        let ab = psnr(&a, &b, 1.0);
        let ba = psnr(&b, &a, 1.0);
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn ssim_is_bounded(a in image(1, 8, 8), b in image(1, 8, 8)) {
        let s = ssim(&a, &b, 1.0);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
    }

    /// The ramp weight is monotone in the step index and bounded by its max.
    #[test]
    fn ramp_weight_is_monotone(
        t0 in 0u64..100,
        span in 1u64..100,
        lambda_max in 0.0f64..4.0,
    ) {
        let mut cfg = TrainingConfig::default();
        cfg.t0 = t0;
        cfg.t1 = t0 + span;
        cfg.lambda_max = lambda_max;
        let ctrl = StageController::from_config(&cfg);
        let mut prev = -1.0;
        for step in 0..(t0 + span + 10) {
            let lam = ctrl.lambda_t(step);
            prop_assert!(lam >= prev && lam <= lambda_max);
            prev = lam;
        }
    }

    /// Downsampled masks stay binary for any input mask and extent.
    #[test]
    fn pooled_masks_stay_binary(m in binary_mask(8, 8), half in prop::bool::ANY) {
        let e = if half { 4 } else { 2 };
        let pooled = pool_mask(&m, e, e);
        prop_assert!(pooled.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(pooled.shape(), &[e, e]);
    }
}

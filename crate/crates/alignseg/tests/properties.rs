//! Property tests for the algebraic invariants that hold for all inputs.

use alignseg::cam::{compute_cam, split_patches, ObjectMask};
use alignseg::data::{augment, generate, labels_from_mask, CorpusConfig};
use alignseg::encoder::resize_pos_embed;
use alignseg::objective::{assemble, LossTerms, LossWeights};
use alignseg::{lr_at, TrainConfig};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn grid3(h: usize, w: usize, d: usize) -> impl Strategy<Value = Array3<f64>> {
    proptest::collection::vec(-10.0f64..10.0, h * w * d)
        .prop_map(move |v| Array3::from_shape_vec((h, w, d), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// fg + bg reassembles the tokens bit-exactly for any mask.
    #[test]
    fn split_is_a_partition(tokens in grid3(4, 4, 6), bits in proptest::collection::vec(any::<bool>(), 16)) {
        let mask = ObjectMask {
            mask: Array2::from_shape_vec((4, 4), bits.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap(),
            beta: 0.5,
        };
        let (fg, bg) = split_patches(&tokens, &mask).unwrap();
        for ((a, b), t) in fg.iter().zip(bg.iter()).zip(tokens.iter()) {
            prop_assert_eq!(a + b, *t);
            prop_assert!(*a == 0.0 || *b == 0.0);
        }
    }

    /// CAMs are invariant to positive feature scaling and always normalized.
    #[test]
    fn cam_scale_invariance(f in grid3(3, 3, 4), alpha in 0.01f64..100.0) {
        let w = Array2::from_shape_fn((2, 4), |(c, k)| ((c * 7 + k * 3) as f64).sin());
        let base = compute_cam(&f, &w).unwrap();
        let scaled = compute_cam(&(&f * alpha), &w).unwrap();
        for (a, b) in base.maps.iter().zip(scaled.maps.iter()) {
            prop_assert!((a - b).abs() < 1e-6);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    /// The weighted total reacts to each part with exactly its coefficient.
    #[test]
    fn assemble_is_linear(
        parts in proptest::collection::vec(-5.0f64..5.0, 7),
        delta in -2.0f64..2.0,
        which in 0usize..7,
    ) {
        let w = LossWeights::default();
        let mk = |v: &[f64]| LossTerms {
            cls: v[0], inter: v[1], im: v[2], ex: v[3], ptc: v[4], seg: v[5], reg: v[6],
        };
        let base = assemble(&mk(&parts), &w).unwrap();
        let mut bumped = parts.clone();
        bumped[which] += delta;
        let moved = assemble(&mk(&bumped), &w).unwrap();
        let coeff = [1.0, 1.0, w.lambda_i, w.lambda_e, w.lambda_p, 1.0, 1.0][which];
        prop_assert!((moved.total - base.total - coeff * delta).abs() < 1e-9);
    }

    /// Bilinear resize of the positional embedding is a linear operator.
    #[test]
    fn pos_embed_resize_is_linear(
        x in grid3(3, 3, 2),
        y in grid3(3, 3, 2),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        side in 1usize..7,
    ) {
        let combo = resize_pos_embed(&(&x * a + &y * b), side);
        let parts = resize_pos_embed(&x, side) * a + resize_pos_embed(&y, side) * b;
        for (u, v) in combo.iter().zip(parts.iter()) {
            prop_assert!((u - v).abs() < 1e-6);
        }
    }

    /// The schedule never increases after warmup, for arbitrary settings.
    #[test]
    fn lr_never_increases_after_warmup(
        iters in 10usize..500,
        warmup_frac in 0.05f64..0.9,
        power in 0.1f64..3.0,
    ) {
        let cfg = TrainConfig {
            iters,
            warmup_iters: ((iters as f64 * warmup_frac) as usize).max(1).min(iters - 1),
            poly_power: power,
            ..TrainConfig::default()
        };
        let mut prev = f64::INFINITY;
        for step in cfg.warmup_iters..iters {
            let lr = lr_at(step, &cfg);
            prop_assert!(lr <= prev + 1e-18);
            prop_assert!(lr >= 0.0);
            prev = lr;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Augmentation keeps pixels in range and labels consistent with the
    /// transformed mask, for arbitrary seeds.
    #[test]
    fn augment_invariants(seed in any::<u64>()) {
        let corpus = generate(&CorpusConfig {
            num_train: 2,
            num_val: 1,
            ..CorpusConfig::default()
        }).unwrap();
        let aug = augment(&corpus.train[0], seed);
        prop_assert!(aug.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(&aug.labels, &labels_from_mask(&aug.gt_mask, 3));
    }
}

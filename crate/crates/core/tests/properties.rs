use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uagan::losses::{
    cycle_loss, generator_coefficients, lambda_shape_schedule, lr_schedule, seg_cross_entropy, total_generator_loss,
    GeneratorTerms, LossWeights,
};
use uagan::metrics::{
    assd, assd_brute_force, confusion_counts, dice, precision, sensitivity, specificity, Aggregate, Mask3, Spacing,
};
use uagan::networks::{attention_map, attentional_fuse, AttentionBlock, Fusion};
use uagan::phantom::{
    augment, decode_slice, encode_slice, expand_and_concat, generate_phantom_patient, one_hot_modality,
    zscore_normalize, Grid, ModalityLabel, PhantomParams,
};
use uagan_autograd::{Shape, Tensor, Var};

fn mask_strategy(d: usize, h: usize, w: usize) -> impl Strategy<Value = Mask3> {
    prop::collection::vec(prop::bool::weighted(0.35), d * h * w)
        .prop_map(move |v| Mask3::new(d, h, w, v.into_iter().map(u8::from).collect()).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (Mask3, Mask3)> {
    (mask_strategy(3, 6, 6), mask_strategy(3, 6, 6))
}

fn nonempty_pair() -> impl Strategy<Value = (Mask3, Mask3)> {
    mask_pair().prop_filter("both masks nonempty", |(a, b)| !a.is_empty() && !b.is_empty())
}

/// Embeds `m` in a larger zero volume at offset `(oz, oy, ox)`.
fn shifted(m: &Mask3, oz: usize, oy: usize, ox: usize, pad: usize) -> Mask3 {
    let (d, h, w) = m.dims();
    let mut out = Mask3::zeros(d + pad, h + pad, w + pad);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out.set(z + oz, y + oy, x + ox, m.get(z, y, x));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_bounds_and_symmetry((a, b) in mask_pair()) {
        let (cab, cba) = (confusion_counts(&a, &b).unwrap(), confusion_counts(&b, &a).unwrap());
        prop_assert_eq!(cab.total(), (3 * 6 * 6) as u64);
        prop_assert_eq!(dice(&cab), dice(&cba));
        for v in [dice(&cab), precision(&cab), sensitivity(&cab), specificity(&cab)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn dice_is_harmonic_mean_of_precision_and_sensitivity((a, b) in mask_pair()) {
        let c = confusion_counts(&a, &b).unwrap();
        prop_assume!(c.tp > 0);
        let (p, s) = (precision(&c), sensitivity(&c));
        prop_assert!((dice(&c) - 2.0 * p * s / (p + s)).abs() < 1e-12);
    }

    #[test]
    fn assd_matches_brute_force_and_is_symmetric((a, b) in nonempty_pair(), sx in 0.5f64..2.0, sz in 0.5f64..3.0) {
        let s = Spacing { sx, sy: 1.0, sz };
        let fast = assd(&a, &b, s).unwrap();
        prop_assert!(fast >= 0.0);
        prop_assert!((fast - assd_brute_force(&a, &b, s).unwrap()).abs() < 1e-9);
        prop_assert!((fast - assd(&b, &a, s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_under_joint_translation((a, b) in nonempty_pair(), oz in 0usize..3, oy in 0usize..3, ox in 0usize..3) {
        // Pad on every side first so border voxels stay border-free in both volumes.
        let (a0, b0) = (shifted(&a, 1, 1, 1, 2), shifted(&b, 1, 1, 1, 2));
        let (a1, b1) = (shifted(&a, 1 + oz, 1 + oy, 1 + ox, 5), shifted(&b, 1 + oz, 1 + oy, 1 + ox, 5));
        let (a0p, b0p) = (shifted(&a0, 0, 0, 0, 3), shifted(&b0, 0, 0, 0, 3));
        let (c0, c1) = (confusion_counts(&a0p, &b0p).unwrap(), confusion_counts(&a1, &b1).unwrap());
        prop_assert_eq!(c0, c1);
        let s = Spacing::default();
        prop_assert!((assd(&a0p, &b0p, s).unwrap() - assd(&a1, &b1, s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn assd_scales_linearly_with_spacing((a, b) in nonempty_pair(), k in 0.25f64..4.0) {
        let s = Spacing { sx: 0.8, sy: 1.2, sz: 2.0 };
        let base = assd(&a, &b, s).unwrap();
        prop_assert!((assd(&a, &b, s.scaled(k)).unwrap() - k * base).abs() <= 1e-9 * (1.0 + k * base));
    }

    #[test]
    fn identical_masks_are_perfect(a in mask_strategy(3, 6, 6)) {
        prop_assume!(!a.is_empty());
        let c = confusion_counts(&a, &a).unwrap();
        prop_assert_eq!(dice(&c), 1.0);
        prop_assert_eq!(assd(&a, &a, Spacing::default()).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_mean_within_range(values in prop::collection::vec(-100.0f64..100.0, 1..20)) {
        let a = Aggregate::of(values.iter().copied().map(Some));
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(a.mean >= lo - 1e-9 && a.mean <= hi + 1e-9);
        prop_assert!(a.std >= 0.0);
        prop_assert_eq!(a.n, values.len());
    }

    #[test]
    fn lr_schedule_is_monotone_and_bounded(e in 0usize..100) {
        let (a, b) = (lr_schedule(e).unwrap(), lr_schedule(e + 1).unwrap());
        prop_assert!(b <= a);
        prop_assert!((1e-6..=1e-4).contains(&a));
    }

    #[test]
    fn shape_weight_ramps_to_its_cap(e in 0usize..200) {
        let w = LossWeights::default();
        let (a, b) = (lambda_shape_schedule(e, &w), lambda_shape_schedule(e + 1, &w));
        prop_assert!(b >= a);
        prop_assert!((0.0..=w.lambda_shape_max).contains(&a));
    }

    #[test]
    fn total_generator_loss_is_weighted_sum(
        t in prop::array::uniform5(0.0f64..5.0), epoch in 0usize..100
    ) {
        let w = LossWeights::default();
        let terms = GeneratorTerms { g_adv: t[0], g_cls: t[1], g_rec: t[2], l_seg: t[3], l_shape: t[4] };
        let total = total_generator_loss(&terms, &w, epoch).unwrap();
        let want = t[0] + w.lambda_cls * t[1] + w.lambda_rec * t[2] + w.lambda_seg * t[3]
            + lambda_shape_schedule(epoch, &w) * t[4];
        prop_assert!((total - want).abs() <= 1e-9 * want.abs().max(1.0));
        prop_assert_eq!(generator_coefficients(&w, epoch)[4], lambda_shape_schedule(epoch, &w));
    }

    #[test]
    fn seg_cross_entropy_is_nonnegative(vals in prop::collection::vec(-8.0f32..8.0, 32), bits in prop::collection::vec(any::<bool>(), 16)) {
        let logits = Var::constant(Tensor::from_vec(Shape::new(1, 2, 4, 4), vals).unwrap());
        let mask = Tensor::from_vec(Shape::new(1, 1, 4, 4), bits.into_iter().map(|b| f32::from(u8::from(b))).collect()).unwrap();
        prop_assert!(seg_cross_entropy(&logits, &mask).unwrap().item() >= 0.0);
    }

    #[test]
    fn cycle_loss_is_zero_only_on_identity(vals in prop::collection::vec(-3.0f32..3.0, 16)) {
        let x = Var::constant(Tensor::from_vec(Shape::new(1, 1, 4, 4), vals).unwrap());
        prop_assert_eq!(cycle_loss(&x, &x).unwrap().item(), 0.0);
        let y = x.add_scalar(0.5).unwrap();
        prop_assert!((cycle_loss(&y, &x).unwrap().item() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn attention_map_stays_open(seed in any::<u64>(), vals in prop::collection::vec(-3.0f32..3.0, 3 * 16)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = AttentionBlock::new("a", 3, &mut rng);
        let other = Var::constant(Tensor::from_vec(Shape::new(1, 3, 4, 4), vals).unwrap());
        let m = attention_map(&other, &block).unwrap();
        prop_assert_eq!(m.shape().c(), 1);
        prop_assert!(m.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fusion_modes(own in prop::collection::vec(-3.0f32..3.0, 32), other in prop::collection::vec(-3.0f32..3.0, 32)) {
        let s = Shape::new(1, 2, 4, 4);
        let (own, other) = (Var::constant(Tensor::from_vec(s, own).unwrap()), Var::constant(Tensor::from_vec(s, other).unwrap()));
        let off = attentional_fuse(&own, &other, Fusion::Off).unwrap();
        prop_assert_eq!(off.value(), own.value());
        let add = attentional_fuse(&own, &other, Fusion::Add).unwrap();
        prop_assert_eq!(add.value(), &own.value().zip_map(other.value(), |a, b| a + b).unwrap());
    }

    #[test]
    fn one_hot_has_a_single_one(m in 1usize..8, i in 0usize..8) {
        prop_assume!(i < m);
        let v = one_hot_modality(i, m).unwrap();
        prop_assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
        prop_assert_eq!(v.iter().sum::<f32>(), 1.0);
        prop_assert_eq!(v[i], 1.0);
    }

    #[test]
    fn slice_codec_roundtrips(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Grid::new(h, w, (0..h * w).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect()).unwrap();
        let mask = Grid::new(h, w, (0..h * w).map(|_| u8::from(rng.gen_bool(0.5))).collect()).unwrap();
        let (i2, m2) = decode_slice(&encode_slice(&image, &mask).unwrap()).unwrap();
        prop_assert_eq!(i2.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), image.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(m2, mask);
    }

    #[test]
    fn zscore_has_zero_mean_unit_std(vals in prop::collection::vec(-50.0f32..50.0, 8..64)) {
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        prop_assume!(var.sqrt() > 1e-3);
        let z = zscore_normalize(&vals).unwrap();
        let zm = z.iter().map(|&v| v as f64).sum::<f64>() / z.len() as f64;
        let zs = (z.iter().map(|&v| (v as f64 - zm).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        prop_assert!(zm.abs() < 1e-4);
        prop_assert!((zs - 1.0).abs() < 1e-4);
    }

    #[test]
    fn expand_and_concat_layout(h in 1usize..6, w in 1usize..6, m in 1usize..4, i in 0usize..4) {
        prop_assume!(i < m);
        let image = Grid::new(h, w, (0..h * w).map(|k| k as f32).collect()).unwrap();
        let label = one_hot_modality(i, m).unwrap();
        let t = expand_and_concat(&image, &label);
        prop_assert_eq!(t.shape(), Shape::new(1, 1 + m, h, w));
        prop_assert_eq!(&t.data()[..h * w], &image.data[..]);
        for (plane, &l) in t.data()[h * w..].chunks(h * w).zip(&label) {
            prop_assert!(plane.iter().all(|&v| v == l));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn phantom_geometry_is_shared_across_modalities(seed in any::<u64>()) {
        let params = PhantomParams { image_size: 32, brain_radius_range: (10.0, 13.0), tumor_radius_range: (2.5, 4.0), slices_per_patient: 3, ..Default::default() };
        let a = generate_phantom_patient(&params, ModalityLabel::new(0, 3).unwrap(), seed).unwrap();
        let b = generate_phantom_patient(&params, ModalityLabel::new(2, 3).unwrap(), seed).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.mask, &y.mask);
            prop_assert!(x.mask.data.iter().all(|&v| v <= 1));
            prop_assert_eq!((x.image.h, x.image.w), (x.mask.h, x.mask.w));
            prop_assert!(x.image.data != y.image.data || x.mask.data.iter().all(|&v| v == 0));
        }
        prop_assert_eq!(a, generate_phantom_patient(&params, ModalityLabel::new(0, 3).unwrap(), seed).unwrap());
    }
}

#[test]
fn augment_preserves_mask_binaryness_and_shape() {
    let params = PhantomParams {
        image_size: 32,
        brain_radius_range: (10.0, 13.0),
        tumor_radius_range: (2.5, 4.0),
        slices_per_patient: 3,
        ..Default::default()
    };
    let slices = generate_phantom_patient(&params, ModalityLabel::new(1, 3).unwrap(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..1000 {
        let s = &slices[k % slices.len()];
        let a = augment(s, &mut rng);
        assert_eq!((a.image.h, a.image.w, a.mask.h, a.mask.w), (s.image.h, s.image.w, s.mask.h, s.mask.w));
        assert!(a.mask.data.iter().all(|&v| v <= 1));
        assert!(a.image.data.iter().all(|v| v.is_finite()));
    }
}

use nalgebra::DMatrix;
use proptest::prelude::*;
use tch::{Device, Kind, Tensor};

use partseg::adversary::{area_loss, compose_values, concentration_loss, LossWeights};
use partseg::config::{Interpolation, ScaleFormula, SCALE_EPS};
use partseg::corpus::BenchmarkSpec;
use partseg::eval::{foreground_iou, landmark_error, landmark_regression_fit, pixels_to_normalized, normalized_to_pixels};
use partseg::experiments::connected_components;
use partseg::fields::{downsample_with_margin, gaussian_heatmaps, upsample_and_crop, MarginGrid};
use partseg::imageio::{from_u8, to_u8};
use partseg::latent::{derive_seed, part_stats};
use partseg::masks::{mask_embedding_map, MaskStack};

fn t(values: &[f64], shape: &[i64]) -> Tensor {
    Tensor::from_slice(values).view(shape)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).abs().max().double_value(&[])
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn softmax_masks_lie_on_the_simplex(logits in prop::collection::vec(-40.0f64..40.0, 4 * 6 * 6), margin in 0usize..2) {
        let masks = MaskStack::from_logits(&t(&logits, &[1, 4, 6, 6]), margin);
        let sums = masks.probs.sum_dim_intlist(1, false, Kind::Double);
        prop_assert!(max_abs_diff(&sums, &Tensor::ones_like(&sums)) < 1e-12);
        prop_assert!(masks.probs.min().double_value(&[]) >= 0.0);
        prop_assert_eq!(masks.probs.size(), vec![1, 4, 6 - 2 * margin as i64, 6 - 2 * margin as i64]);
    }

    #[test]
    fn heatmaps_peak_at_their_center_and_move_with_it(
        cx in -0.9f64..0.9, cy in -0.9f64..0.9, scale in 0.05f64..1.0, dx in -0.5f64..0.5, dy in -0.5f64..0.5,
    ) {
        let site = t(&[cx, cy], &[1, 1, 2]);
        let s = t(&[scale], &[1, 1]);
        prop_assert!((gaussian_heatmaps(&site, &t(&[cx, cy], &[1, 1, 2]), &s).unwrap().values.double_value(&[0, 0, 0, 0]) - 1.0).abs() < 1e-15);
        let grid = MarginGrid::new(5, 7, 2).unwrap();
        let h0 = gaussian_heatmaps(&grid.coords(Kind::Double, Device::Cpu), &t(&[cx, cy], &[1, 1, 2]), &s).unwrap().values;
        let h1 = gaussian_heatmaps(&grid.shifted(dx, dy).coords(Kind::Double, Device::Cpu), &t(&[cx + dx, cy + dy], &[1, 1, 2]), &s).unwrap().values;
        prop_assert!(max_abs_diff(&h0, &h1) < 1e-12);
        prop_assert!(h0.max().double_value(&[]) <= 1.0 && h0.min().double_value(&[]) >= 0.0);
    }

    #[test]
    fn part_stats_follow_translation_and_ignore_order(
        pts in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 2), dx in -1.0f64..1.0, dy in -1.0f64..1.0,
    ) {
        let p = t(&pts, &[1, 2, 4, 2]);
        for formula in [ScaleFormula::Typeset, ScaleFormula::SampleStd] {
            let (c0, s0) = part_stats(&p, formula, SCALE_EPS).unwrap();
            let (c1, s1) = part_stats(&(&p + t(&[dx, dy], &[2])), formula, SCALE_EPS).unwrap();
            prop_assert!(max_abs_diff(&(&c0 + t(&[dx, dy], &[2])), &c1) < 1e-12);
            prop_assert!(max_abs_diff(&s0, &s1) < 1e-9);
            prop_assert!(s0.min().double_value(&[]) >= SCALE_EPS * (1.0 - 1e-12));
            let (c2, s2) = part_stats(&p.flip([2]), formula, SCALE_EPS).unwrap();
            prop_assert!(max_abs_diff(&c0, &c2) < 1e-12 && max_abs_diff(&s0, &s2) < 1e-12);
        }
    }

    #[test]
    fn embedding_map_is_linear_in_the_embeddings(
        h in prop::collection::vec(0.0f64..1.0, 2 * 3 * 3), e1 in prop::collection::vec(-1.0f64..1.0, 2 * 4),
        e2 in prop::collection::vec(-1.0f64..1.0, 2 * 4), a in -3.0f64..3.0,
    ) {
        let hm = t(&h, &[1, 2, 3, 3]);
        let (w1, w2) = (t(&e1, &[1, 2, 4]), t(&e2, &[1, 2, 4]));
        let lhs = mask_embedding_map(&hm, &(&w1 * a + &w2)).unwrap();
        let rhs = mask_embedding_map(&hm, &w1).unwrap() * a + mask_embedding_map(&hm, &w2).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn concentration_is_nonnegative_and_mass_scale_free(
        m in prop::collection::vec(0.01f64..1.0, 2 * 4 * 4), c in prop::collection::vec(-1.0f64..1.0, 4), k in 0.1f64..10.0,
    ) {
        let grid = MarginGrid::new(4, 4, 0).unwrap().coords(Kind::Double, Device::Cpu);
        let masks = t(&m, &[1, 2, 4, 4]);
        let centers = t(&c, &[1, 2, 2]);
        let a = concentration_loss(&masks, &centers, &grid).unwrap().double_value(&[]);
        let b = concentration_loss(&(&masks * k), &centers, &grid).unwrap().double_value(&[]);
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0));
    }

    #[test]
    fn area_loss_vanishes_below_the_mask_mass(m in prop::collection::vec(0.0f64..1.0, 2 * 3 * 3), frac in 0.0f64..1.0) {
        let masks = t(&m, &[1, 2, 3, 3]);
        prop_assert!(area_loss(&(&masks * frac), &masks).unwrap().double_value(&[]) == 0.0);
        let over = area_loss(&(&masks + 0.5), &masks).unwrap().double_value(&[]);
        prop_assert!((over - 2.0 * 9.0 * 0.5).abs() < 1e-9);
    }

    #[test]
    fn upsampling_keeps_linear_fields_on_the_finer_grid(
        res in 4usize..10, margin in 1usize..5, ax in -2.0f64..2.0, ay in -2.0f64..2.0, b in -1.0f64..1.0,
    ) {
        let field = |g: &MarginGrid| {
            let c = g.coords(Kind::Double, Device::Cpu);
            (c.select(-1, 0) * ax + c.select(-1, 1) * ay + b).unsqueeze(0).unsqueeze(0)
        };
        let coarse = MarginGrid::square(res, margin).unwrap();
        let fine = MarginGrid::square(2 * res, margin).unwrap();
        let up = upsample_and_crop(&field(&coarse), margin, Interpolation::Bilinear).unwrap();
        prop_assert_eq!(up.size(), vec![1, 1, fine.height() as i64, fine.width() as i64]);
        prop_assert!(max_abs_diff(&up, &field(&fine)) < 1e-9);
        let down = downsample_with_margin(&field(&fine), margin).unwrap();
        prop_assert_eq!(down.size(), vec![1, 1, coarse.height() as i64, coarse.width() as i64]);
        let interior = |x: &Tensor| x.narrow(2, margin as i64, res as i64).narrow(3, margin as i64, res as i64);
        prop_assert!(max_abs_diff(&interior(&down), &interior(&field(&coarse))) < 1e-9);
    }

    #[test]
    fn loss_composition_is_the_weighted_sum(
        g in -5.0f64..5.0, d in 0.0f64..5.0, gp in 0.0f64..5.0, con in 0.0f64..5.0, area in 0.0f64..5.0,
        wg in 0.0f64..20.0, wc in 0.0f64..40.0, wa in 0.0f64..5.0,
    ) {
        let (gt, dt) = compose_values(g, d, gp, con, area, LossWeights { gp: wg, con: wc, area: wa });
        prop_assert_eq!(gt, g + wc * con + wa * area);
        prop_assert_eq!(dt, d + wg * gp);
    }

    #[test]
    fn regression_recovers_linear_maps(
        x in prop::collection::vec(-1.0f64..1.0, 12 * 3), a in prop::collection::vec(-2.0f64..2.0, 3 * 2),
    ) {
        let xm = DMatrix::from_row_slice(12, 3, &x);
        let am = DMatrix::from_row_slice(3, 2, &a);
        let fit = landmark_regression_fit(&xm, &(&xm * &am)).unwrap();
        if !fit.rank_deficient {
            prop_assert!((fit.predict(&xm) - &xm * &am).abs().max() < 1e-8);
        }
    }

    #[test]
    fn regression_residual_shrinks_with_more_columns(
        x in prop::collection::vec(-1.0f64..1.0, 10 * 4), y in prop::collection::vec(-1.0f64..1.0, 10 * 2),
    ) {
        let xm = DMatrix::from_row_slice(10, 4, &x);
        let ym = DMatrix::from_row_slice(10, 2, &y);
        let residual = |cols: usize| {
            let sub = xm.columns(0, cols).into_owned();
            (landmark_regression_fit(&sub, &ym).unwrap().predict(&sub) - &ym).norm()
        };
        for cols in 1..4 {
            prop_assert!(residual(cols + 1) <= residual(cols) + 1e-10);
        }
    }

    #[test]
    fn landmark_error_ignores_similarity_transforms(
        p in prop::collection::vec(0.0f64..64.0, 6 * 4), g in prop::collection::vec(0.0f64..64.0, 6 * 4),
        angle in -3.1f64..3.1, scale in 0.2f64..5.0, tx in -50.0f64..50.0, ty in -50.0f64..50.0,
    ) {
        let (pm, gm) = (DMatrix::from_row_slice(6, 4, &p), DMatrix::from_row_slice(6, 4, &g));
        let norm: Vec<f64> = (0..6).map(|i| 1.0 + i as f64).collect();
        let transform = |m: &DMatrix<f64>| {
            DMatrix::from_fn(6, 4, |i, j| {
                let (x, y) = (m[(i, j - j % 2)], m[(i, j - j % 2 + 1)]);
                let (c, s) = (angle.cos(), angle.sin());
                if j % 2 == 0 { scale * (c * x - s * y) + tx } else { scale * (s * x + c * y) + ty }
            })
        };
        let scaled: Vec<f64> = norm.iter().map(|n| n * scale).collect();
        let a = landmark_error(&pm, &gm, &norm).unwrap();
        let b = landmark_error(&transform(&pm), &transform(&gm), &scaled).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(0i64..3, 16), b in prop::collection::vec(0i64..2, 16)) {
        let pred = Tensor::from_slice(&a).view([1, 4, 4]);
        let gt = Tensor::from_slice(&b).view([1, 4, 4]);
        let iou = foreground_iou(&pred, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        let pred_fg = pred.gt(0).to_kind(Kind::Int64);
        prop_assert!((foreground_iou(&gt, &pred_fg).unwrap() - iou).abs() < 1e-12);
        prop_assert_eq!(foreground_iou(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn pixel_round_trips(u in 0.0f64..127.0, bytes in prop::collection::vec(0u8..=255, 12)) {
        prop_assert!((normalized_to_pixels(pixels_to_normalized(u, 128), 128) - u).abs() < 1e-9);
        let img = Tensor::from_slice(&bytes).view([1, 3, 2, 2]);
        prop_assert!(to_u8(&from_u8(&img, Kind::Float)).equal(&img));
    }

    #[test]
    fn components_cover_every_pixel(labels in prop::collection::vec(0i64..3, 25)) {
        let counts = connected_components(&labels, 5, 5, 3);
        for class in 0..3 {
            let present = labels.contains(&(class as i64));
            prop_assert_eq!(counts[class] > 0, present);
            prop_assert!(counts[class] <= labels.iter().filter(|&&l| l == class as i64).count());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn benchmark_samples_are_reproducible_and_consistent(seed in 0u64..1000, index in 0usize..100, parts in 1usize..5) {
        let spec = BenchmarkSpec { parts, resolution: 32, seed, ..BenchmarkSpec::default() };
        let a = spec.sample(index).unwrap();
        let b = spec.sample(index).unwrap();
        prop_assert!(a.image == b.image && a.labels == b.labels && a.keypoints == b.keypoints);
        prop_assert!(a.labels.iter().all(|&l| l as usize <= parts));
        for kp in &a.keypoints {
            prop_assert!(kp.iter().all(|v| (0.0..32.0).contains(v)));
        }
    }

    #[test]
    fn seed_derivation_is_a_function_of_all_parts(a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(derive_seed(&[a, b]), derive_seed(&[a, b]));
        prop_assert_ne!(derive_seed(&[a, b]), derive_seed(&[a, b.wrapping_add(1)]));
    }
}

use approx::assert_relative_eq;
use candle_core::{DType, Device, Tensor};
use glmae::eval::dice;
use glmae::interp::resize_trilinear;
use glmae::objectives::sharpen;
use glmae::patch::{masked_count, patchify_grid, sample_mask, unpatchify};
use glmae::teacher::{ema_update, init_teacher, lr_at, momentum_at, ScheduleState};
use glmae::views::{overlap_ratio, sample_crop_geometry, Placement};
use glmae::vit::ParamStore;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn shape3(lo: usize, hi: usize) -> impl Strategy<Value = [usize; 3]> {
    [lo..=hi, lo..=hi, lo..=hi]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_round_trip(grid in shape3(1, 3), patch in shape3(1, 4), seed in any::<u64>()) {
        let size = [grid[0] * patch[0], grid[1] * patch[1], grid[2] * patch[2]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vox: Vec<f32> = (0..size.iter().product()).map(|_| rand::Rng::random(&mut rng)).collect();
        let g = patchify_grid(&vox, size, patch).unwrap();
        prop_assert_eq!(g.num_patches(), grid.iter().product::<usize>());
        prop_assert_eq!(unpatchify(&g.patches, g.grid_dims, patch).unwrap(), vox);
    }

    #[test]
    fn mask_count_is_exact(p in 1usize..300, ratio in 0.0f64..1.0, seed in any::<u64>()) {
        let m = masked_count(ratio, p);
        prop_assert!(m < p);
        let mask = sample_mask(p, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(mask.len(), p);
        prop_assert_eq!(mask.iter().filter(|&&x| x).count(), m);
    }

    #[test]
    fn dice_symmetric_and_order_free(
        labels in prop::collection::vec((0u8..3, 0u8..3), 8..200),
        seed in any::<u64>(),
    ) {
        let (a, b): (Vec<u8>, Vec<u8>) = labels.into_iter().unzip();
        prop_assume!(a.iter().chain(&b).any(|&x| x > 0));
        let ab = dice(&a, &b, 3).unwrap();
        let ba = dice(&b, &a, 3).unwrap();
        prop_assert_eq!(&ab.per_class, &ba.per_class);
        prop_assert!((0.0..=100.0).contains(&ab.mean));

        let mut idx: Vec<usize> = (0..a.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut idx[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let pa: Vec<u8> = idx.iter().map(|&i| a[i]).collect();
        let pb: Vec<u8> = idx.iter().map(|&i| b[i]).collect();
        prop_assert_eq!(dice(&pa, &pb, 3).unwrap().per_class, ab.per_class);
        prop_assert_eq!(dice(&a, &a, 3).unwrap().mean, 100.0);
    }

    #[test]
    fn ema_stays_between(vals in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40), mu in 0.0f64..=1.0) {
        let (s, t): (Vec<f64>, Vec<f64>) = vals.into_iter().unzip();
        let n = s.len();
        let mut student = ParamStore::new(DType::F64);
        student.insert("student.encoder.w", Tensor::from_vec(t.clone(), n, &Device::Cpu).unwrap()).unwrap();
        let teacher = init_teacher(&student).unwrap();
        student.get("student.encoder.w").unwrap().set(&Tensor::from_vec(s.clone(), n, &Device::Cpu).unwrap()).unwrap();
        ema_update(&student, &teacher, mu).unwrap();
        let next = teacher.values("teacher.encoder.w").unwrap();
        for i in 0..n {
            prop_assert!(next[i] >= t[i].min(s[i]) && next[i] <= t[i].max(s[i]));
            if mu == 1.0 { prop_assert_eq!(next[i], t[i]); }
        }
    }

    #[test]
    fn sharpened_rows_sum_to_one(rows in 1usize..6, k in 2usize..40, t in 0.02f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e: Vec<f64> = (0..rows * k).map(|_| rand::Rng::random_range(&mut rng, -20.0..20.0)).collect();
        let probs = sharpen(&Tensor::from_vec(e, (rows, k), &Device::Cpu).unwrap(), t).unwrap().probs;
        for row in probs.to_vec2::<f64>().unwrap() {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn overlap_is_a_percentage(side in shape3(2, 40), a in 0.05f64..1.0, b in 0.05f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = sample_crop_geometry(side, (a.min(b), a.max(b)), Placement::Uniform, &mut rng).unwrap();
        let g = sample_crop_geometry(side, (0.5, 1.0), Placement::Uniform, &mut rng).unwrap();
        let r = overlap_ratio(&l, &g).unwrap();
        prop_assert!((0.0..=100.0).contains(&r));
        prop_assert_eq!(overlap_ratio(&l, &l).unwrap(), 100.0);
        for i in 0..3 {
            prop_assert!(l.origin[i] + l.extent[i] <= side[i]);
        }
    }

    #[test]
    fn schedules_stay_in_range(total in 1usize..5000, step in 0usize..6000, mu0 in 0.9f64..1.0) {
        let s = ScheduleState::new(total, mu0, 1e-3).at(step);
        let mu = momentum_at(&s).unwrap();
        prop_assert!(mu >= mu0 - 1e-15 && mu <= 1.0);
        let next = momentum_at(&s.at(step + 1)).unwrap();
        prop_assert!(next >= mu);
        let lr = lr_at(&s);
        prop_assert!((0.0..=1e-3).contains(&lr));
    }

    #[test]
    fn resize_keeps_constants(src in shape3(1, 9), dst in shape3(1, 9), c in -100.0f32..100.0) {
        let out = resize_trilinear(&vec![c; src.iter().product()], src, dst);
        prop_assert_eq!(out.len(), dst.iter().product::<usize>());
        for x in out {
            assert_relative_eq!(x, c, epsilon = 1e-4, max_relative = 1e-5);
        }
    }
}

/// Crop origins along each axis are uniform over the valid positions.
#[test]
fn placement_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let side = 64;
    let draws = 20_000;
    let extent = 32;
    let slots = side - extent + 1;
    let mut counts = vec![vec![0usize; slots]; 3];
    for _ in 0..draws {
        let g = sample_crop_geometry([side; 3], (0.5, 0.5), Placement::Uniform, &mut rng).unwrap();
        for (axis, c) in counts.iter_mut().enumerate() {
            assert_eq!(g.extent[axis], extent);
            c[g.origin[axis]] += 1;
        }
    }
    let expected = draws as f64 / slots as f64;
    let dist = ChiSquared::new((slots - 1) as f64).unwrap();
    for c in counts {
        let stat: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - dist.cdf(stat);
        assert!(p > 1e-3, "chi-squared {stat:.1} on {} dof, p = {p:.2e}", slots - 1);
    }
}

#[test]
fn centered_placement_is_fixed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let g = sample_crop_geometry([40, 20, 10], (0.5, 0.5), Placement::Centered, &mut rng).unwrap();
        assert_eq!(g.origin, [10, 5, 2]);
    }
}

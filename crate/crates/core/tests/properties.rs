//! Property tests for the estimator invariants.

use ndarray::Array3;
use proptest::prelude::*;
use smicqa::maps::{deep_distortion_map, patch_grid_dims};
use smicqa::smic::{attention_map_for_stage, sample_projection_bank, ProjectionMode};
use smicqa::{approx_mic, exact_mic, mi_under_grid, MicOptions, SamplePairs};

fn sample_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, n)
}

fn pair_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (8usize..=20).prop_flat_map(|n| (sample_vec(n), sample_vec(n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mic_values_stay_in_unit_interval((xs, ys) in pair_strategy()) {
        let s = SamplePairs::new(xs, ys).unwrap();
        let opts = MicOptions::default();
        let e = exact_mic(&s, &opts).unwrap();
        let a = approx_mic(&s, &opts);
        prop_assert!((0.0..=1.0).contains(&e.value));
        prop_assert!((0.0..=1.0).contains(&a.value));
        prop_assert!(e.best_mi >= 0.0);
    }

    #[test]
    fn approx_never_exceeds_exact((xs, ys) in pair_strategy()) {
        let s = SamplePairs::new(xs, ys).unwrap();
        let opts = MicOptions::default();
        let e = exact_mic(&s, &opts).unwrap();
        let a = approx_mic(&s, &opts);
        prop_assert!(a.value <= e.value + 1e-9, "{} > {}", a.value, e.value);
    }

    #[test]
    fn mic_is_symmetric_in_its_arguments((xs, ys) in pair_strategy()) {
        let opts = MicOptions::default();
        let ab = exact_mic(&SamplePairs::new(xs.clone(), ys.clone()).unwrap(), &opts).unwrap();
        let ba = exact_mic(&SamplePairs::new(ys.clone(), xs.clone()).unwrap(), &opts).unwrap();
        prop_assert_eq!(ab.value.to_bits(), ba.value.to_bits());
        let a1 = approx_mic(&SamplePairs::new(xs.clone(), ys.clone()).unwrap(), &opts);
        let a2 = approx_mic(&SamplePairs::new(ys, xs).unwrap(), &opts);
        prop_assert_eq!(a1.value.to_bits(), a2.value.to_bits());
    }

    #[test]
    fn monotone_maps_leave_values_unchanged(
        (xs, ys) in pair_strategy(),
        scale in 0.1f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        let opts = MicOptions::default();
        let base_e = exact_mic(&SamplePairs::new(xs.clone(), ys.clone()).unwrap(), &opts).unwrap();
        let base_a = approx_mic(&SamplePairs::new(xs.clone(), ys.clone()).unwrap(), &opts);
        let mapped: Vec<f64> = xs.iter().map(|&v| scale * v + shift).collect();
        let e = exact_mic(&SamplePairs::new(mapped.clone(), ys.clone()).unwrap(), &opts).unwrap();
        let a = approx_mic(&SamplePairs::new(mapped, ys).unwrap(), &opts);
        prop_assert_eq!(e.value.to_bits(), base_e.value.to_bits());
        prop_assert_eq!(a.value.to_bits(), base_a.value.to_bits());
    }

    #[test]
    fn joint_permutation_leaves_values_unchanged(
        (xs, ys) in pair_strategy(),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let opts = MicOptions::default();
        let base_e = exact_mic(&SamplePairs::new(xs.clone(), ys.clone()).unwrap(), &opts).unwrap();
        let base_a = approx_mic(&SamplePairs::new(xs.clone(), ys.clone()).unwrap(), &opts);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let px: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
        let py: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
        let e = exact_mic(&SamplePairs::new(px.clone(), py.clone()).unwrap(), &opts).unwrap();
        let a = approx_mic(&SamplePairs::new(px, py).unwrap(), &opts);
        prop_assert_eq!(e.value.to_bits(), base_e.value.to_bits());
        prop_assert_eq!(a.value.to_bits(), base_a.value.to_bits());
    }

    #[test]
    fn reported_grid_reproduces_reported_mi((xs, ys) in pair_strategy()) {
        let opts = MicOptions::default();
        let s = SamplePairs::new(xs, ys).unwrap();
        for r in [exact_mic(&s, &opts).unwrap(), approx_mic(&s, &opts)] {
            prop_assert!((mi_under_grid(&s, &r.best_grid) - r.best_mi).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_and_distortion_grids_align(
        h in 7usize..18,
        w in 7usize..18,
        stride in 1usize..8,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let r = Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>());
        let d = Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>());
        let bank = sample_projection_bank(3, 1, seed, ProjectionMode::Shared);
        let attention =
            attention_map_for_stage(&r, &d, &bank, 1, 7, stride, &MicOptions::default()).unwrap();
        let distortion = deep_distortion_map(&r, &d, 1, 7, stride, true).unwrap();
        prop_assert_eq!(attention.values.dim(), distortion.values.dim());
        prop_assert_eq!(attention.values.dim(), patch_grid_dims(h, w, 7, stride).unwrap());
        for &v in attention.values.iter() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

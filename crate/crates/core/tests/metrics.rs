//! Metric properties: symmetry, padding neutrality and strictness.

use ppc::evalkit::{alignment_metrics, evaluate, feature_distance, pad_to_common, pixel_distance, Generated};
use ppc::world::{gen_scene, render_rgb, render_scene_pose, SceneSpec, WorldConfig};
use ppc::Raster;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy(spec: &SceneSpec, seed: u64, amount: f64) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = render_rgb(spec);
    let mut pose = render_scene_pose(spec);
    for r in [&mut image, &mut pose] {
        r.data_mut().mapv_inplace(|v| {
            if rng.random_bool(amount) {
                rng.random_range(-1.0..1.0)
            } else {
                v
            }
        });
    }
    Generated { image, pose }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn diversity_ignores_sample_order(seed in any::<u64>(), rot in 1usize..4) {
        let spec = gen_scene(seed, &WorldConfig::default().with_people(2)).unwrap();
        let set: Vec<Generated> = (0..4).map(|k| noisy(&spec, seed ^ k, 0.05)).collect();
        let mut rotated = set.clone();
        rotated.rotate_left(rot);
        let a = evaluate(std::slice::from_ref(&spec), &[set]).unwrap();
        let b = evaluate(std::slice::from_ref(&spec), &[rotated]).unwrap();
        let (da, db) = (a.diversity.unwrap(), b.diversity.unwrap());
        prop_assert!((da.feature_distance - db.feature_distance).abs() < 1e-12);
        prop_assert!((da.pixel_distance - db.pixel_distance).abs() < 1e-12);
        prop_assert!((da.attribute_entropy - db.attribute_entropy).abs() < 1e-12);
        prop_assert!((a.alignment.all_correct_rate - b.alignment.all_correct_rate).abs() < 1e-12);
    }

    #[test]
    fn strictness_holds_on_noisy_sets(seed in any::<u64>(), amount in 0.0f64..0.2) {
        let specs: Vec<SceneSpec> = (0..3)
            .map(|k| gen_scene(seed.wrapping_add(k), &WorldConfig::default().with_people(1 + k as usize)).unwrap())
            .collect();
        let sets: Vec<Vec<Generated>> = specs
            .iter()
            .enumerate()
            .map(|(k, s)| (0..3).map(|j| noisy(s, seed ^ (k as u64 * 7 + j), amount)).collect())
            .collect();
        let report = alignment_metrics(&specs, &sets).unwrap();
        prop_assert!(report.strictness_holds());
        for r in &report.specs {
            let a = r.alignment;
            for v in [a.count_accuracy, a.color_binding_accuracy, a.action_binding_accuracy, a.all_correct_rate] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn padding_equal_sizes_is_a_no_op(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Raster> = (0..3)
            .map(|_| Raster::from_array(ndarray::Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-1.0..1.0))))
            .collect();
        prop_assert_eq!(&pad_to_common(&images), &images);
        let padded = pad_to_common(&images);
        prop_assert_eq!(feature_distance(&padded, 4).unwrap().to_bits(), feature_distance(&images, 4).unwrap().to_bits());
        prop_assert_eq!(pixel_distance(&padded).unwrap().to_bits(), pixel_distance(&images).unwrap().to_bits());
    }
}

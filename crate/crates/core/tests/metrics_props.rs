use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rsd::metrics::{assign_modes, diversity, energy_distance, spearman};
use rsd::{Covariance, FeatureMap, GaussianMixture};

fn cloud(seed: u64, n: usize, d: usize, scale: f64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn diversity_ignores_global_scale(seed in 0u64..10_000, c in 1e-3f64..1e3, n in 2usize..8) {
        let pts = cloud(seed, n, 3, 1.0);
        let scaled: Vec<_> = pts.iter().map(|p| p * c).collect();
        let a = diversity(&pts, &FeatureMap::Identity).unwrap();
        let b = diversity(&scaled, &FeatureMap::Identity).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mode_assignment_follows_permutations(seed in 0u64..10_000, shift in 1usize..6, rot in 1usize..3) {
        let means = cloud(seed ^ 0xff, 3, 2, 3.0);
        let covs = vec![Covariance::isotropic(2, 0.3); 3];
        let mixture = GaussianMixture::new(vec![0.2, 0.3, 0.5], means.clone(), covs.clone()).unwrap();
        let pts = cloud(seed, 6, 2, 3.0);
        let base = assign_modes(&pts, &mixture).unwrap();
        prop_assert!(base.mode_index.iter().all(|&k| k < 3));
        prop_assert_eq!(base.collapsed, base.distinct_mode_count < 3);

        let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
        let moved: Vec<_> = perm.iter().map(|&i| pts[i].clone()).collect();
        let other = assign_modes(&moved, &mixture).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(other.mode_index[k], base.mode_index[i]);
        }

        // relabel components: new label j is old component relabel[j]
        let relabel: Vec<usize> = (0..3).map(|j| (j + rot) % 3).collect();
        let weights = [0.2, 0.3, 0.5];
        let renamed = GaussianMixture::new(
            relabel.iter().map(|&j| weights[j]).collect(),
            relabel.iter().map(|&j| means[j].clone()).collect(),
            relabel.iter().map(|&j| covs[j].clone()).collect(),
        ).unwrap();
        let relabelled = assign_modes(&pts, &renamed).unwrap();
        for (k, &j) in relabelled.mode_index.iter().enumerate() {
            prop_assert_eq!(relabel[j], base.mode_index[k]);
        }
        prop_assert_eq!(relabelled.distinct_mode_count, base.distinct_mode_count);
    }

    #[test]
    fn energy_distance_is_symmetric(seed in 0u64..10_000, n in 1usize..20, m in 1usize..20) {
        let a = cloud(seed, n, 2, 1.0);
        let b = cloud(seed + 1, m, 2, 2.0);
        let ab = energy_distance(&a, &b).unwrap();
        prop_assert_eq!(ab.to_bits(), energy_distance(&b, &a).unwrap().to_bits());
        prop_assert!(ab >= -1e-12);
    }

    #[test]
    fn spearman_is_rank_based(xs in prop::collection::vec(-10.0f64..10.0, 3..12)) {
        let cubed: Vec<f64> = xs.iter().map(|x| x * x * x + 2.0).collect();
        let r = spearman(&xs, &cubed).unwrap();
        prop_assume!(r.is_finite());
        prop_assert!((r - 1.0).abs() < 1e-12);
    }
}

#[test]
fn energy_distance_vanishes_only_for_equal_samples() {
    let a = cloud(1, 50, 2, 1.0);
    assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
    let shifted: Vec<_> = a.iter().map(|p| p.add_scalar(1.0)).collect();
    assert!(energy_distance(&a, &shifted).unwrap() > 0.5);
}

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rsd::{gaussian_posterior_oracle, Covariance, DiffusionSchedule, GaussianMixture};

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_mixture(rng: &mut ChaCha8Rng) -> GaussianMixture {
    let k = rng.random_range(1..=3);
    let d = rng.random_range(1..=3);
    let raw: Vec<f64> = (0..k).map(|_| 0.2 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means = (0..k).map(|_| normal_vec(rng, d) * 1.5).collect();
    let covs = (0..k)
        .map(|_| {
            if rng.random_bool(0.5) {
                Covariance::Diagonal(DVector::from_fn(d, |_, _| 0.05 + rng.random::<f64>()))
            } else {
                let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.7);
                Covariance::Full(&a * a.transpose() + DMatrix::identity(d, d) * 0.05)
            }
        })
        .collect();
    GaussianMixture::new(weights, means, covs).unwrap()
}

#[test]
fn score_matches_finite_differences() {
    let s = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let prior = random_mixture(&mut rng);
        let t = 0.01 + 0.99 * rng.random::<f64>();
        let x = normal_vec(&mut rng, prior.dim()) * 2.0;
        let score = prior.score(&s, t, &x).unwrap();
        let fd = DVector::from_fn(prior.dim(), |i, _| {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += h;
            lo[i] -= h;
            (prior.log_pdf(&s, t, &hi).unwrap() - prior.log_pdf(&s, t, &lo).unwrap()) / (2.0 * h)
        });
        worst = worst.max((&fd - &score).norm() / score.norm().max(1.0));
    }
    assert!(worst < 1e-5, "max relative error {worst:e}");
}

#[test]
fn eps_predict_is_scaled_score() {
    let s = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let prior = GaussianMixture::toy_bimodal();
    for _ in 0..100 {
        let t = 1e-3 + rng.random::<f64>() * 0.999;
        let x = normal_vec(&mut rng, 2);
        let (_, sigma) = s.alpha_sigma(t).unwrap();
        let eps = prior.eps_predict(&s, t, &x).unwrap();
        let score = prior.score(&s, t, &x).unwrap();
        assert!((&eps + score * sigma).norm() <= 1e-12 * (1.0 + eps.norm()));
    }
}

/// Composite Simpson over a wide grid.
fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    let h = (hi - lo) / panels as f64;
    let mut acc = f(lo) + f(hi);
    for k in 1..panels {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(lo + k as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn one_dimensional_marginals_integrate_to_one() {
    let s = DiffusionSchedule::default();
    let prior = GaussianMixture::new(
        vec![0.3, 0.7],
        vec![
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.5),
        ],
        vec![
            Covariance::isotropic(1, 0.005),
            Covariance::isotropic(1, 0.4),
        ],
    )
    .unwrap();
    for t in [0.0, 0.05, 0.3, 1.0] {
        let d = prior.diffuse(&s, t).unwrap();
        let mass = integrate(
            |x| d.log_pdf(&DVector::from_element(1, x)).unwrap().exp(),
            -12.0,
            12.0,
            48_000,
        );
        assert!((mass - 1.0).abs() < 1e-6, "t = {t}: mass {mass}");
    }
}

#[test]
fn posterior_oracle_agrees_with_importance_sampling() {
    let s = DiffusionSchedule::default();
    let prior = GaussianMixture::new(
        vec![0.4, 0.6],
        vec![
            DVector::from_vec(vec![1.0, 0.5]),
            DVector::from_vec(vec![-1.0, -0.5]),
        ],
        vec![
            Covariance::Full(DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.3])),
            Covariance::Diagonal(DVector::from_vec(vec![0.4, 0.6])),
        ],
    )
    .unwrap();
    let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
    let y = DVector::from_vec(vec![0.3]);
    let sigma_v = 0.5;
    let post = gaussian_posterior_oracle(&prior, &a, &y, sigma_v).unwrap();
    let target = post.mean();

    let samples = prior.sample(&s, 0.0, 1_000_000, 5).unwrap();
    let log_w: Vec<f64> = samples
        .iter()
        .map(|x| -(&y - &a * x).norm_squared() / (2.0 * sigma_v * sigma_v))
        .collect();
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let est = samples
        .iter()
        .zip(&w)
        .fold(DVector::zeros(2), |acc, (x, wi)| acc + x * *wi)
        / total;
    for i in 0..2 {
        let var: f64 = samples
            .iter()
            .zip(&w)
            .map(|(x, wi)| (wi / total).powi(2) * (x[i] - est[i]).powi(2))
            .sum();
        let se = var.sqrt();
        assert!(
            (est[i] - target[i]).abs() < 3.0 * se,
            "coordinate {i}: IS {} ± {se:e} vs oracle {}",
            est[i],
            target[i]
        );
    }
}

#[test]
fn tweedie_is_the_conditional_mean() {
    // Tower property and orthogonality of the residual to x_t, by Monte Carlo.
    let s = DiffusionSchedule::default();
    let prior = GaussianMixture::toy_bimodal();
    let t = 0.4;
    let (alpha, sigma) = s.alpha_sigma(t).unwrap();
    let n = 200_000;
    let clean = prior.sample(&s, 0.0, n, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mean = DVector::zeros(2);
    let mut cross = DVector::zeros(2);
    let mut cross_sq = DVector::zeros(2);
    for x0 in &clean {
        let xt = x0 * alpha + normal_vec(&mut rng, 2) * sigma;
        let d = prior.tweedie(&s, t, &xt).unwrap();
        mean += &d;
        let r = (x0 - &d).component_mul(&xt);
        cross_sq += r.component_mul(&r);
        cross += r;
    }
    mean /= n as f64;
    cross /= n as f64;
    for i in 0..2 {
        let se = (cross_sq[i] / n as f64 - cross[i] * cross[i]).sqrt() / (n as f64).sqrt();
        assert!(
            cross[i].abs() < 4.0 * se.max(1e-12),
            "orthogonality {i}: {} (se {se:e})",
            cross[i]
        );
    }
    assert!((mean - prior.mean()).norm() < 0.01);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn responsibilities_form_a_distribution(seed in 0u64..10_000, t in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = random_mixture(&mut rng);
        let x = normal_vec(&mut rng, prior.dim()) * 10.0;
        let r = prior.diffuse(&DiffusionSchedule::default(), t).unwrap().responsibilities(&x).unwrap();
        prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_is_finite_far_from_the_modes(scale in 1.0f64..1e3, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_vec(&mut rng, 2) * scale;
        let score = GaussianMixture::toy_bimodal().score(&DiffusionSchedule::default(), 0.0, &x).unwrap();
        prop_assert!(score.iter().all(|v| v.is_finite()));
    }
}

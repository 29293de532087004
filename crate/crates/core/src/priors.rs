//! Gaussian-mixture priors with exact diffused scores.
//!
//! Pushing a mixture through `z_t = α_t z_0 + σ_t ε` keeps it a mixture:
//! component `k` becomes `N(α_t μ_k, α_t² Σ_k + σ_t² I)`. Everything a
//! trained noise-prediction network would provide (score, ε-prediction,
//! Tweedie denoiser) is available here in closed form.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, RsdError};
use crate::schedule::DiffusionSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest dimension accepted by [`gaussian_posterior_oracle`].
pub const ORACLE_MAX_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

impl Covariance {
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        Covariance::Diagonal(DVector::from_element(dim, variance))
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(d) => d.len(),
            Covariance::Full(m) => m.nrows(),
        }
    }

    pub fn to_full(&self) -> DMatrix<f64> {
        match self {
            Covariance::Diagonal(d) => DMatrix::from_diagonal(d),
            Covariance::Full(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<Covariance>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<Covariance>,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(RsdError::Empty("mixture components"));
        }
        if means.len() != weights.len() || covariances.len() != weights.len() {
            return Err(RsdError::InvalidMixture(format!(
                "{} weights, {} means, {} covariances",
                weights.len(),
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(RsdError::InvalidMixture("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(RsdError::InvalidMixture(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(RsdError::InvalidMixture("zero-dimensional means".into()));
        }
        for (k, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != dim || c.dim() != dim {
                return Err(RsdError::DimensionMismatch {
                    context: "mixture component",
                    expected: dim,
                    got: if m.len() != dim { m.len() } else { c.dim() },
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(RsdError::InvalidMixture(format!("mean {k} is not finite")));
            }
            let full = c.to_full();
            if (&full - full.transpose()).amax() > 1e-12 * full.amax().max(1.0) {
                return Err(RsdError::NotPositiveDefinite { component: k });
            }
            if Cholesky::new(full).is_none() {
                return Err(RsdError::NotPositiveDefinite { component: k });
            }
        }
        Ok(Self {
            weights,
            means,
            covariances,
        })
    }

    /// Equal-weight mixture of isotropic components.
    pub fn isotropic(means: Vec<DVector<f64>>, variance: f64) -> Result<Self> {
        let k = means.len();
        let dim = means.first().map_or(0, |m| m.len());
        Self::new(
            vec![1.0 / k as f64; k],
            means,
            vec![Covariance::isotropic(dim, variance); k],
        )
    }

    /// Single standard normal component in `dim` dimensions.
    pub fn standard_normal(dim: usize) -> Self {
        Self::isotropic(vec![DVector::zeros(dim)], 1.0).expect("valid standard normal")
    }

    /// Two modes at `[±1, 0]` with covariance `0.005·I`.
    pub fn toy_bimodal() -> Self {
        Self::isotropic(
            vec![
                DVector::from_vec(vec![1.0, 0.0]),
                DVector::from_vec(vec![-1.0, 0.0]),
            ],
            0.005,
        )
        .expect("valid toy mixture")
    }

    /// `modes` equal-weight components evenly spaced on a circle in the plane.
    pub fn ring(modes: usize, radius: f64, variance: f64) -> Result<Self> {
        let means = (0..modes)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / modes as f64;
                DVector::from_vec(vec![radius * a.cos(), radius * a.sin()])
            })
            .collect();
        Self::isotropic(means, variance)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Covariance] {
        &self.covariances
    }

    /// E[x] under the mixture.
    pub fn mean(&self) -> DVector<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .fold(DVector::zeros(self.dim()), |acc, (w, m)| acc + m * *w)
    }

    /// Closed-form marginal at diffusion time `t`.
    pub fn diffuse(&self, schedule: &DiffusionSchedule, t: f64) -> Result<DiffusedMixture> {
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        DiffusedMixture::build(self, t, alpha, sigma)
    }

    pub fn log_pdf(&self, schedule: &DiffusionSchedule, t: f64, x: &DVector<f64>) -> Result<f64> {
        self.diffuse(schedule, t)?.log_pdf(x)
    }

    /// ∇ₓ log p_t(x).
    pub fn score(
        &self,
        schedule: &DiffusionSchedule,
        t: f64,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.diffuse(schedule, t)?.score(x)
    }

    /// Noise prediction `-σ_t ∇ log p_t(x)`.
    pub fn eps_predict(
        &self,
        schedule: &DiffusionSchedule,
        t: f64,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.diffuse(schedule, t)?.eps_predict(x)
    }

    /// Posterior mean E[x₀ | x_t] by Tweedie's formula.
    pub fn tweedie(
        &self,
        schedule: &DiffusionSchedule,
        t: f64,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.diffuse(schedule, t)?.tweedie(x)
    }

    /// `count` i.i.d. draws from the marginal at time `t`.
    pub fn sample(
        &self,
        schedule: &DiffusionSchedule,
        t: f64,
        count: usize,
        seed: u64,
    ) -> Result<Vec<DVector<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.diffuse(schedule, t)?.sample_with(&mut rng, count)
    }
}

#[derive(Debug, Clone)]
struct DiffusedComponent {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_weight: f64,
    /// log weight − ½ log det C − (d/2) log 2π
    log_scale: f64,
}

impl DiffusedComponent {
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.mean;
        let w = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&r)
            .expect("cholesky factor has a positive diagonal");
        self.log_scale - 0.5 * w.norm_squared()
    }
}

/// A [`GaussianMixture`] evaluated at a fixed diffusion time.
#[derive(Debug, Clone)]
pub struct DiffusedMixture {
    t: f64,
    alpha: f64,
    sigma: f64,
    components: Vec<DiffusedComponent>,
}

impl DiffusedMixture {
    fn build(base: &GaussianMixture, t: f64, alpha: f64, sigma: f64) -> Result<Self> {
        let d = base.dim();
        let noise = DMatrix::<f64>::identity(d, d) * (sigma * sigma);
        let mut components = Vec::with_capacity(base.num_components());
        for (k, ((w, m), c)) in base
            .weights
            .iter()
            .zip(&base.means)
            .zip(&base.covariances)
            .enumerate()
        {
            let cov = c.to_full() * (alpha * alpha) + &noise;
            let chol = Cholesky::new(cov).ok_or(RsdError::NotPositiveDefinite { component: k })?;
            let log_det: f64 = chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>()
                * 2.0;
            components.push(DiffusedComponent {
                mean: m * alpha,
                chol,
                log_weight: w.ln(),
                log_scale: w.ln() - 0.5 * log_det - 0.5 * d as f64 * LN_2PI,
            });
        }
        Ok(Self {
            t,
            alpha,
            sigma,
            components,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn component_mean(&self, k: usize) -> &DVector<f64> {
        &self.components[k].mean
    }

    pub fn component_covariance(&self, k: usize) -> DMatrix<f64> {
        let l = self.components[k].chol.l();
        &l * l.transpose()
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(RsdError::DimensionMismatch {
                context: "mixture evaluation",
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Weighted per-component log densities `log w_k + log N(x; m_k, C_k)`.
    pub fn component_log_densities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.components.iter().map(|c| c.log_density(x)).collect())
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(log_sum_exp(&self.component_log_densities(x)?))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        let logs = self.component_log_densities(x)?;
        let lse = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let resp = self.responsibilities(x)?;
        let mut out = DVector::zeros(self.dim());
        for (r, c) in resp.iter().zip(&self.components) {
            if *r == 0.0 {
                continue;
            }
            out -= c.chol.solve(&(x - &c.mean)) * *r;
        }
        Ok(out)
    }

    pub fn eps_predict(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.score(x)? * -self.sigma)
    }

    pub fn tweedie(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if self.sigma == 0.0 {
            self.check_dim(x)?;
            return Ok(x.clone());
        }
        let eps = self.eps_predict(x)?;
        Ok((x - eps * self.sigma) / self.alpha)
    }

    pub fn sample_with<R: rand::Rng + ?Sized>(
        &self,
        rng: &mut R,
        count: usize,
    ) -> Result<Vec<DVector<f64>>> {
        if count == 0 {
            return Err(RsdError::Empty("sample count"));
        }
        let log_w: Vec<f64> = self.components.iter().map(|c| c.log_weight).collect();
        let lse = log_sum_exp(&log_w);
        let picker = WeightedIndex::new(log_w.iter().map(|l| (l - lse).exp()))
            .map_err(|e| RsdError::InvalidMixture(e.to_string()))?;
        let dim = self.dim();
        Ok((0..count)
            .map(|_| {
                let c = &self.components[picker.sample(rng)];
                let xi = DVector::from_iterator(
                    dim,
                    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                &c.mean + c.chol.l_dirty().lower_triangle() * xi
            })
            .collect())
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact posterior of a mixture prior under `y = A x + v`, `v ~ N(0, σ_v² I)`.
///
/// Each component updates conjugately; weights are reweighted by the
/// component evidences `N(y; A μ_k, A Σ_k Aᵀ + σ_v² I)`.
pub fn gaussian_posterior_oracle(
    prior: &GaussianMixture,
    forward: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_v: f64,
) -> Result<GaussianMixture> {
    let d = prior.dim();
    if d > ORACLE_MAX_DIM {
        return Err(RsdError::param(format!(
            "posterior oracle supports d <= {ORACLE_MAX_DIM}, got {d}"
        )));
    }
    if !(sigma_v > 0.0 && sigma_v.is_finite()) {
        return Err(RsdError::param("sigma_v must be positive"));
    }
    if forward.ncols() != d {
        return Err(RsdError::DimensionMismatch {
            context: "forward matrix columns",
            expected: d,
            got: forward.ncols(),
        });
    }
    if forward.nrows() != y.len() {
        return Err(RsdError::DimensionMismatch {
            context: "measurement length",
            expected: forward.nrows(),
            got: y.len(),
        });
    }
    let m = y.len();
    let inv_var = 1.0 / (sigma_v * sigma_v);
    let ata = forward.transpose() * forward * inv_var;
    let aty = forward.transpose() * y * inv_var;

    let mut log_w = Vec::with_capacity(prior.num_components());
    let mut means = Vec::with_capacity(prior.num_components());
    let mut covs = Vec::with_capacity(prior.num_components());
    for (k, ((w, mu), c)) in prior
        .weights
        .iter()
        .zip(&prior.means)
        .zip(&prior.covariances)
        .enumerate()
    {
        let sigma = c.to_full();
        let prior_prec = Cholesky::new(sigma.clone())
            .ok_or(RsdError::NotPositiveDefinite { component: k })?
            .inverse();
        let post_prec = &prior_prec + &ata;
        let post_chol =
            Cholesky::new(post_prec).ok_or(RsdError::NotPositiveDefinite { component: k })?;
        let post_cov = post_chol.inverse();
        let post_mean = post_chol.solve(&(&prior_prec * mu + &aty));
        // symmetrize away rounding so the result re-validates
        covs.push(Covariance::Full((&post_cov + post_cov.transpose()) * 0.5));
        means.push(post_mean);

        let evid_cov = forward * &sigma * forward.transpose()
            + DMatrix::<f64>::identity(m, m) * (sigma_v * sigma_v);
        let evid_chol =
            Cholesky::new(evid_cov).ok_or(RsdError::NotPositiveDefinite { component: k })?;
        let r = y - forward * mu;
        let white = evid_chol
            .l_dirty()
            .solve_lower_triangular(&r)
            .expect("positive diagonal");
        let log_det: f64 = evid_chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>()
            * 2.0;
        log_w.push(w.ln() - 0.5 * (white.norm_squared() + log_det + m as f64 * LN_2PI));
    }
    let lse = log_sum_exp(&log_w);
    let mut weights: Vec<f64> = log_w
        .iter()
        .map(|l| (l - lse).exp().max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GaussianMixture::new(weights, means, covs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn rejects_bad_mixtures() {
        let m = vec![v(&[0.0])];
        assert!(
            GaussianMixture::new(vec![0.5], m.clone(), vec![Covariance::isotropic(1, 1.0)])
                .is_err()
        );
        assert!(matches!(
            GaussianMixture::new(vec![1.0], m.clone(), vec![Covariance::isotropic(1, -1.0)]),
            Err(RsdError::NotPositiveDefinite { component: 0 })
        ));
        assert!(GaussianMixture::new(vec![1.0], m, vec![Covariance::isotropic(2, 1.0)]).is_err());
        assert!(GaussianMixture::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let p = GaussianMixture::standard_normal(3);
        let s = DiffusionSchedule::default();
        let x = v(&[0.3, -1.2, 2.0]);
        for t in [0.0, 0.1, 0.5, 1.0] {
            let sc = p.score(&s, t, &x).unwrap();
            assert_relative_eq!(sc, -&x, epsilon = 1e-12);
            let (_, sigma) = s.alpha_sigma(t).unwrap();
            assert_relative_eq!(
                p.eps_predict(&s, t, &x).unwrap(),
                &x * sigma,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn symmetric_toy_score_vanishes_at_origin() {
        let p = GaussianMixture::toy_bimodal();
        let s = DiffusionSchedule::default();
        let sc = p.score(&s, 0.0, &v(&[0.0, 0.0])).unwrap();
        assert!(sc.norm() < 1e-12);
    }

    #[test]
    fn eps_predict_zero_at_t0() {
        let p = GaussianMixture::toy_bimodal();
        let s = DiffusionSchedule::default();
        assert_eq!(p.eps_predict(&s, 0.0, &v(&[0.4, 0.1])).unwrap().norm(), 0.0);
    }

    #[test]
    fn tweedie_standard_normal() {
        // E[x0 | xt] = α xt / (α² + σ²) = α xt for a unit-covariance prior
        let p = GaussianMixture::standard_normal(2);
        let s = DiffusionSchedule::default();
        let x = v(&[0.7, -0.2]);
        for t in [0.05, 0.3, 0.9] {
            let (a, _) = s.alpha_sigma(t).unwrap();
            assert_relative_eq!(p.tweedie(&s, t, &x).unwrap(), &x * a, epsilon = 1e-12);
        }
        assert_eq!(p.tweedie(&s, 0.0, &x).unwrap(), x);
    }

    #[test]
    fn tweedie_at_scaled_mode_returns_mode() {
        let mu = v(&[1.5, -0.5]);
        let p = GaussianMixture::isotropic(vec![mu.clone()], 1.0).unwrap();
        let s = DiffusionSchedule::default();
        let (a, _) = s.alpha_sigma(0.4).unwrap();
        assert_relative_eq!(p.tweedie(&s, 0.4, &(&mu * a)).unwrap(), mu, epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let p = GaussianMixture::toy_bimodal();
        let s = DiffusionSchedule::default();
        assert!(matches!(
            p.score(&s, 0.2, &v(&[1.0])),
            Err(RsdError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn far_field_score_is_finite() {
        let p = GaussianMixture::toy_bimodal();
        let s = DiffusionSchedule::default();
        let sc = p.score(&s, 0.0, &v(&[300.0, -40.0])).unwrap();
        assert!(sc.iter().all(|c| c.is_finite()));
        // dominated by the [1, 0] component
        assert_relative_eq!(sc[0], -(300.0 - 1.0) / 0.005, max_relative = 1e-9);
    }

    #[test]
    fn near_point_mass_samples() {
        let p = GaussianMixture::isotropic(vec![v(&[0.0, 0.0])], 1e-12).unwrap();
        let s = DiffusionSchedule::default();
        let xs = p.sample(&s, 0.0, 500, 3).unwrap();
        assert!(xs.iter().all(|x| x.norm() < 1e-5));
        assert_eq!(xs, p.sample(&s, 0.0, 500, 3).unwrap());
    }

    #[test]
    fn conjugate_standard_case() {
        // N(μ, I) prior, y = x + v with σ_v = 1 → mean (μ + y)/2, cov I/2
        let mu = v(&[1.0, -2.0]);
        let b = v(&[3.0, 0.5]);
        let prior = GaussianMixture::isotropic(vec![mu.clone()], 1.0).unwrap();
        let post = gaussian_posterior_oracle(&prior, &DMatrix::identity(2, 2), &b, 1.0).unwrap();
        assert_relative_eq!(post.means()[0], (&mu + &b) / 2.0, epsilon = 1e-12);
        assert_relative_eq!(
            post.covariances()[0].to_full(),
            DMatrix::identity(2, 2) * 0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn uninformative_likelihood_keeps_prior() {
        let prior = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![v(&[1.0, 0.0]), v(&[-1.0, 0.5])],
            vec![Covariance::isotropic(2, 0.2), Covariance::isotropic(2, 0.4)],
        )
        .unwrap();
        let post =
            gaussian_posterior_oracle(&prior, &DMatrix::identity(2, 2), &v(&[0.3, 0.3]), 1e6)
                .unwrap();
        for k in 0..2 {
            assert!((post.weights()[k] - prior.weights()[k]).abs() < 1e-4);
            assert!((&post.means()[k] - &prior.means()[k]).amax() < 1e-3);
        }
    }

    #[test]
    fn observing_first_coordinate_selects_mode() {
        let prior = GaussianMixture::toy_bimodal();
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let post = gaussian_posterior_oracle(&prior, &a, &v(&[1.0]), 0.1).unwrap();
        assert!(post.weights()[0] > 0.99);
    }

    #[test]
    fn oracle_rejects_large_dimension() {
        let prior = GaussianMixture::standard_normal(17);
        let r =
            gaussian_posterior_oracle(&prior, &DMatrix::identity(17, 17), &DVector::zeros(17), 1.0);
        assert!(matches!(r, Err(RsdError::InvalidParameter(_))));
    }
}

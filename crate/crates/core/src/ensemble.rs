//! Unconstrained particle samplers.
//!
//! All rules update synchronously: every particle's direction is computed
//! from the frozen positions of the previous step before any particle moves.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsdError};
use crate::kernels::{repulsion_field, resolve_bandwidth, KernelSpec};
use crate::optim::{Optimizer, OptimizerState};
use crate::priors::GaussianMixture;
use crate::schedule::{lambda_weight, sample_time, DiffusionSchedule, WeightingSpec};

/// Eigenvalue floor applied when a covariance update leaves the SPD cone.
pub const SPD_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    WgfRepulsive,
    RsdDistill,
    Svgd,
    Ancestral,
    BwGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateRule {
    pub kind: UpdateKind,
    pub step_size: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl UpdateRule {
    pub fn new(kind: UpdateKind, step_size: f64, optimizer: Optimizer) -> Result<Self> {
        let r = Self {
            kind,
            step_size,
            optimizer,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(RsdError::param("step size must be positive"));
        }
        self.optimizer.validate()
    }
}

/// How the `-∇ log q` term of the flow is handled for point particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VariationalScore {
    /// Replace it by injected `√(2 dt) ξ` noise.
    #[default]
    Langevin,
    /// Drop it: deterministic ascent plus repulsion.
    None,
}

/// Which particles the distillation repulsion is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RepulsionSpace {
    #[default]
    Noisy,
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    RandomGaussian { mean: Vec<f64>, std: f64 },
    Clustered { point: Vec<f64>, std: f64 },
}

impl Initialization {
    pub fn center(&self) -> &[f64] {
        match self {
            Initialization::RandomGaussian { mean, .. } => mean,
            Initialization::Clustered { point, .. } => point,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let (center, std) = match self {
            Initialization::RandomGaussian { mean, std } => (mean, *std),
            Initialization::Clustered { point, std } => (point, *std),
        };
        if center.is_empty() {
            return Err(RsdError::Empty("initialization center"));
        }
        if !(std >= 0.0 && std.is_finite()) {
            return Err(RsdError::param("initialization std must be non-negative"));
        }
        let c = DVector::from_row_slice(center);
        Ok((0..count)
            .map(|_| &c + standard_normal(rng, c.len()) * std)
            .collect())
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    positions: Vec<DVector<f64>>,
    optimizer_state: OptimizerState,
    rule: UpdateRule,
    rng_seed: u64,
    rng: ChaCha8Rng,
    steps: usize,
    degenerate_steps: usize,
}

/// Per-step bookkeeping returned by every update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub t: f64,
    pub degenerate_bandwidth: bool,
}

impl ParticleEnsemble {
    pub fn new(positions: Vec<DVector<f64>>, rule: UpdateRule, rng_seed: u64) -> Result<Self> {
        rule.validate()?;
        let dim = positions.first().ok_or(RsdError::Empty("ensemble"))?.len();
        if dim == 0 {
            return Err(RsdError::param(
                "particles must have at least one coordinate",
            ));
        }
        for (i, p) in positions.iter().enumerate() {
            if p.len() != dim {
                return Err(RsdError::DimensionMismatch {
                    context: "particle",
                    expected: dim,
                    got: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(RsdError::NonFinite {
                    step: 0,
                    particle: i,
                });
            }
        }
        Ok(Self {
            optimizer_state: OptimizerState::new(positions.len(), dim),
            positions,
            rule,
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            steps: 0,
            degenerate_steps: 0,
        })
    }

    /// Draw `count` initial particles from `init`, then seed the step RNG.
    pub fn initialize(
        init: &Initialization,
        count: usize,
        rule: UpdateRule,
        seed: u64,
    ) -> Result<Self> {
        if count == 0 {
            return Err(RsdError::Empty("ensemble"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = init.sample(count, &mut rng)?;
        let mut e = Self::new(positions, rule, seed)?;
        e.rng = rng;
        Ok(e)
    }

    pub fn positions(&self) -> &[DVector<f64>] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.positions[0].len()
    }

    pub fn rule(&self) -> &UpdateRule {
        &self.rule
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn optimizer_state(&self) -> &OptimizerState {
        &self.optimizer_state
    }

    /// Number of steps that fell back to the degenerate bandwidth.
    pub fn degenerate_steps(&self) -> usize {
        self.degenerate_steps
    }

    fn commit(&mut self, info: StepInfo) -> Result<StepInfo> {
        self.steps += 1;
        if info.degenerate_bandwidth {
            self.degenerate_steps += 1;
        }
        for (i, p) in self.positions.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(RsdError::NonFinite {
                    step: self.steps,
                    particle: i,
                });
            }
        }
        Ok(info)
    }

    /// Euler step of the repulsive flow at diffusion time `t`:
    /// `xᵢ += dt (∇ log p_t(xᵢ) + Fᵢ)`, plus `√(2dt) ξ` for the Langevin estimator.
    pub fn wgf_repulsive_step(
        &mut self,
        target: &GaussianMixture,
        schedule: &DiffusionSchedule,
        spec: &KernelSpec,
        t: f64,
        dt: f64,
        estimator: VariationalScore,
    ) -> Result<StepInfo> {
        check_dt(dt)?;
        let diffused = target.diffuse(schedule, t)?;
        let field = repulsion_field(&self.positions, spec, diffused.sigma())?;
        let mut velocity = Vec::with_capacity(self.len());
        for (x, f) in self.positions.iter().zip(&field.forces) {
            velocity.push(diffused.score(x)? + f);
        }
        for (x, v) in self.positions.iter_mut().zip(&velocity) {
            *x += v * dt;
        }
        if estimator == VariationalScore::Langevin {
            let scale = (2.0 * dt).sqrt();
            let dim = self.dim();
            for x in self.positions.iter_mut() {
                *x += standard_normal(&mut self.rng, dim) * scale;
            }
        }
        self.commit(StepInfo {
            t,
            degenerate_bandwidth: field.bandwidth.degenerate,
        })
    }

    /// One distillation step with a freshly drawn `t ~ U(0, T]` shared by
    /// the ensemble and independent noise per particle.
    pub fn rsd_distill_step(
        &mut self,
        prior: &GaussianMixture,
        spec: &KernelSpec,
        schedule: &DiffusionSchedule,
        weighting: &WeightingSpec,
        space: RepulsionSpace,
    ) -> Result<StepInfo> {
        let t = sample_time(&mut self.rng, schedule.horizon);
        self.rsd_distill_step_at(prior, spec, schedule, weighting, space, t)
    }

    /// Distillation step at a caller-chosen time (e.g. a descending schedule).
    pub fn rsd_distill_step_at(
        &mut self,
        prior: &GaussianMixture,
        spec: &KernelSpec,
        schedule: &DiffusionSchedule,
        weighting: &WeightingSpec,
        space: RepulsionSpace,
        t: f64,
    ) -> Result<StepInfo> {
        let dim = self.dim();
        let noise: Vec<_> = (0..self.len())
            .map(|_| standard_normal(&mut self.rng, dim))
            .collect();
        self.rsd_distill_update(prior, spec, schedule, weighting, space, t, &noise)
    }

    /// Distillation step with explicit per-particle noise.
    ///
    /// The gradient on particle `i` is `λ_t (ε̂(z_tⁱ) − εⁱ) − Fⁱ` with
    /// `z_tⁱ = α_t xⁱ + σ_t εⁱ`; it is treated as a constant and handed to
    /// the optimizer.
    #[allow(clippy::too_many_arguments)]
    pub fn rsd_distill_update(
        &mut self,
        prior: &GaussianMixture,
        spec: &KernelSpec,
        schedule: &DiffusionSchedule,
        weighting: &WeightingSpec,
        space: RepulsionSpace,
        t: f64,
        noise: &[DVector<f64>],
    ) -> Result<StepInfo> {
        if noise.len() != self.len() {
            return Err(RsdError::DimensionMismatch {
                context: "distillation noise",
                expected: self.len(),
                got: noise.len(),
            });
        }
        let grads = distill_gradients(
            &self.positions,
            prior,
            spec,
            schedule,
            weighting,
            space,
            t,
            noise,
        )?;
        self.optimizer_state.apply(
            &self.rule.optimizer,
            &mut self.positions,
            &grads.grads,
            self.rule.step_size,
        );
        self.commit(StepInfo {
            t,
            degenerate_bandwidth: grads.degenerate,
        })
    }

    /// Stein variational step at diffusion time `t`:
    /// `xᵢ += dt/N Σⱼ [k(xⱼ, xᵢ) ∇ log p_t(xⱼ) + ∇_{xⱼ} k(xⱼ, xᵢ)]`.
    ///
    /// Only the bandwidth rule and feature map of `spec` are used.
    pub fn svgd_step(
        &mut self,
        target: &GaussianMixture,
        schedule: &DiffusionSchedule,
        t: f64,
        spec: &KernelSpec,
        dt: f64,
    ) -> Result<StepInfo> {
        check_dt(dt)?;
        let diffused = target.diffuse(schedule, t)?;
        let bw = resolve_bandwidth(&self.positions, spec)?;
        let fm = &spec.feature_map;
        fm.check_input(self.dim())?;
        let feats: Vec<_> = self.positions.iter().map(|x| fm.apply(x)).collect();
        let scores = self
            .positions
            .iter()
            .map(|x| diffused.score(x))
            .collect::<Result<Vec<_>>>()?;
        let n = self.len() as f64;
        let mut velocity = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let mut drive = DVector::zeros(self.dim());
            let mut spread = DVector::zeros(feats[i].len());
            for j in 0..self.len() {
                let diff = &feats[j] - &feats[i];
                let k = (-diff.norm_squared() / bw.h).exp();
                drive.axpy(k, &scores[j], 1.0);
                // ∇_{x_j} k(x_j, x_i) in feature space
                spread.axpy(-2.0 * k / bw.h, &diff, 1.0);
            }
            velocity.push((drive + fm.pullback(&spread)) / n);
        }
        for (x, v) in self.positions.iter_mut().zip(&velocity) {
            *x += v * dt;
        }
        self.commit(StepInfo {
            t,
            degenerate_bandwidth: bw.degenerate,
        })
    }
}

pub(crate) struct DistillGradients {
    pub grads: Vec<DVector<f64>>,
    pub degenerate: bool,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn distill_gradients(
    clean: &[DVector<f64>],
    prior: &GaussianMixture,
    spec: &KernelSpec,
    schedule: &DiffusionSchedule,
    weighting: &WeightingSpec,
    space: RepulsionSpace,
    t: f64,
    noise: &[DVector<f64>],
) -> Result<DistillGradients> {
    let diffused = prior.diffuse(schedule, t)?;
    let (alpha, sigma) = (diffused.alpha(), diffused.sigma());
    let lambda_t = lambda_weight(t, weighting, schedule)?;
    let noisy: Vec<DVector<f64>> = clean
        .iter()
        .zip(noise)
        .map(|(x, e)| x * alpha + e * sigma)
        .collect();
    let field = match space {
        RepulsionSpace::Noisy => repulsion_field(&noisy, spec, sigma)?,
        RepulsionSpace::Clean => repulsion_field(clean, spec, sigma)?,
    };
    let mut grads = Vec::with_capacity(clean.len());
    for ((z, e), f) in noisy.iter().zip(noise).zip(&field.forces) {
        let residual = diffused.eps_predict(z)? - e;
        grads.push(residual * lambda_t - f);
    }
    Ok(DistillGradients {
        grads,
        degenerate: field.bandwidth.degenerate,
    })
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(RsdError::param("dt must be positive"))
    }
}

/// Euler–Maruyama integration of the reverse-time SDE from `z_T ~ N(0, I)`
/// down to `t = 0` in `num_steps` equal steps.
pub fn ancestral_sample(
    prior: &GaussianMixture,
    schedule: &DiffusionSchedule,
    num_steps: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if num_steps == 0 {
        return Err(RsdError::Empty("ancestral steps"));
    }
    if count == 0 {
        return Err(RsdError::Empty("sample count"));
    }
    let dim = prior.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<DVector<f64>> = (0..count).map(|_| standard_normal(&mut rng, dim)).collect();
    let dt = schedule.horizon / num_steps as f64;
    for k in (1..=num_steps).rev() {
        let t = schedule.horizon * k as f64 / num_steps as f64;
        let beta = schedule.beta(t);
        let diffused = prior.diffuse(schedule, t)?;
        let noise_scale = (beta * dt).sqrt();
        for x in z.iter_mut() {
            let drift = &*x * (0.5 * beta) + diffused.score(x)? * beta;
            *x += drift * dt + standard_normal(&mut rng, dim) * noise_scale;
        }
    }
    Ok(z)
}

/// Gaussian variational state for the Bures–Wasserstein flow.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BwStep {
    pub state: GaussianState,
    /// The covariance left the SPD cone and was repaired.
    pub repaired: bool,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(RsdError::DimensionMismatch {
                context: "gaussian state covariance",
                expected: mean.len(),
                got: covariance.nrows(),
            });
        }
        if covariance.clone().cholesky().is_none() {
            return Err(RsdError::NotPositiveDefinite { component: 0 });
        }
        Ok(Self { mean, covariance })
    }

    /// Euler step of the mean/covariance ODEs of the KL flow restricted to
    /// Gaussians, with expectations over `N(mean, cov)` estimated from
    /// `mc_samples` antithetic draws.
    pub fn bw_flow_step(
        &self,
        target: &GaussianMixture,
        dt: f64,
        mc_samples: usize,
        seed: u64,
    ) -> Result<BwStep> {
        check_dt(dt)?;
        if mc_samples == 0 {
            return Err(RsdError::Empty("monte carlo samples"));
        }
        let d = self.mean.len();
        if target.dim() != d {
            return Err(RsdError::DimensionMismatch {
                context: "bw flow target",
                expected: d,
                got: target.dim(),
            });
        }
        let chol = self
            .covariance
            .clone()
            .cholesky()
            .ok_or(RsdError::NotPositiveDefinite { component: 0 })?;
        let l = chol.l();
        let diffused = target.diffuse(&DiffusionSchedule::default(), 0.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = mc_samples.div_ceil(2);
        let mut mean_drift = DVector::zeros(d);
        let mut cov_drift = DMatrix::zeros(d, d);
        for _ in 0..pairs {
            let xi = standard_normal(&mut rng, d);
            for sign in [1.0, -1.0] {
                let offset = &l * &xi * sign;
                let x = &self.mean + &offset;
                let q_score = chol.solve(&offset) * -1.0;
                let v = diffused.score(&x)? - q_score;
                cov_drift += &v * offset.transpose();
                mean_drift += v;
            }
        }
        let m = (2 * pairs) as f64;
        mean_drift /= m;
        cov_drift /= m;
        let mean = &self.mean + mean_drift * dt;
        let raw = &self.covariance + (&cov_drift + cov_drift.transpose()) * dt;
        let sym = (&raw + raw.transpose()) * 0.5;
        let (covariance, repaired) = project_spd(sym);
        Ok(BwStep {
            state: GaussianState { mean, covariance },
            repaired,
        })
    }
}

fn project_spd(m: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|&v| v >= SPD_FLOOR) {
        return (m, false);
    }
    let floored = eig.eigenvalues.map(|v| v.max(SPD_FLOOR));
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&floored) * q.transpose();
    ((&r + r.transpose()) * 0.5, true)
}

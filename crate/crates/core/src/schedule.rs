//! Variance-preserving noise schedule and the time weightings built on it.
//!
//! The forward process is `dz = -½β(t) z dt + √β(t) dW` with a linear rate
//! `β(t) = β_min + (β_max − β_min) t / T`. Marginals are `z_t = α_t z_0 + σ_t ε`
//! with `α_t = exp(−½∫₀ᵗβ)` and `σ_t = √(1 − α_t²)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsdError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Final diffusion time `T`.
    pub horizon: f64,
    pub num_steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
            num_steps: 1000,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64, num_steps: usize) -> Result<Self> {
        let s = Self {
            beta_min,
            beta_max,
            horizon,
            num_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min >= 0.0 && self.beta_max >= self.beta_min && self.beta_max.is_finite()) {
            return Err(RsdError::param(format!(
                "schedule needs 0 <= beta_min <= beta_max, got ({}, {})",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(RsdError::param("schedule horizon must be positive"));
        }
        if self.num_steps == 0 {
            return Err(RsdError::Empty("schedule num_steps"));
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(RsdError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            })
        }
    }

    /// Instantaneous rate β(t). Not range-checked.
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon
    }

    /// ∫₀ᵗ β(s) ds in closed form. Not range-checked.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.horizon
    }

    /// Signal and noise scales `(α_t, σ_t)`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        Ok(self.alpha_sigma_unchecked(t))
    }

    pub(crate) fn alpha_sigma_unchecked(&self, t: f64) -> (f64, f64) {
        let b = self.integrated_beta(t);
        // 1 - exp(-b) via expm1 keeps σ accurate near t = 0
        ((-0.5 * b).exp(), (-(-b).exp_m1()).sqrt())
    }

    /// Signal-to-noise ratio α_t/σ_t; infinite at t = 0.
    pub fn snr(&self, t: f64) -> Result<f64> {
        let (a, s) = self.alpha_sigma(t)?;
        Ok(a / s)
    }

    /// Time average of `σ_t²` over `[0, T]` (composite Simpson, 2048 panels).
    ///
    /// Under uniform time sampling and inverse-SNR weighting, a unit Gaussian
    /// prior contributes an expected regularizer gradient of `λ·E[σ_t²]·z`;
    /// `λ = 1 / mean_noise_variance()` makes it the exact prior gradient.
    pub fn mean_noise_variance(&self) -> f64 {
        const PANELS: usize = 2048;
        let h = self.horizon / PANELS as f64;
        let var = |t: f64| -(-self.integrated_beta(t)).exp_m1();
        let mut acc = var(0.0) + var(self.horizon);
        for k in 1..PANELS {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * var(k as f64 * h);
        }
        acc * h / (3.0 * self.horizon)
    }

    /// Diffusion times for a sampler run.
    ///
    /// `Descending` gives `T, T(count-1)/count, ..., T/count`; `UniformRandom`
    /// gives `count` draws on `(0, T]` from a generator seeded with `seed`.
    pub fn timesteps(&self, order: TimeOrder, count: usize, seed: u64) -> Result<Vec<f64>> {
        if count == 0 {
            return Err(RsdError::Empty("timestep sequence"));
        }
        let h = self.horizon;
        Ok(match order {
            TimeOrder::Descending => (0..count)
                .map(|k| h * (count - k) as f64 / count as f64)
                .collect(),
            TimeOrder::UniformRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count).map(|_| sample_time(&mut rng, h)).collect()
            }
        })
    }
}

/// One draw of t on (0, T].
/// Seed offset for time-sequence draws, so they never reuse the stream that
/// initialized the particles.
pub(crate) const TIME_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

pub(crate) fn sample_time<R: Rng + ?Sized>(rng: &mut R, horizon: f64) -> f64 {
    horizon * (1.0 - rng.random::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeOrder {
    #[default]
    Descending,
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    /// λ_t = λ · σ_t / α_t
    #[default]
    InverseSnr,
    /// λ_t = λ
    Unit,
}

/// Time weighting of the score-matching regularizer.
///
/// `sigma_v` and `rho` are carried so a run record shows the full set of
/// constants; the time dependence of the weighting lives entirely in `mode`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightingSpec {
    pub lambda: f64,
    pub mode: WeightingMode,
    pub sigma_v: f64,
    pub rho: f64,
}

impl Default for WeightingSpec {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mode: WeightingMode::InverseSnr,
            sigma_v: 1.0,
            rho: 1.0,
        }
    }
}

impl WeightingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(RsdError::param("lambda must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Regularizer weight λ_t at diffusion time `t`.
pub fn lambda_weight(t: f64, spec: &WeightingSpec, schedule: &DiffusionSchedule) -> Result<f64> {
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    Ok(match spec.mode {
        WeightingMode::Unit => spec.lambda,
        WeightingMode::InverseSnr => spec.lambda * sigma / alpha,
    })
}

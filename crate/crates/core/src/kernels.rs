//! RBF repulsion between particles.
//!
//! Forces are returned as displacement directions: with `sign = Repulsive`
//! the vector for particle `i` is `-γ_eff ∇ᵢ Φ`, where Φ is either
//! `log Σⱼ k(xᵢ, xⱼ)` (`LogSum`) or `Σⱼ log k(xᵢ, xⱼ)` (`SumLog`). Moving a
//! particle along it lowers its kernel affinity to the rest of the ensemble.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsdError};

/// Bandwidth used when every pairwise distance is zero.
pub const DEGENERATE_BANDWIDTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum FeatureMap {
    #[default]
    Identity,
    /// `g(x) = W x` with `W` of shape `p × d`.
    Linear(DMatrix<f64>),
}

impl FeatureMap {
    pub fn linear(w: DMatrix<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) || w.is_empty() {
            return Err(RsdError::param(
                "linear feature map needs finite, non-empty weights",
            ));
        }
        Ok(FeatureMap::Linear(w))
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            FeatureMap::Identity => x.clone(),
            FeatureMap::Linear(w) => w * x,
        }
    }

    /// Transposed Jacobian applied to a feature-space vector.
    pub fn pullback(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            FeatureMap::Identity => v.clone(),
            FeatureMap::Linear(w) => w.tr_mul(v),
        }
    }

    pub fn check_input(&self, dim: usize) -> Result<()> {
        match self {
            FeatureMap::Linear(w) if w.ncols() != dim => Err(RsdError::DimensionMismatch {
                context: "feature map input",
                expected: w.ncols(),
                got: dim,
            }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaSchedule {
    #[default]
    Constant,
    /// γ_eff = γ · σ_t
    SigmaScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    #[default]
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RepulsionForm {
    #[default]
    LogSum,
    SumLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForceSign {
    #[default]
    Repulsive,
    Attractive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub gamma: f64,
    pub gamma_schedule: GammaSchedule,
    pub bandwidth: BandwidthRule,
    pub feature_map: FeatureMap,
    pub form: RepulsionForm,
    pub sign: ForceSign,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            gamma_schedule: GammaSchedule::Constant,
            bandwidth: BandwidthRule::MedianHeuristic,
            feature_map: FeatureMap::Identity,
            form: RepulsionForm::LogSum,
            sign: ForceSign::Repulsive,
        }
    }
}

impl KernelSpec {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(RsdError::param("gamma must be finite and non-negative"));
        }
        if let BandwidthRule::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(RsdError::param("fixed bandwidth must be positive"));
            }
        }
        Ok(())
    }

    /// Repulsion weight after the γ schedule, without the sign.
    pub fn effective_gamma(&self, sigma_t: f64) -> f64 {
        match self.gamma_schedule {
            GammaSchedule::Constant => self.gamma,
            GammaSchedule::SigmaScaled => self.gamma * sigma_t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub h: f64,
    /// Set when all particles coincide and the fallback was used.
    pub degenerate: bool,
}

/// Median-heuristic bandwidth `m² / ln N` over feature-space distances.
pub fn median_bandwidth(points: &[DVector<f64>], features: &FeatureMap) -> Result<Bandwidth> {
    if points.len() < 2 {
        return Err(RsdError::param(
            "median bandwidth needs at least two points",
        ));
    }
    let feats = feature_points(points, features)?;
    let n = feats.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push((&feats[i] - &feats[j]).norm());
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    let h = median * median / (n as f64).ln();
    if h > 0.0 && h.is_finite() {
        Ok(Bandwidth {
            h,
            degenerate: false,
        })
    } else {
        Ok(Bandwidth {
            h: DEGENERATE_BANDWIDTH,
            degenerate: true,
        })
    }
}

fn feature_points(points: &[DVector<f64>], features: &FeatureMap) -> Result<Vec<DVector<f64>>> {
    let dim = points.first().map_or(0, |p| p.len());
    features.check_input(dim)?;
    points
        .iter()
        .map(|p| {
            if p.len() != dim {
                return Err(RsdError::DimensionMismatch {
                    context: "particle",
                    expected: dim,
                    got: p.len(),
                });
            }
            Ok(features.apply(p))
        })
        .collect()
}

/// `exp(-‖g(a) − g(b)‖² / h)`.
pub fn rbf(a: &DVector<f64>, b: &DVector<f64>, h: f64, features: &FeatureMap) -> f64 {
    (-(features.apply(a) - features.apply(b)).norm_squared() / h).exp()
}

pub fn resolve_bandwidth(points: &[DVector<f64>], spec: &KernelSpec) -> Result<Bandwidth> {
    match spec.bandwidth {
        BandwidthRule::Fixed(h) => Ok(Bandwidth {
            h,
            degenerate: false,
        }),
        BandwidthRule::MedianHeuristic if points.len() < 2 => Ok(Bandwidth {
            h: DEGENERATE_BANDWIDTH,
            degenerate: false,
        }),
        BandwidthRule::MedianHeuristic => median_bandwidth(points, &spec.feature_map),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepulsionField {
    pub forces: Vec<DVector<f64>>,
    pub bandwidth: Bandwidth,
}

/// Force on particle `i`, with the bandwidth resolved from `points`.
pub fn repulsion_grad(
    i: usize,
    points: &[DVector<f64>],
    spec: &KernelSpec,
    sigma_t: f64,
) -> Result<(DVector<f64>, Bandwidth)> {
    if i >= points.len() {
        return Err(RsdError::param(format!(
            "particle index {i} out of range for {} particles",
            points.len()
        )));
    }
    let bw = resolve_bandwidth(points, spec)?;
    let feats = feature_points(points, &spec.feature_map)?;
    Ok((force_on(i, points, &feats, spec, sigma_t, bw.h), bw))
}

/// Force on particle `i` for a caller-supplied bandwidth.
pub fn repulsion_grad_with_bandwidth(
    i: usize,
    points: &[DVector<f64>],
    spec: &KernelSpec,
    sigma_t: f64,
    h: f64,
) -> Result<DVector<f64>> {
    if i >= points.len() {
        return Err(RsdError::param("particle index out of range"));
    }
    if h.is_nan() || h <= 0.0 {
        return Err(RsdError::param("bandwidth must be positive"));
    }
    let feats = feature_points(points, &spec.feature_map)?;
    Ok(force_on(i, points, &feats, spec, sigma_t, h))
}

/// Forces on every particle, sharing one bandwidth.
pub fn repulsion_field(
    points: &[DVector<f64>],
    spec: &KernelSpec,
    sigma_t: f64,
) -> Result<RepulsionField> {
    if points.is_empty() {
        return Err(RsdError::Empty("particle set"));
    }
    let bandwidth = resolve_bandwidth(points, spec)?;
    let feats = feature_points(points, &spec.feature_map)?;
    let forces = (0..points.len())
        .map(|i| force_on(i, points, &feats, spec, sigma_t, bandwidth.h))
        .collect();
    Ok(RepulsionField { forces, bandwidth })
}

fn force_on(
    i: usize,
    points: &[DVector<f64>],
    feats: &[DVector<f64>],
    spec: &KernelSpec,
    sigma_t: f64,
    h: f64,
) -> DVector<f64> {
    let gamma = spec.effective_gamma(sigma_t);
    let p = feats[i].len();
    if gamma == 0.0 || points.len() < 2 {
        return DVector::zeros(points[i].len());
    }
    // feature-space gradient of Φ with respect to g(x_i)
    let mut grad = DVector::zeros(p);
    match spec.form {
        RepulsionForm::LogSum => {
            let mut total = 0.0;
            for f in feats {
                let diff = &feats[i] - f;
                let k = (-diff.norm_squared() / h).exp();
                total += k;
                grad.axpy(-2.0 * k / h, &diff, 1.0);
            }
            grad /= total;
        }
        RepulsionForm::SumLog => {
            for f in feats {
                grad.axpy(-2.0 / h, &(&feats[i] - f), 1.0);
            }
        }
    }
    let scale = match spec.sign {
        ForceSign::Repulsive => -gamma,
        ForceSign::Attractive => gamma,
    };
    spec.feature_map.pullback(&grad) * scale
}

//! Declarative experiment configs (TOML on disk).

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{Initialization, RepulsionSpace, UpdateKind, VariationalScore};
use crate::error::{Result, RsdError};
use crate::inverse::{DecoderMap, ForwardOperator, NoiseSharing, XStep};
use crate::kernels::{
    BandwidthRule, FeatureMap, ForceSign, GammaSchedule, KernelSpec, RepulsionForm,
};
use crate::optim::Optimizer;
use crate::priors::{Covariance, GaussianMixture};
use crate::schedule::{DiffusionSchedule, TimeOrder, WeightingSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ToyBimodal,
    GammaSweep,
    InverseTask,
    SamplerCompare,
    BwFlow,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ToyBimodal => "toy_bimodal",
            ExperimentKind::GammaSweep => "gamma_sweep",
            ExperimentKind::InverseTask => "inverse_task",
            ExperimentKind::SamplerCompare => "sampler_compare",
            ExperimentKind::BwFlow => "bw_flow",
        }
    }
}

/// Seeds as an explicit list or as `base_seed + 0..count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    List(Vec<u64>),
    Range { base_seed: u64, count: u64 },
}

impl Seeds {
    pub fn range(base_seed: u64, count: u64) -> Self {
        Seeds::Range { base_seed, count }
    }

    pub fn to_vec(&self) -> Vec<u64> {
        match self {
            Seeds::List(v) => v.clone(),
            Seeds::Range { base_seed, count } => (0..*count).map(|k| base_seed + k).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    /// Means `[±1, 0]`, covariance `0.005·I`.
    ToyBimodal,
    Ring {
        modes: usize,
        radius: f64,
        variance: f64,
    },
    StandardNormal {
        dim: usize,
    },
    /// Diagonal-covariance mixture.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    },
}

impl PriorConfig {
    pub fn build(&self) -> Result<GaussianMixture> {
        match self {
            PriorConfig::ToyBimodal => Ok(GaussianMixture::toy_bimodal()),
            PriorConfig::Ring {
                modes,
                radius,
                variance,
            } => GaussianMixture::ring(*modes, *radius, *variance),
            PriorConfig::StandardNormal { dim } => {
                if *dim == 0 {
                    return Err(RsdError::Config(
                        "standard_normal prior needs dim ≥ 1".into(),
                    ));
                }
                Ok(GaussianMixture::standard_normal(*dim))
            }
            PriorConfig::Mixture {
                weights,
                means,
                variances,
            } => {
                if variances.len() != means.len() {
                    return Err(RsdError::Config(
                        "mixture needs one variance vector per mean".into(),
                    ));
                }
                GaussianMixture::new(
                    weights.clone(),
                    means.iter().map(|m| DVector::from_vec(m.clone())).collect(),
                    variances
                        .iter()
                        .map(|v| Covariance::Diagonal(DVector::from_vec(v.clone())))
                        .collect(),
                )
            }
        }
    }
}

/// A dense matrix written as a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixOrIdentity {
    Named(String),
    Rows(Vec<Vec<f64>>),
}

impl Default for MatrixOrIdentity {
    fn default() -> Self {
        MatrixOrIdentity::Named("identity".into())
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(RsdError::Config(
            "matrix rows must be non-empty and equally long".into(),
        ));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl MatrixOrIdentity {
    /// `None` for the identity.
    fn matrix(&self) -> Result<Option<DMatrix<f64>>> {
        match self {
            MatrixOrIdentity::Named(s) if s == "identity" => Ok(None),
            MatrixOrIdentity::Named(s) => Err(RsdError::Config(format!(
                "unknown map {s:?}; expected \"identity\" or a row list"
            ))),
            MatrixOrIdentity::Rows(rows) => matrix_from_rows(rows).map(Some),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub gamma_schedule: GammaSchedule,
    pub bandwidth: BandwidthRule,
    pub form: RepulsionForm,
    pub sign: ForceSign,
    pub feature_map: MatrixOrIdentity,
}

impl Default for KernelConfig {
    fn default() -> Self {
        let k = KernelSpec::default();
        Self {
            gamma_schedule: k.gamma_schedule,
            bandwidth: k.bandwidth,
            form: k.form,
            sign: k.sign,
            feature_map: MatrixOrIdentity::default(),
        }
    }
}

impl KernelConfig {
    pub fn build(&self, gamma: f64) -> Result<KernelSpec> {
        let feature_map = match self.feature_map.matrix()? {
            None => FeatureMap::Identity,
            Some(w) => FeatureMap::linear(w)?,
        };
        let spec = KernelSpec {
            gamma,
            gamma_schedule: self.gamma_schedule,
            bandwidth: self.bandwidth,
            feature_map,
            form: self.form,
            sign: self.sign,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    pub kind: UpdateKind,
    /// Learning rate for optimizer-driven rules, `dt` for flows.
    pub step_size: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub steps: usize,
    pub particles: usize,
    pub init: Initialization,
    #[serde(default)]
    pub time_order: TimeOrder,
    #[serde(default)]
    pub weighting: WeightingSpec,
    #[serde(default)]
    pub repulsion_space: RepulsionSpace,
    #[serde(default)]
    pub estimator: VariationalScore,
    /// Dump `(step, particle, coords)` every this many steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorConfig {
    Identity {
        dim: usize,
    },
    Mask {
        keep: Vec<bool>,
    },
    Matrix {
        rows: Vec<Vec<f64>>,
    },
    BoxMask {
        height: usize,
        width: usize,
        rows: (usize, usize),
        cols: (usize, usize),
    },
}

impl OperatorConfig {
    pub fn build(&self) -> Result<ForwardOperator> {
        let op = match self {
            OperatorConfig::Identity { dim } => ForwardOperator::Identity { dim: *dim },
            OperatorConfig::Mask { keep } => ForwardOperator::Mask { keep: keep.clone() },
            OperatorConfig::Matrix { rows } => ForwardOperator::Matrix(matrix_from_rows(rows)?),
            OperatorConfig::BoxMask {
                height,
                width,
                rows,
                cols,
            } => ForwardOperator::BoxMask {
                height: *height,
                width: *width,
                rows: *rows,
                cols: *cols,
            },
        };
        op.validate()?;
        Ok(op)
    }
}

/// Measurement given inline or as a one-column / one-row CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Measurement {
    Inline(Vec<f64>),
    Csv { csv: PathBuf },
}

impl Measurement {
    pub fn load(&self, base: Option<&Path>) -> Result<DVector<f64>> {
        match self {
            Measurement::Inline(v) => Ok(DVector::from_vec(v.clone())),
            Measurement::Csv { csv } => {
                let path = match base {
                    Some(b) if csv.is_relative() => b.join(csv),
                    _ => csv.clone(),
                };
                let text = std::fs::read_to_string(&path)?;
                let values = text
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<f64>().map_err(|e| {
                            RsdError::Config(format!("{}: bad value {s:?}: {e}", path.display()))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DVector::from_vec(values))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseConfig {
    pub operator: OperatorConfig,
    pub y: Measurement,
    pub sigma_v: f64,
    /// One run per value; the record reports the coupling-residual trend.
    pub rhos: Vec<f64>,
    #[serde(default)]
    pub decoder: MatrixOrIdentity,
    pub lr_x: f64,
    pub lr_z: f64,
    #[serde(default)]
    pub x_step: XStep,
    #[serde(default)]
    pub noise: NoiseSharing,
    /// Replace `weighting.lambda` by `1 / E_t[σ_t²]`, which turns the
    /// expected regularizer of a unit Gaussian prior into its exact
    /// negative log-density gradient under uniform time sampling.
    #[serde(default)]
    pub calibrate_lambda: bool,
}

impl InverseConfig {
    pub fn decoder(&self, latent_dim: usize) -> Result<DecoderMap> {
        match self.decoder.matrix()? {
            None => Ok(DecoderMap::Identity { dim: latent_dim }),
            Some(w) => DecoderMap::linear(w),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BwConfig {
    pub init_mean: Vec<f64>,
    pub init_variance: Vec<f64>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
}

fn default_mc_samples() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Steps of the reference ancestral run that scores energy distance.
    pub reference_steps: usize,
    pub reference_samples: usize,
    /// Steps of the ancestral rule compared against the particle samplers.
    pub ancestral_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    /// Repulsion strengths; one setting per value.
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub schedule: DiffusionSchedule,
    pub prior: PriorConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    pub rule: RuleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverse: Option<InverseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bw: Option<BwConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
}

fn default_gammas() -> Vec<f64> {
    vec![0.0]
}

/// Built-in configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    ToyBimodal,
    GammaSweep,
    /// Gaussian prior, identity operator: posterior known in closed form.
    InverseConjugate,
    /// Bimodal prior, only the second coordinate observed.
    InverseCoverage,
    SamplerCompare,
    BwFlowGaussian,
    BwFlowBimodal,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::ToyBimodal,
        Preset::GammaSweep,
        Preset::InverseConjugate,
        Preset::InverseCoverage,
        Preset::SamplerCompare,
        Preset::BwFlowGaussian,
        Preset::BwFlowBimodal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ToyBimodal => "toy_bimodal",
            Preset::GammaSweep => "gamma_sweep",
            Preset::InverseConjugate => "inverse_conjugate",
            Preset::InverseCoverage => "inverse_coverage",
            Preset::SamplerCompare => "sampler_compare",
            Preset::BwFlowGaussian => "bw_flow_gaussian",
            Preset::BwFlowBimodal => "bw_flow_bimodal",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

fn distill_rule(particles: usize) -> RuleConfig {
    RuleConfig {
        kind: UpdateKind::RsdDistill,
        step_size: 0.03,
        optimizer: Optimizer::default(),
        steps: 2000,
        particles,
        init: Initialization::RandomGaussian {
            mean: vec![0.0, 0.0],
            std: 1.0,
        },
        time_order: TimeOrder::Descending,
        weighting: WeightingSpec::default(),
        repulsion_space: RepulsionSpace::Noisy,
        estimator: VariationalScore::Langevin,
        snapshot_every: None,
    }
}

fn sigma_scaled_kernel() -> KernelConfig {
    KernelConfig {
        gamma_schedule: GammaSchedule::SigmaScaled,
        ..KernelConfig::default()
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let out = PathBuf::from("runs").join(preset.name());
        match preset {
            Preset::ToyBimodal => Self {
                experiment: ExperimentKind::ToyBimodal,
                output_dir: out,
                seeds: Seeds::range(0, 200),
                gammas: vec![0.0, 1.0, 2000.0],
                schedule: DiffusionSchedule::default(),
                prior: PriorConfig::ToyBimodal,
                kernel: sigma_scaled_kernel(),
                rule: distill_rule(2),
                inverse: None,
                bw: None,
                compare: None,
            },
            Preset::GammaSweep => Self {
                experiment: ExperimentKind::GammaSweep,
                output_dir: out,
                seeds: Seeds::range(0, 20),
                gammas: vec![0.0, 10.0, 20.0, 30.0, 40.0],
                schedule: DiffusionSchedule::default(),
                prior: PriorConfig::Ring {
                    modes: 8,
                    radius: 2.0,
                    variance: 0.005,
                },
                kernel: sigma_scaled_kernel(),
                rule: distill_rule(4),
                inverse: None,
                bw: None,
                compare: None,
            },
            Preset::InverseConjugate => Self {
                experiment: ExperimentKind::InverseTask,
                output_dir: out,
                seeds: Seeds::range(0, 16),
                gammas: vec![0.0],
                schedule: DiffusionSchedule::default(),
                prior: PriorConfig::StandardNormal { dim: 2 },
                kernel: sigma_scaled_kernel(),
                rule: RuleConfig {
                    step_size: 0.02,
                    time_order: TimeOrder::UniformRandom,
                    ..distill_rule(4)
                },
                inverse: Some(InverseConfig {
                    operator: OperatorConfig::Identity { dim: 2 },
                    y: Measurement::Inline(vec![2.0, -1.0]),
                    sigma_v: 1.0,
                    rhos: vec![1.0, 0.1, 0.01],
                    decoder: MatrixOrIdentity::default(),
                    lr_x: 0.02,
                    lr_z: 0.02,
                    x_step: XStep::Lipschitz,
                    noise: NoiseSharing::PerParticle,
                    calibrate_lambda: true,
                }),
                bw: None,
                compare: None,
            },
            Preset::InverseCoverage => Self {
                experiment: ExperimentKind::InverseTask,
                output_dir: out,
                seeds: Seeds::range(0, 50),
                gammas: vec![0.0, 1.0],
                schedule: DiffusionSchedule::default(),
                prior: PriorConfig::ToyBimodal,
                kernel: sigma_scaled_kernel(),
                rule: distill_rule(8),
                inverse: Some(InverseConfig {
                    operator: OperatorConfig::Mask {
                        keep: vec![false, true],
                    },
                    y: Measurement::Inline(vec![0.0]),
                    sigma_v: 0.1,
                    rhos: vec![0.1],
                    decoder: MatrixOrIdentity::default(),
                    lr_x: 0.03,
                    lr_z: 0.03,
                    x_step: XStep::Lipschitz,
                    noise: NoiseSharing::Shared,
                    calibrate_lambda: false,
                }),
                bw: None,
                compare: None,
            },
            Preset::SamplerCompare => Self {
                experiment: ExperimentKind::SamplerCompare,
                output_dir: out,
                seeds: Seeds::range(0, 50),
                gammas: vec![1.0],
                schedule: DiffusionSchedule::default(),
                prior: PriorConfig::ToyBimodal,
                kernel: sigma_scaled_kernel(),
                rule: RuleConfig {
                    kind: UpdateKind::WgfRepulsive,
                    step_size: 1e-3,
                    optimizer: Optimizer::Plain,
                    steps: 1000,
                    particles: 4,
                    init: Initialization::Clustered {
                        point: vec![1.0, 0.0],
                        std: 0.05,
                    },
                    ..distill_rule(4)
                },
                inverse: None,
                bw: None,
                compare: Some(CompareConfig {
                    reference_steps: 1000,
                    reference_samples: 512,
                    ancestral_steps: 1000,
                }),
            },
            Preset::BwFlowGaussian => Self {
                experiment: ExperimentKind::BwFlow,
                output_dir: out,
                seeds: Seeds::range(0, 4),
                gammas: vec![0.0],
                schedule: DiffusionSchedule::default(),
                prior: PriorConfig::Mixture {
                    weights: vec![1.0],
                    means: vec![vec![1.0, -0.5]],
                    variances: vec![vec![0.5, 0.25]],
                },
                kernel: KernelConfig::default(),
                rule: RuleConfig {
                    kind: UpdateKind::BwGaussian,
                    step_size: 0.01,
                    optimizer: Optimizer::Plain,
                    steps: 2000,
                    particles: 1,
                    init: Initialization::RandomGaussian {
                        mean: vec![-2.0, 2.0],
                        std: 1.0,
                    },
                    ..distill_rule(1)
                },
                inverse: None,
                bw: Some(BwConfig {
                    init_mean: vec![-2.0, 2.0],
                    init_variance: vec![1.0, 1.0],
                    mc_samples: 256,
                }),
                compare: None,
            },
            Preset::BwFlowBimodal => Self {
                experiment: ExperimentKind::BwFlow,
                output_dir: out,
                seeds: Seeds::range(0, 4),
                gammas: vec![0.0],
                schedule: DiffusionSchedule::default(),
                prior: PriorConfig::ToyBimodal,
                kernel: KernelConfig::default(),
                rule: RuleConfig {
                    kind: UpdateKind::BwGaussian,
                    step_size: 1e-3,
                    optimizer: Optimizer::Plain,
                    steps: 4000,
                    particles: 1,
                    init: Initialization::RandomGaussian {
                        mean: vec![0.1, 0.0],
                        std: 1.0,
                    },
                    ..distill_rule(1)
                },
                inverse: None,
                bw: Some(BwConfig {
                    init_mean: vec![0.1, 0.0],
                    init_variance: vec![1.0, 1.0],
                    mc_samples: 256,
                }),
                compare: None,
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| RsdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| RsdError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let seeds = self.seeds.to_vec();
        if seeds.is_empty() {
            return Err(RsdError::Config("seeds must be non-empty".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(RsdError::Config("seeds must be distinct".into()));
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(RsdError::Config(
                "gammas must be a non-empty list of finite, non-negative values".into(),
            ));
        }
        self.schedule.validate()?;
        let prior = self.prior.build()?;
        if self.rule.steps == 0 || self.rule.particles == 0 {
            return Err(RsdError::Config(
                "rule.steps and rule.particles must be positive".into(),
            ));
        }
        if self.rule.snapshot_every == Some(0) {
            return Err(RsdError::Config(
                "rule.snapshot_every must be positive".into(),
            ));
        }
        if self.rule.init.center().len() != prior.dim() {
            return Err(RsdError::Config(format!(
                "rule.init has dimension {}, prior has {}",
                self.rule.init.center().len(),
                prior.dim()
            )));
        }
        self.kernel.build(self.gammas[0])?;
        self.rule.weighting.validate()?;
        self.rule.optimizer.validate()?;
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(RsdError::Config(format!(
                    "{} experiment needs {what}",
                    self.experiment.name()
                )))
            }
        };
        match self.experiment {
            ExperimentKind::ToyBimodal | ExperimentKind::GammaSweep => need(
                matches!(
                    self.rule.kind,
                    UpdateKind::RsdDistill | UpdateKind::WgfRepulsive | UpdateKind::Svgd
                ),
                "rule.kind = rsd_distill, wgf_repulsive or svgd",
            )?,
            ExperimentKind::InverseTask => {
                need(self.inverse.is_some(), "an [inverse] block")?;
                let inv = self.inverse.as_ref().unwrap();
                if inv.rhos.is_empty() {
                    return Err(RsdError::Config("inverse.rhos must be non-empty".into()));
                }
                let op = inv.operator.build()?;
                inv.decoder(prior.dim())?;
                if let Measurement::Inline(y) = &inv.y {
                    if y.len() != op.output_dim() {
                        return Err(RsdError::Config(format!(
                            "inverse.y has length {}, operator output is {}",
                            y.len(),
                            op.output_dim()
                        )));
                    }
                }
            }
            ExperimentKind::SamplerCompare => need(self.compare.is_some(), "a [compare] block")?,
            ExperimentKind::BwFlow => {
                need(self.bw.is_some(), "a [bw] block")?;
                let bw = self.bw.as_ref().unwrap();
                if bw.init_mean.len() != prior.dim() || bw.init_variance.len() != prior.dim() {
                    return Err(RsdError::Config(
                        "bw.init_mean / bw.init_variance must match the prior dimension".into(),
                    ));
                }
                if bw.init_variance.iter().any(|v| v.is_nan() || *v <= 0.0) || bw.mc_samples == 0 {
                    return Err(RsdError::Config(
                        "bw.init_variance must be positive and mc_samples ≥ 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.output_dir = PathBuf::new();
        let canonical = serde_json::to_vec(&semantic).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

//! Augmented repulsive sampler for linear inverse problems.
//!
//! The pair `(x, z)` is optimized by half-quadratic splitting: a `z`-step on
//! the coupling term plus the diffusion regularizer and repulsion, then an
//! `x`-step on the data term plus the coupling term, once per timestep.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{distill_gradients, standard_normal, RepulsionSpace};
use crate::error::{Result, RsdError};
use crate::kernels::KernelSpec;
use crate::metrics;
use crate::optim::{Optimizer, OptimizerState};
use crate::priors::GaussianMixture;
use crate::schedule::{DiffusionSchedule, TimeOrder, WeightingSpec, TIME_STREAM};

#[derive(Debug, Clone, PartialEq)]
pub enum ForwardOperator {
    Identity {
        dim: usize,
    },
    /// Keeps the coordinates flagged `true`, in order.
    Mask {
        keep: Vec<bool>,
    },
    Matrix(DMatrix<f64>),
    /// Row-major `height × width` grid with the rectangle
    /// `rows.0..rows.1 × cols.0..cols.1` hidden; everything else is observed.
    BoxMask {
        height: usize,
        width: usize,
        rows: (usize, usize),
        cols: (usize, usize),
    },
}

impl ForwardOperator {
    pub fn mask(keep: Vec<bool>) -> Result<Self> {
        let op = ForwardOperator::Mask { keep };
        op.validate()?;
        Ok(op)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ForwardOperator::Identity { dim } if *dim == 0 => {
                Err(RsdError::Empty("identity operator"))
            }
            ForwardOperator::Mask { keep } if !keep.iter().any(|&k| k) => {
                Err(RsdError::param("mask must keep at least one coordinate"))
            }
            ForwardOperator::Matrix(a) if a.is_empty() || a.iter().any(|v| !v.is_finite()) => Err(
                RsdError::param("forward matrix must be non-empty and finite"),
            ),
            ForwardOperator::BoxMask { .. } => {
                if self.box_keep()?.iter().any(|&k| k) {
                    Ok(())
                } else {
                    Err(RsdError::param("box mask hides every coordinate"))
                }
            }
            _ => Ok(()),
        }
    }

    fn box_keep(&self) -> Result<Vec<bool>> {
        let ForwardOperator::BoxMask {
            height,
            width,
            rows,
            cols,
        } = self
        else {
            unreachable!("box_keep called on a non-box operator")
        };
        if rows.0 > rows.1 || cols.0 > cols.1 || rows.1 > *height || cols.1 > *width {
            return Err(RsdError::param("box outside the grid"));
        }
        Ok((0..height * width)
            .map(|idx| {
                let (r, c) = (idx / width, idx % width);
                !((rows.0..rows.1).contains(&r) && (cols.0..cols.1).contains(&c))
            })
            .collect())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ForwardOperator::Identity { dim } => *dim,
            ForwardOperator::Mask { keep } => keep.len(),
            ForwardOperator::Matrix(a) => a.ncols(),
            ForwardOperator::BoxMask { height, width, .. } => height * width,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ForwardOperator::Identity { dim } => *dim,
            ForwardOperator::Mask { keep } => keep.iter().filter(|&&k| k).count(),
            ForwardOperator::Matrix(a) => a.nrows(),
            ForwardOperator::BoxMask { .. } => self
                .box_keep()
                .map(|k| k.iter().filter(|&&v| v).count())
                .unwrap_or(0),
        }
    }

    fn check(&self, len: usize, expected: usize, context: &'static str) -> Result<()> {
        if len == expected {
            Ok(())
        } else {
            Err(RsdError::DimensionMismatch {
                context,
                expected,
                got: len,
            })
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x.len(), self.input_dim(), "forward operator input")?;
        Ok(match self {
            ForwardOperator::Identity { .. } => x.clone(),
            ForwardOperator::Mask { keep } => select(keep, x),
            ForwardOperator::Matrix(a) => a * x,
            ForwardOperator::BoxMask { .. } => select(&self.box_keep()?, x),
        })
    }

    pub fn adjoint(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(r.len(), self.output_dim(), "adjoint input")?;
        Ok(match self {
            ForwardOperator::Identity { .. } => r.clone(),
            ForwardOperator::Mask { keep } => scatter(keep, r),
            ForwardOperator::Matrix(a) => a.tr_mul(r),
            ForwardOperator::BoxMask { .. } => scatter(&self.box_keep()?, r),
        })
    }

    /// Dense `m × d` matrix of the operator.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.input_dim();
        let mut out = DMatrix::zeros(self.output_dim(), d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e)?);
        }
        Ok(out)
    }
}

fn select(keep: &[bool], x: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        keep.iter().filter(|&&k| k).count(),
        keep.iter()
            .zip(x.iter())
            .filter(|(k, _)| **k)
            .map(|(_, v)| *v),
    )
}

fn scatter(keep: &[bool], r: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(keep.len());
    let mut it = r.iter();
    for (o, &k) in out.iter_mut().zip(keep) {
        if k {
            *o = *it.next().expect("mask output length checked");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderMap {
    Identity {
        dim: usize,
    },
    /// `x = W z`, `W` of shape `d × p` with full column rank.
    Linear(DMatrix<f64>),
}

impl DecoderMap {
    pub fn linear(w: DMatrix<f64>) -> Result<Self> {
        let d = DecoderMap::Linear(w);
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DecoderMap::Identity { dim } if *dim == 0 => Err(RsdError::Empty("identity decoder")),
            DecoderMap::Linear(w) => {
                if w.nrows() < w.ncols() || w.iter().any(|v| !v.is_finite()) {
                    return Err(RsdError::param("decoder must be finite with rows >= cols"));
                }
                let sv = w.clone().svd(false, false).singular_values;
                let max = sv.max();
                let smallest = sv.min();
                if smallest.is_nan() || smallest <= 1e-10 * max.max(f64::MIN_POSITIVE) {
                    return Err(RsdError::param("decoder does not have full column rank"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            DecoderMap::Identity { dim } => *dim,
            DecoderMap::Linear(w) => w.ncols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            DecoderMap::Identity { dim } => *dim,
            DecoderMap::Linear(w) => w.nrows(),
        }
    }

    pub fn decode(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            DecoderMap::Identity { .. } => z.clone(),
            DecoderMap::Linear(w) => w * z,
        }
    }

    fn pullback(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            DecoderMap::Identity { .. } => v.clone(),
            DecoderMap::Linear(w) => w.tr_mul(v),
        }
    }
}

/// Whether the diffusion noise in the `z`-step is drawn per particle or shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    #[default]
    PerParticle,
    Shared,
}

/// How the `x`-step takes its single step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XStep {
    /// The task optimizer with learning rate `lr_x`.
    #[default]
    Optimizer,
    /// Plain gradient step of length `1/L`, `L = ‖A‖²/σ_v² + 1/ρ²` (the
    /// Lipschitz constant of the `x` objective). For masks and the identity
    /// this lands exactly on the `x`-subproblem minimizer.
    Lipschitz,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseTask {
    pub operator: ForwardOperator,
    pub y: DVector<f64>,
    pub sigma_v: f64,
    pub decoder: DecoderMap,
    pub rho: f64,
    pub weighting: WeightingSpec,
    pub prior: GaussianMixture,
    pub kernel: KernelSpec,
    pub schedule: DiffusionSchedule,
    pub n_particles: usize,
    pub lr_x: f64,
    pub lr_z: f64,
    pub optimizer: Optimizer,
    pub x_step: XStep,
    pub time_order: TimeOrder,
    pub noise: NoiseSharing,
    pub repulsion_space: RepulsionSpace,
}

impl InverseTask {
    /// Task with the default solver settings: 4 particles, adaptive moments
    /// (0.9, 0.99), descending time, lr_x = 0.4, lr_z = 0.8.
    pub fn new(
        operator: ForwardOperator,
        y: DVector<f64>,
        sigma_v: f64,
        decoder: DecoderMap,
        rho: f64,
        prior: GaussianMixture,
    ) -> Result<Self> {
        let task = Self {
            operator,
            y,
            sigma_v,
            decoder,
            rho,
            weighting: WeightingSpec {
                sigma_v,
                rho,
                ..WeightingSpec::default()
            },
            prior,
            kernel: KernelSpec::default(),
            schedule: DiffusionSchedule::default(),
            n_particles: 4,
            lr_x: 0.4,
            lr_z: 0.8,
            optimizer: Optimizer::default(),
            x_step: XStep::Optimizer,
            time_order: TimeOrder::Descending,
            noise: NoiseSharing::PerParticle,
            repulsion_space: RepulsionSpace::Noisy,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        self.operator.validate()?;
        self.decoder.validate()?;
        self.kernel.validate()?;
        self.weighting.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if self.operator.input_dim() != self.decoder.output_dim() {
            return Err(RsdError::DimensionMismatch {
                context: "operator input vs decoder output",
                expected: self.decoder.output_dim(),
                got: self.operator.input_dim(),
            });
        }
        if self.y.len() != self.operator.output_dim() {
            return Err(RsdError::DimensionMismatch {
                context: "measurement",
                expected: self.operator.output_dim(),
                got: self.y.len(),
            });
        }
        if self.prior.dim() != self.decoder.latent_dim() {
            return Err(RsdError::DimensionMismatch {
                context: "prior vs latent dimension",
                expected: self.decoder.latent_dim(),
                got: self.prior.dim(),
            });
        }
        self.kernel
            .feature_map
            .check_input(self.decoder.latent_dim())?;
        for (name, v) in [
            ("sigma_v", self.sigma_v),
            ("rho", self.rho),
            ("lr_x", self.lr_x),
            ("lr_z", self.lr_z),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RsdError::param(format!("{name} must be positive")));
            }
        }
        if self.n_particles == 0 {
            return Err(RsdError::Empty("particle set"));
        }
        Ok(())
    }

    /// `‖y − f(x)‖² / (2σ_v²) + ‖x − D(z)‖² / (2ρ²)` for one particle pair.
    pub fn surrogate_objective(&self, x: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
        let data = (&self.y - self.operator.apply(x)?).norm_squared();
        let coupling = (x - self.decoder.decode(z)).norm_squared();
        Ok(data / (2.0 * self.sigma_v * self.sigma_v) + coupling / (2.0 * self.rho * self.rho))
    }

    /// Gradient of the coupling term with respect to `z`.
    pub fn coupling_grad_z(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        self.decoder.pullback(&(x - self.decoder.decode(z))) * (-1.0 / (self.rho * self.rho))
    }

    /// Gradient of the data and coupling terms with respect to `x`.
    pub fn x_grad(&self, x: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
        let data = self
            .operator
            .adjoint(&(&self.y - self.operator.apply(x)?))?
            * (-1.0 / (self.sigma_v * self.sigma_v));
        Ok(data + (x - self.decoder.decode(z)) / (self.rho * self.rho))
    }

    /// Lipschitz constant of the `x` objective.
    pub fn x_lipschitz(&self) -> Result<f64> {
        let a = self.operator.to_matrix()?;
        let op_norm = a.singular_values().max();
        Ok(op_norm * op_norm / (self.sigma_v * self.sigma_v) + 1.0 / (self.rho * self.rho))
    }

    /// Full `z`-step direction for every particle given explicit noise.
    pub fn z_directions(
        &self,
        x: &[DVector<f64>],
        z: &[DVector<f64>],
        t: f64,
        noise: &[DVector<f64>],
    ) -> Result<(Vec<DVector<f64>>, bool)> {
        let reg = distill_gradients(
            z,
            &self.prior,
            &self.kernel,
            &self.schedule,
            &self.weighting,
            self.repulsion_space,
            t,
            noise,
        )?;
        let dirs = reg
            .grads
            .into_iter()
            .zip(x.iter().zip(z))
            .map(|(g, (xi, zi))| g + self.coupling_grad_z(xi, zi))
            .collect();
        Ok((dirs, reg.degenerate))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseDiagnostics {
    pub step: usize,
    pub t: f64,
    pub data_residual: f64,
    pub coupling_residual: f64,
    /// NaN when a particle has zero norm.
    pub diversity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseSolution {
    pub x: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub diagnostics: Vec<InverseDiagnostics>,
    pub degenerate_steps: usize,
}

/// Mean over particles of `‖xⁱ − D(zⁱ)‖²`.
pub fn coupling_residual(
    x: &[DVector<f64>],
    z: &[DVector<f64>],
    decoder: &DecoderMap,
) -> Result<f64> {
    if x.len() != z.len() {
        return Err(RsdError::DimensionMismatch {
            context: "particle counts",
            expected: x.len(),
            got: z.len(),
        });
    }
    if x.is_empty() {
        return Err(RsdError::Empty("particle set"));
    }
    Ok(x.iter()
        .zip(z)
        .map(|(xi, zi)| (xi - decoder.decode(zi)).norm_squared())
        .sum::<f64>()
        / x.len() as f64)
}

fn data_residual(task: &InverseTask, x: &[DVector<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for xi in x {
        total += (&task.y - task.operator.apply(xi)?).norm_squared();
    }
    Ok(total / x.len() as f64)
}

/// Run the alternating solver for `num_steps` timesteps.
pub fn rsd_inverse_solve(
    task: &InverseTask,
    num_steps: usize,
    seed: u64,
) -> Result<InverseSolution> {
    task.validate()?;
    let n = task.n_particles;
    let d = task.decoder.output_dim();
    let p = task.decoder.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<_> = (0..n).map(|_| standard_normal(&mut rng, d)).collect();
    let mut z: Vec<_> = (0..n).map(|_| standard_normal(&mut rng, p)).collect();
    let times = task
        .schedule
        .timesteps(task.time_order, num_steps, seed ^ TIME_STREAM)?;

    let mut z_state = OptimizerState::new(n, p);
    let mut x_state = OptimizerState::new(n, d);
    let x_lipschitz = match task.x_step {
        XStep::Lipschitz => task.x_lipschitz()?,
        XStep::Optimizer => f64::NAN,
    };
    let mut diagnostics = Vec::with_capacity(num_steps);
    let mut degenerate_steps = 0;

    for (step, &t) in times.iter().enumerate() {
        let noise: Vec<DVector<f64>> = match task.noise {
            NoiseSharing::PerParticle => (0..n).map(|_| standard_normal(&mut rng, p)).collect(),
            NoiseSharing::Shared => vec![standard_normal(&mut rng, p); n],
        };
        let (z_dirs, degenerate) = task.z_directions(&x, &z, t, &noise)?;
        if degenerate {
            degenerate_steps += 1;
        }
        z_state.apply(&task.optimizer, &mut z, &z_dirs, task.lr_z);

        let x_dirs = x
            .iter()
            .zip(&z)
            .map(|(xi, zi)| task.x_grad(xi, zi))
            .collect::<Result<Vec<_>>>()?;
        match task.x_step {
            XStep::Optimizer => x_state.apply(&task.optimizer, &mut x, &x_dirs, task.lr_x),
            XStep::Lipschitz => {
                x_state.apply(&Optimizer::Plain, &mut x, &x_dirs, 1.0 / x_lipschitz)
            }
        }

        for (i, (xi, zi)) in x.iter().zip(&z).enumerate() {
            if xi.iter().chain(zi.iter()).any(|v| !v.is_finite()) {
                return Err(RsdError::NonFinite {
                    step: step + 1,
                    particle: i,
                });
            }
        }
        diagnostics.push(InverseDiagnostics {
            step: step + 1,
            t,
            data_residual: data_residual(task, &x)?,
            coupling_residual: coupling_residual(&x, &z, &task.decoder)?,
            diversity: if n >= 2 {
                metrics::diversity(&x, &crate::kernels::FeatureMap::Identity).unwrap_or(f64::NAN)
            } else {
                f64::NAN
            },
        });
    }
    Ok(InverseSolution {
        x,
        z,
        diagnostics,
        degenerate_steps,
    })
}

//! Per-particle first-order optimizers.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsdError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Plain,
    AdaptiveMoments { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::AdaptiveMoments {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    pub fn validate(&self) -> Result<()> {
        if let Optimizer::AdaptiveMoments { beta1, beta2, eps } = *self {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(RsdError::param(
                    "moment decay rates must lie in [0, 1) and eps > 0",
                ));
            }
        }
        Ok(())
    }
}

/// Moment accumulators for a set of parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<DVector<f64>>,
    pub second: Vec<DVector<f64>>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(count: usize, dim: usize) -> Self {
        Self {
            first: vec![DVector::zeros(dim); count],
            second: vec![DVector::zeros(dim); count],
            steps: 0,
        }
    }

    /// One descent step `params[i] -= lr · direction(grads[i])`.
    pub fn apply(
        &mut self,
        optimizer: &Optimizer,
        params: &mut [DVector<f64>],
        grads: &[DVector<f64>],
        lr: f64,
    ) {
        debug_assert_eq!(params.len(), grads.len());
        self.steps += 1;
        match *optimizer {
            Optimizer::Plain => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.axpy(-lr, g, 1.0);
                }
            }
            Optimizer::AdaptiveMoments { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powf(self.steps as f64);
                let c2 = 1.0 - beta2.powf(self.steps as f64);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    for k in 0..p.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

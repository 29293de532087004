//! Ensemble diversity, mode coverage and sample-distance metrics.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsdError};
use crate::kernels::FeatureMap;
use crate::priors::GaussianMixture;
use crate::schedule::DiffusionSchedule;

/// Mean cosine similarity over ordered pairs `i ≠ j` in feature space.
pub fn pairwise_similarity(particles: &[DVector<f64>], features: &FeatureMap) -> Result<f64> {
    let n = particles.len();
    if n < 2 {
        return Err(RsdError::param("similarity needs at least two particles"));
    }
    let dim = particles[0].len();
    features.check_input(dim)?;
    let mut unit = Vec::with_capacity(n);
    for (i, p) in particles.iter().enumerate() {
        if p.len() != dim {
            return Err(RsdError::DimensionMismatch {
                context: "particle",
                expected: dim,
                got: p.len(),
            });
        }
        let f = features.apply(p);
        let norm = f.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(RsdError::ZeroNormFeature(i));
        }
        unit.push(f / norm);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 2.0 * unit[i].dot(&unit[j]).clamp(-1.0, 1.0);
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// `1 − pairwise_similarity`, in `[0, 2]`.
pub fn diversity(particles: &[DVector<f64>], features: &FeatureMap) -> Result<f64> {
    Ok(1.0 - pairwise_similarity(particles, features)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeAssignment {
    pub mode_index: Vec<usize>,
    pub distinct_mode_count: usize,
    pub collapsed: bool,
}

/// Assign each particle to its most responsible mixture component at t = 0.
/// Ties go to the lowest component index.
pub fn assign_modes(
    particles: &[DVector<f64>],
    mixture: &GaussianMixture,
) -> Result<ModeAssignment> {
    let clean = mixture.diffuse(&DiffusionSchedule::default(), 0.0)?;
    let mut mode_index = Vec::with_capacity(particles.len());
    for p in particles {
        let logs = clean.component_log_densities(p)?;
        let mut best = 0;
        for (k, l) in logs.iter().enumerate() {
            if *l > logs[best] {
                best = k;
            }
        }
        mode_index.push(best);
    }
    let mut seen = vec![false; mixture.num_components()];
    mode_index.iter().for_each(|&k| seen[k] = true);
    let distinct_mode_count = seen.iter().filter(|&&s| s).count();
    Ok(ModeAssignment {
        collapsed: distinct_mode_count < particles.len().min(mixture.num_components()),
        mode_index,
        distinct_mode_count,
    })
}

/// Euclidean distance from `x` to the closest component mean.
pub fn nearest_mode_distance(x: &DVector<f64>, mixture: &GaussianMixture) -> f64 {
    mixture
        .means()
        .iter()
        .map(|m| (x - m).norm())
        .fold(f64::INFINITY, f64::min)
}

/// V-statistic energy distance `2E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖`.
///
/// Arguments are put in a canonical order first so that swapping them gives
/// a bit-identical result.
pub fn energy_distance(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(RsdError::Empty("energy distance sample"));
    }
    let dim = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|p| p.len() != dim) {
        return Err(RsdError::DimensionMismatch {
            context: "energy distance sample",
            expected: dim,
            got: bad.len(),
        });
    }
    let (a, b) = if canonical_before(a, b) {
        (a, b)
    } else {
        (b, a)
    };
    let cross = mean_distance(a, b);
    let within = mean_distance(a, a) + mean_distance(b, b);
    Ok((2.0 * cross - within).max(0.0))
}

fn canonical_before(a: &[DVector<f64>], b: &[DVector<f64>]) -> bool {
    if a.len() != b.len() {
        return a.len() < b.len();
    }
    for (pa, pb) in a.iter().zip(b) {
        for (x, y) in pa.iter().zip(pb.iter()) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Less => return true,
                std::cmp::Ordering::Greater => return false,
                std::cmp::Ordering::Equal => {}
            }
        }
    }
    true
}

fn mean_distance(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    // row sums in parallel, reduced sequentially in index order
    let rows: Vec<f64> = a
        .par_iter()
        .map(|x| b.iter().map(|y| (x - y).norm()).sum::<f64>())
        .collect();
    rows.iter().sum::<f64>() / (a.len() * b.len()) as f64
}

/// `10 log10(d · range² / ‖x − x̂‖²)` for vector signals.
pub fn psnr(x: &DVector<f64>, estimate: &DVector<f64>, range: f64) -> Result<f64> {
    if x.len() != estimate.len() {
        return Err(RsdError::DimensionMismatch {
            context: "psnr",
            expected: x.len(),
            got: estimate.len(),
        });
    }
    let err = (x - estimate).norm_squared();
    Ok(10.0 * (x.len() as f64 * range * range / err).log10())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(RsdError::DimensionMismatch {
            context: "spearman",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(RsdError::param("spearman needs at least two points"));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

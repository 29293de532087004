//! Run records and their CSV / JSON serialization.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::config::ExperimentKind;

/// Metrics of one `(setting, seed)` run. Fields that do not apply to the
/// experiment stay `None` and are written as empty CSV cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub setting: String,
    pub seed: u64,
    pub diversity: Option<f64>,
    pub collapsed: Option<bool>,
    pub distinct_modes: Option<usize>,
    pub mode_distance: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub energy_distance: Option<f64>,
    pub data_residual: Option<f64>,
    pub coupling_residual: Option<f64>,
    pub mean_error: Option<f64>,
    pub covariance_trace: Option<f64>,
    /// Bandwidth fallbacks (particle rules) or SPD repairs (BW flow).
    pub degenerate_steps: usize,
    /// Set when the run diverged; the other metrics are then empty.
    pub error: Option<String>,
}

impl SeedMetrics {
    pub fn new(setting: &str, seed: u64) -> Self {
        Self {
            setting: setting.to_string(),
            seed,
            diversity: None,
            collapsed: None,
            distinct_modes: None,
            mode_distance: None,
            log_likelihood: None,
            energy_distance: None,
            data_residual: None,
            coupling_residual: None,
            mean_error: None,
            covariance_trace: None,
            degenerate_steps: 0,
            error: None,
        }
    }

    pub fn failed(setting: &str, seed: u64, error: String) -> Self {
        Self {
            error: Some(error),
            ..Self::new(setting, seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    /// Mean and sample standard deviation; `None` for an empty input.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

/// Per-setting aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub setting: String,
    /// The swept value (γ, ρ, ...), when the setting has one.
    pub value: Option<f64>,
    pub runs: usize,
    pub failures: usize,
    pub collapse_count: Option<usize>,
    pub collapse_fraction: Option<f64>,
    /// Fraction of seeds whose particles hit `min(N, K)` distinct modes.
    pub full_coverage_fraction: Option<f64>,
    pub diversity: Option<Summary>,
    pub distinct_modes: Option<Summary>,
    pub mode_distance: Option<Summary>,
    pub log_likelihood: Option<Summary>,
    pub energy_distance: Option<Summary>,
    pub coupling_residual: Option<Summary>,
    pub data_residual: Option<Summary>,
    pub mean_error: Option<Summary>,
    pub covariance_trace: Option<Summary>,
    /// Energy distance of all particles pooled across seeds to a reference
    /// sample of the same size.
    pub pooled_energy_distance: Option<f64>,
    /// Relative error of the pooled particle mean against a reference mean.
    pub pooled_mean_relative_error: Option<f64>,
}

impl Aggregate {
    pub fn from_rows(
        setting: &str,
        value: Option<f64>,
        rows: &[&SeedMetrics],
        modes_for_coverage: Option<usize>,
    ) -> Self {
        let ok: Vec<&SeedMetrics> = rows.iter().copied().filter(|r| r.error.is_none()).collect();
        let collect = |f: &dyn Fn(&SeedMetrics) -> Option<f64>| -> Option<Summary> {
            let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            Summary::of(&v)
        };
        let collapses: Vec<bool> = ok.iter().filter_map(|r| r.collapsed).collect();
        let collapse_count =
            (!collapses.is_empty()).then(|| collapses.iter().filter(|c| **c).count());
        let full_coverage_fraction = modes_for_coverage.and_then(|target| {
            let hits: Vec<usize> = ok.iter().filter_map(|r| r.distinct_modes).collect();
            (!hits.is_empty())
                .then(|| hits.iter().filter(|m| **m >= target).count() as f64 / hits.len() as f64)
        });
        Self {
            setting: setting.to_string(),
            value,
            runs: rows.len(),
            failures: rows.len() - ok.len(),
            collapse_count,
            collapse_fraction: collapse_count.map(|c| c as f64 / collapses.len() as f64),
            full_coverage_fraction,
            diversity: collect(&|r| r.diversity),
            distinct_modes: collect(&|r| r.distinct_modes.map(|m| m as f64)),
            mode_distance: collect(&|r| r.mode_distance),
            log_likelihood: collect(&|r| r.log_likelihood),
            energy_distance: collect(&|r| r.energy_distance),
            coupling_residual: collect(&|r| r.coupling_residual),
            data_residual: collect(&|r| r.data_residual),
            mean_error: collect(&|r| r.mean_error),
            covariance_trace: collect(&|r| r.covariance_trace),
            pooled_energy_distance: None,
            pooled_mean_relative_error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    /// Sorted by setting (in config order), then seed.
    pub seeds: Vec<SeedMetrics>,
    pub aggregates: Vec<Aggregate>,
    /// Inverse task only: mean coupling residual strictly decreases as ρ
    /// shrinks, for every γ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_trend_decreasing: Option<bool>,
    /// Total bandwidth fallbacks (particle rules) or SPD repairs (BW flow).
    pub degenerate_steps: usize,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn aggregate(&self, setting: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.setting == setting)
    }

    pub fn metrics_csv(&self) -> String {
        let header = [
            "setting",
            "seed",
            "diversity",
            "collapsed",
            "distinct_modes",
            "mode_distance",
            "log_likelihood",
            "energy_distance",
            "data_residual",
            "coupling_residual",
            "mean_error",
            "covariance_trace",
            "degenerate_steps",
            "error",
        ];
        let rows = self.seeds.iter().map(|r| {
            vec![
                r.setting.clone(),
                r.seed.to_string(),
                opt(r.diversity),
                r.collapsed.map(|c| c.to_string()).unwrap_or_default(),
                r.distinct_modes.map(|m| m.to_string()).unwrap_or_default(),
                opt(r.mode_distance),
                opt(r.log_likelihood),
                opt(r.energy_distance),
                opt(r.data_residual),
                opt(r.coupling_residual),
                opt(r.mean_error),
                opt(r.covariance_trace),
                r.degenerate_steps.to_string(),
                r.error.clone().unwrap_or_default(),
            ]
        });
        csv_table(&header, rows)
    }

    pub fn summary_csv(&self) -> String {
        let header = [
            "setting",
            "value",
            "runs",
            "failures",
            "collapse_count",
            "full_coverage_fraction",
            "diversity_mean",
            "diversity_std",
            "distinct_modes_mean",
            "mode_distance_mean",
            "log_likelihood_mean",
            "log_likelihood_std",
            "coupling_residual_mean",
            "mean_error_mean",
            "covariance_trace_mean",
            "pooled_energy_distance",
            "pooled_mean_relative_error",
        ];
        let mean = |s: Option<Summary>| opt(s.map(|s| s.mean));
        let rows = self.aggregates.iter().map(|a| {
            vec![
                a.setting.clone(),
                opt(a.value),
                a.runs.to_string(),
                a.failures.to_string(),
                a.collapse_count.map(|c| c.to_string()).unwrap_or_default(),
                opt(a.full_coverage_fraction),
                mean(a.diversity),
                opt(a.diversity.map(|s| s.std)),
                mean(a.distinct_modes),
                mean(a.mode_distance),
                mean(a.log_likelihood),
                opt(a.log_likelihood.map(|s| s.std)),
                mean(a.coupling_residual),
                mean(a.mean_error),
                mean(a.covariance_trace),
                opt(a.pooled_energy_distance),
                opt(a.pooled_mean_relative_error),
            ]
        });
        csv_table(&header, rows)
    }

    /// Human-readable table of the aggregates.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "experiment: {}", self.experiment.name());
        let _ = writeln!(out, "config hash: {}", self.config_hash);
        let _ = writeln!(out, "wall time: {:.2} s", self.wall_time_secs);
        let _ = writeln!(
            out,
            "{:<22} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9} {:>11} {:>11} {:>11}",
            "setting",
            "runs",
            "fail",
            "collapse",
            "coverage",
            "diversity",
            "modes",
            "mode_dist",
            "loglik",
            "coupling"
        );
        let show = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{:<22} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9} {:>11} {:>11} {:>11}",
                a.setting,
                a.runs,
                a.failures,
                a.collapse_count
                    .map(|c| c.to_string())
                    .unwrap_or_else(|| "-".into()),
                show(a.full_coverage_fraction),
                show(a.diversity.map(|s| s.mean)),
                show(a.distinct_modes.map(|s| s.mean)),
                show(a.mode_distance.map(|s| s.mean)),
                show(a.log_likelihood.map(|s| s.mean)),
                a.coupling_residual
                    .map(|s| format!("{:.3e}", s.mean))
                    .unwrap_or_else(|| "-".into()),
            );
            if let Some(ed) = a.pooled_energy_distance {
                let _ = writeln!(out, "{:<22} pooled energy distance {ed:.4}", "");
            }
            if let Some(e) = a.pooled_mean_relative_error {
                let _ = writeln!(out, "{:<22} pooled mean rel. error {e:.3e}", "");
            }
            if let Some(m) = a.mean_error {
                let _ = writeln!(out, "{:<22} mean error {:.3e}", "", m.mean);
            }
            if let Some(c) = a.covariance_trace {
                let _ = writeln!(out, "{:<22} covariance trace {:.4}", "", c.mean);
            }
        }
        if let Some(t) = self.coupling_trend_decreasing {
            let _ = writeln!(out, "coupling residual strictly decreasing in ρ: {t}");
        }
        if self.degenerate_steps > 0 {
            let _ = writeln!(out, "degenerate steps: {}", self.degenerate_steps);
        }
        out
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub(crate) fn csv_table<H: AsRef<str>>(
    header: &[H],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header.iter().map(AsRef::as_ref))
        .expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn coord_header(prefix: &[&str], dim: usize) -> Vec<String> {
    prefix
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|k| format!("x{k}")))
        .collect()
}

/// `setting,particle,x0,x1,...` rows.
pub(crate) fn particles_csv(sets: &[(String, Vec<DVector<f64>>)]) -> String {
    let dim = sets
        .iter()
        .flat_map(|(_, p)| p.first())
        .map(|p| p.len())
        .max()
        .unwrap_or(0);
    let rows = sets.iter().flat_map(|(setting, particles)| {
        particles.iter().enumerate().map(move |(i, p)| {
            [setting.clone(), i.to_string()]
                .into_iter()
                .chain(p.iter().map(|v| fmt_f64(*v)))
                .collect()
        })
    });
    csv_table(&coord_header(&["setting", "particle"], dim), rows)
}

/// `(step, positions)` snapshots of one run.
pub(crate) type Snapshots<'a> = &'a [(usize, Vec<DVector<f64>>)];

/// `setting,step,particle,x0,x1,...` rows for several settings.
pub(crate) fn trajectory_csv(sets: &[(&str, Snapshots)]) -> String {
    let dim = sets
        .iter()
        .flat_map(|(_, frames)| frames.iter().flat_map(|(_, p)| p.first()))
        .map(|p| p.len())
        .max()
        .unwrap_or(0);
    let rows = sets.iter().flat_map(|(setting, frames)| {
        frames.iter().flat_map(move |(step, particles)| {
            particles.iter().enumerate().map(move |(i, p)| {
                [setting.to_string(), step.to_string(), i.to_string()]
                    .into_iter()
                    .chain(p.iter().map(|v| fmt_f64(*v)))
                    .collect()
            })
        })
    });
    csv_table(&coord_header(&["setting", "step", "particle"], dim), rows)
}

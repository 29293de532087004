//! Desk-scale experiment runners: configs in, run records, CSVs and SVG
//! plots out.
//!
//! Seeds run in parallel; results are collected in (setting, seed) order so
//! every CSV is identical whatever the thread count. Wall time lives only in
//! `record.json`.

mod config;
mod plot;
mod record;
mod runners;

use std::path::{Path, PathBuf};

use nalgebra::DVector;

pub use config::{
    BwConfig, CompareConfig, ExperimentConfig, ExperimentKind, InverseConfig, KernelConfig,
    MatrixOrIdentity, Measurement, OperatorConfig, Preset, PriorConfig, RuleConfig, Seeds,
};
pub use record::{Aggregate, RunRecord, SeedMetrics, Summary};
pub use runners::{
    gamma_label, inverse_label, run, run_bw_flow, run_gamma_sweep, run_inverse,
    run_sampler_compare, run_toy_bimodal, Frame, RunOptions, RunOutput, SeedArtifacts,
};

use crate::error::{Result, RsdError};

pub const RECORD_FILE: &str = "record.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Writes the record, CSVs, the resolved config and plots into `dir`.
/// Returns the paths written.
pub fn write_outputs(
    output: &RunOutput,
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: &[u8]| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    let json =
        serde_json::to_vec_pretty(&output.record).map_err(|e| RsdError::Config(e.to_string()))?;
    put(RECORD_FILE.into(), &json)?;
    put(METRICS_FILE.into(), output.record.metrics_csv().as_bytes())?;
    put(SUMMARY_FILE.into(), output.record.summary_csv().as_bytes())?;
    put(CONFIG_FILE.into(), config.to_toml_string()?.as_bytes())?;

    let mut seeds: Vec<u64> = output.artifacts.iter().map(|a| a.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    for seed in &seeds {
        let mine: Vec<&SeedArtifacts> = output
            .artifacts
            .iter()
            .filter(|a| a.seed == *seed)
            .collect();
        let sets: Vec<(String, Vec<DVector<f64>>)> = mine
            .iter()
            .map(|a| (a.setting.clone(), a.particles.clone()))
            .collect();
        put(
            format!("particles_{seed}.csv"),
            record::particles_csv(&sets).as_bytes(),
        )?;
        if mine.iter().any(|a| !a.frames.is_empty()) {
            let sets: Vec<(&str, &[Frame])> = mine
                .iter()
                .map(|a| (a.setting.as_str(), a.frames.as_slice()))
                .collect();
            put(
                format!("trajectory_{seed}.csv"),
                record::trajectory_csv(&sets).as_bytes(),
            )?;
        }
        if mine.iter().any(|a| !a.diagnostics.is_empty()) {
            let rows = mine.iter().flat_map(|a| {
                a.diagnostics
                    .iter()
                    .map(move |(step, data, coupling, div)| {
                        vec![
                            a.setting.clone(),
                            step.to_string(),
                            record::fmt_f64(*data),
                            record::fmt_f64(*coupling),
                            record::fmt_f64(*div),
                        ]
                    })
            });
            let header = [
                "setting",
                "step",
                "data_residual",
                "coupling_residual",
                "diversity",
            ];
            put(
                format!("diagnostics_{seed}.csv"),
                record::csv_table(&header, rows).as_bytes(),
            )?;
        }
    }
    written.extend(write_plots(output, dir)?);
    Ok(written)
}

fn xy(p: &DVector<f64>) -> (f64, f64) {
    (p[0], if p.len() > 1 { p[1] } else { 0.0 })
}

fn plot_name(setting: &str) -> String {
    setting
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_plots(output: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let markers: Vec<(f64, f64)> = output.markers.iter().map(xy).collect();
    let rec = &output.record;
    let settings: Vec<&str> = rec.aggregates.iter().map(|a| a.setting.as_str()).collect();
    let experiment = rec.experiment;

    if experiment != ExperimentKind::BwFlow {
        for s in &settings {
            let points: Vec<(f64, f64)> = output
                .artifacts
                .iter()
                .filter(|a| a.setting == *s)
                .flat_map(|a| a.particles.iter().map(xy))
                .collect();
            let path = dir.join(format!("plot_scatter_{}.svg", plot_name(s)));
            plot::scatter(&path, &[(s.to_string(), points)], &markers)?;
            written.push(path);
        }
    }
    match experiment {
        ExperimentKind::ToyBimodal => {
            let series: Vec<(f64, f64)> = rec
                .aggregates
                .iter()
                .enumerate()
                .filter_map(|(k, a)| a.collapse_count.map(|c| (k as f64, c as f64)))
                .collect();
            let path = dir.join("plot_collapse.svg");
            plot::lines(&path, &[("collapse".into(), series)])?;
            written.push(path);
        }
        ExperimentKind::GammaSweep => {
            let series: Vec<(f64, f64)> = rec
                .aggregates
                .iter()
                .filter_map(|a| Some((a.diversity?.mean, a.log_likelihood?.mean)))
                .collect();
            let path = dir.join("plot_tradeoff.svg");
            plot::lines(&path, &[("tradeoff".into(), series)])?;
            written.push(path);
        }
        ExperimentKind::InverseTask => {
            let series: Vec<(f64, f64)> = rec
                .aggregates
                .iter()
                .filter_map(|a| {
                    Some((
                        a.value?.log10(),
                        a.coupling_residual?.mean.max(f64::MIN_POSITIVE).log10(),
                    ))
                })
                .collect();
            let path = dir.join("plot_coupling.svg");
            plot::lines(&path, &[("coupling".into(), series)])?;
            written.push(path);
        }
        ExperimentKind::BwFlow => {
            let series: Vec<(String, Vec<(f64, f64)>)> = output
                .artifacts
                .iter()
                .map(|a| {
                    (
                        a.seed.to_string(),
                        a.frames.iter().map(|(_, m)| xy(&m[0])).collect(),
                    )
                })
                .collect();
            let path = dir.join("plot_trajectory.svg");
            plot::lines(&path, &series)?;
            written.push(path);
        }
        ExperimentKind::SamplerCompare => {}
    }
    Ok(written)
}

/// Reads `record.json` back from a run directory.
pub fn load_record(dir: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(dir.join(RECORD_FILE))?;
    serde_json::from_str(&text)
        .map_err(|e| RsdError::Config(format!("{}: {e}", dir.join(RECORD_FILE).display())))
}

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, ExperimentKind};
use super::record::{fmt_f64, Aggregate, RunRecord, SeedMetrics};
use crate::ensemble::{ancestral_sample, GaussianState, ParticleEnsemble, UpdateKind, UpdateRule};
use crate::error::{Result, RsdError};
use crate::inverse::{coupling_residual, rsd_inverse_solve, InverseTask};
use crate::kernels::{FeatureMap, KernelSpec};
use crate::metrics;
use crate::priors::{gaussian_posterior_oracle, GaussianMixture, ORACLE_MAX_DIM};
use crate::schedule::TIME_STREAM;

/// Seed of the reference samples drawn for energy distances.
const REFERENCE_SEED: u64 = 0x005e_ed0f_7e57;

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Run every seed on the calling thread.
    pub deterministic: bool,
}

/// One stored frame: step index and particle positions.
pub type Frame = (usize, Vec<DVector<f64>>);

/// Everything a run produces besides the record itself.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub setting: String,
    pub seed: u64,
    pub particles: Vec<DVector<f64>>,
    pub frames: Vec<Frame>,
    /// Inverse task: `(step, data_residual, coupling_residual, diversity)`.
    pub diagnostics: Vec<(usize, f64, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    /// Sorted like `record.seeds`.
    pub artifacts: Vec<SeedArtifacts>,
    /// Mode centres (or the target mean) drawn on scatter plots.
    pub markers: Vec<DVector<f64>>,
}

pub fn run(config: &ExperimentConfig, options: RunOptions) -> Result<RunOutput> {
    config.validate()?;
    let start = Instant::now();
    let body = || match config.experiment {
        ExperimentKind::ToyBimodal | ExperimentKind::GammaSweep => sweep_impl(config),
        ExperimentKind::InverseTask => inverse_impl(config),
        ExperimentKind::SamplerCompare => compare_impl(config),
        ExperimentKind::BwFlow => bw_impl(config),
    };
    let mut out = if options.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| RsdError::Config(format!("thread pool: {e}")))?
            .install(body)?
    } else {
        body()?
    };
    out.record.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Collapse study over `gammas` (toy mixture) or the γ-sweep: same runner,
/// different defaults and plots.
pub fn run_toy_bimodal(config: &ExperimentConfig, options: RunOptions) -> Result<RunRecord> {
    expect_kind(config, ExperimentKind::ToyBimodal)?;
    run(config, options).map(|o| o.record)
}

pub fn run_gamma_sweep(config: &ExperimentConfig, options: RunOptions) -> Result<RunRecord> {
    expect_kind(config, ExperimentKind::GammaSweep)?;
    run(config, options).map(|o| o.record)
}

pub fn run_inverse(config: &ExperimentConfig, options: RunOptions) -> Result<RunRecord> {
    expect_kind(config, ExperimentKind::InverseTask)?;
    run(config, options).map(|o| o.record)
}

pub fn run_sampler_compare(config: &ExperimentConfig, options: RunOptions) -> Result<RunRecord> {
    expect_kind(config, ExperimentKind::SamplerCompare)?;
    run(config, options).map(|o| o.record)
}

pub fn run_bw_flow(config: &ExperimentConfig, options: RunOptions) -> Result<RunRecord> {
    expect_kind(config, ExperimentKind::BwFlow)?;
    run(config, options).map(|o| o.record)
}

fn expect_kind(config: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if config.experiment != kind {
        return Err(RsdError::Config(format!(
            "expected a {} config, got {}",
            kind.name(),
            config.experiment.name()
        )));
    }
    Ok(())
}

pub fn gamma_label(gamma: f64) -> String {
    format!("gamma={}", fmt_f64(gamma))
}

pub fn inverse_label(gamma: f64, rho: f64) -> String {
    format!("gamma={};rho={}", fmt_f64(gamma), fmt_f64(rho))
}

struct Job<'a> {
    setting: String,
    seed: u64,
    spec: &'a KernelSpec,
}

type JobResult = (SeedMetrics, Option<SeedArtifacts>);

fn run_jobs<F>(jobs: &[Job<'_>], f: F) -> (Vec<SeedMetrics>, Vec<SeedArtifacts>)
where
    F: Fn(&Job<'_>) -> Result<JobResult> + Sync,
{
    let results: Vec<JobResult> = jobs
        .par_iter()
        .map(|job| {
            f(job).unwrap_or_else(|e| {
                (
                    SeedMetrics::failed(&job.setting, job.seed, e.to_string()),
                    None,
                )
            })
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut artifacts = Vec::new();
    for (row, art) in results {
        rows.push(row);
        artifacts.extend(art);
    }
    (rows, artifacts)
}

fn aggregates(
    settings: &[(String, Option<f64>)],
    rows: &[SeedMetrics],
    coverage: Option<usize>,
) -> Vec<Aggregate> {
    settings
        .iter()
        .map(|(s, v)| {
            let mine: Vec<&SeedMetrics> = rows.iter().filter(|r| &r.setting == s).collect();
            Aggregate::from_rows(s, *v, &mine, coverage)
        })
        .collect()
}

fn record(
    config: &ExperimentConfig,
    seeds: Vec<SeedMetrics>,
    aggregates: Vec<Aggregate>,
) -> RunRecord {
    RunRecord {
        experiment: config.experiment,
        config_hash: config.hash(),
        degenerate_steps: seeds.iter().map(|r| r.degenerate_steps).sum(),
        seeds,
        aggregates,
        coupling_trend_decreasing: None,
        wall_time_secs: 0.0,
    }
}

fn mode_metrics(
    row: &mut SeedMetrics,
    particles: &[DVector<f64>],
    modes: &GaussianMixture,
) -> Result<()> {
    let assignment = metrics::assign_modes(particles, modes)?;
    row.collapsed = Some(assignment.collapsed);
    row.distinct_modes = Some(assignment.distinct_mode_count);
    row.mode_distance = Some(
        particles
            .iter()
            .map(|p| metrics::nearest_mode_distance(p, modes))
            .sum::<f64>()
            / particles.len() as f64,
    );
    row.diversity = metrics::diversity(particles, &FeatureMap::Identity)
        .ok()
        .filter(|d| d.is_finite());
    Ok(())
}

/// Runs one ensemble under `config.rule` and returns it with any snapshots.
fn drive_ensemble(
    config: &ExperimentConfig,
    prior: &GaussianMixture,
    spec: &KernelSpec,
    kind: UpdateKind,
    seed: u64,
) -> Result<(ParticleEnsemble, Vec<Frame>)> {
    let rule_cfg = &config.rule;
    let rule = UpdateRule::new(kind, rule_cfg.step_size, rule_cfg.optimizer)?;
    let mut ensemble =
        ParticleEnsemble::initialize(&rule_cfg.init, rule_cfg.particles, rule, seed)?;
    let times =
        config
            .schedule
            .timesteps(rule_cfg.time_order, rule_cfg.steps, seed ^ TIME_STREAM)?;
    let dt = rule_cfg.step_size;
    let mut frames = Vec::new();
    let snapshot = |step: usize, e: &ParticleEnsemble, frames: &mut Vec<Frame>| {
        if let Some(every) = rule_cfg.snapshot_every {
            if step.is_multiple_of(every) || step == rule_cfg.steps {
                frames.push((step, e.positions().to_vec()));
            }
        }
    };
    snapshot(0, &ensemble, &mut frames);
    for (k, &t) in times.iter().enumerate() {
        match kind {
            UpdateKind::RsdDistill => ensemble.rsd_distill_step_at(
                prior,
                spec,
                &config.schedule,
                &rule_cfg.weighting,
                rule_cfg.repulsion_space,
                t,
            )?,
            UpdateKind::WgfRepulsive => ensemble.wgf_repulsive_step(
                prior,
                &config.schedule,
                spec,
                t,
                dt,
                rule_cfg.estimator,
            )?,
            UpdateKind::Svgd => ensemble.svgd_step(prior, &config.schedule, t, spec, dt)?,
            UpdateKind::Ancestral | UpdateKind::BwGaussian => {
                return Err(RsdError::Config(format!(
                    "{kind:?} is not a particle-ensemble rule"
                )))
            }
        };
        snapshot(k + 1, &ensemble, &mut frames);
    }
    Ok((ensemble, frames))
}

fn sweep_impl(config: &ExperimentConfig) -> Result<RunOutput> {
    let prior = config.prior.build()?;
    let specs = config
        .gammas
        .iter()
        .map(|&g| config.kernel.build(g))
        .collect::<Result<Vec<_>>>()?;
    let seeds = config.seeds.to_vec();
    let mut jobs = Vec::new();
    let mut settings = Vec::new();
    for (g, spec) in config.gammas.iter().zip(&specs) {
        settings.push((gamma_label(*g), Some(*g)));
        for &seed in &seeds {
            jobs.push(Job {
                setting: gamma_label(*g),
                seed,
                spec,
            });
        }
    }
    let (rows, artifacts) = run_jobs(&jobs, |job| {
        let (ensemble, frames) =
            drive_ensemble(config, &prior, job.spec, config.rule.kind, job.seed)?;
        let particles = ensemble.positions().to_vec();
        let mut row = SeedMetrics::new(&job.setting, job.seed);
        mode_metrics(&mut row, &particles, &prior)?;
        row.log_likelihood = Some(
            particles
                .iter()
                .map(|p| prior.log_pdf(&config.schedule, 0.0, p))
                .sum::<Result<f64>>()?
                / particles.len() as f64,
        );
        row.degenerate_steps = ensemble.degenerate_steps();
        Ok((
            row,
            Some(SeedArtifacts {
                setting: job.setting.clone(),
                seed: job.seed,
                particles,
                frames,
                diagnostics: Vec::new(),
            }),
        ))
    });
    let coverage = Some(config.rule.particles.min(prior.num_components()));
    let aggregates = aggregates(&settings, &rows, coverage);
    Ok(RunOutput {
        record: record(config, rows, aggregates),
        artifacts,
        markers: prior.means().to_vec(),
    })
}

fn inverse_impl(config: &ExperimentConfig) -> Result<RunOutput> {
    let inv = config.inverse.as_ref().expect("validated");
    let prior = config.prior.build()?;
    let operator = inv.operator.build()?;
    let y = inv.y.load(None)?;
    let decoder = inv.decoder(prior.dim())?;
    let mut weighting = config.rule.weighting;
    if inv.calibrate_lambda {
        weighting.lambda = 1.0 / config.schedule.mean_noise_variance();
    }
    let mut tasks = Vec::new();
    let mut settings = Vec::new();
    for &gamma in &config.gammas {
        for &rho in &inv.rhos {
            let mut task = InverseTask::new(
                operator.clone(),
                y.clone(),
                inv.sigma_v,
                decoder.clone(),
                rho,
                prior.clone(),
            )?;
            task.weighting = crate::schedule::WeightingSpec {
                sigma_v: inv.sigma_v,
                rho,
                ..weighting
            };
            task.kernel = config.kernel.build(gamma)?;
            task.schedule = config.schedule;
            task.n_particles = config.rule.particles;
            task.lr_x = inv.lr_x;
            task.lr_z = inv.lr_z;
            task.optimizer = config.rule.optimizer;
            task.x_step = inv.x_step;
            task.time_order = config.rule.time_order;
            task.noise = inv.noise;
            task.repulsion_space = config.rule.repulsion_space;
            task.validate()?;
            settings.push((inverse_label(gamma, rho), Some(rho)));
            tasks.push(task);
        }
    }
    // The posterior is only available in closed form when the decoder is the
    // identity (x and z share the prior) and the dimension is small.
    let posterior = match (&decoder, prior.dim() <= ORACLE_MAX_DIM) {
        (crate::inverse::DecoderMap::Identity { .. }, true) => Some(gaussian_posterior_oracle(
            &prior,
            &operator.to_matrix()?,
            &y,
            inv.sigma_v,
        )?),
        _ => None,
    };
    let seeds = config.seeds.to_vec();
    let kernel_placeholder = KernelSpec::default();
    let mut jobs = Vec::new();
    for (setting, _) in &settings {
        for &seed in &seeds {
            jobs.push(Job {
                setting: setting.clone(),
                seed,
                spec: &kernel_placeholder,
            });
        }
    }
    let steps = config.rule.steps;
    let (rows, artifacts) = run_jobs(&jobs, |job| {
        let idx = settings
            .iter()
            .position(|(s, _)| *s == job.setting)
            .expect("known setting");
        let task = &tasks[idx];
        let sol = rsd_inverse_solve(task, steps, job.seed)?;
        let mut row = SeedMetrics::new(&job.setting, job.seed);
        if let Some(post) = &posterior {
            mode_metrics(&mut row, &sol.x, post)?;
            let reference = post.sample(
                &config.schedule,
                0.0,
                sol.x.len(),
                REFERENCE_SEED ^ job.seed,
            )?;
            row.energy_distance = Some(metrics::energy_distance(&sol.x, &reference)?);
        } else {
            row.diversity = metrics::diversity(&sol.x, &FeatureMap::Identity)
                .ok()
                .filter(|d| d.is_finite());
        }
        let last = sol.diagnostics.last().expect("at least one step");
        row.data_residual = Some(last.data_residual);
        row.coupling_residual = Some(coupling_residual(&sol.x, &sol.z, &task.decoder)?);
        row.degenerate_steps = sol.degenerate_steps;
        let diagnostics = sol
            .diagnostics
            .iter()
            .map(|d| (d.step, d.data_residual, d.coupling_residual, d.diversity))
            .collect();
        Ok((
            row,
            Some(SeedArtifacts {
                setting: job.setting.clone(),
                seed: job.seed,
                particles: sol.x,
                frames: Vec::new(),
                diagnostics,
            }),
        ))
    });
    let coverage = posterior
        .as_ref()
        .map(|p| config.rule.particles.min(p.num_components()));
    let mut aggs = aggregates(&settings, &rows, coverage);
    if let Some(post) = &posterior {
        let target_mean = post.mean();
        for agg in aggs.iter_mut() {
            let pooled: Vec<DVector<f64>> = artifacts
                .iter()
                .filter(|a| a.setting == agg.setting)
                .flat_map(|a| a.particles.iter().cloned())
                .collect();
            if pooled.is_empty() {
                continue;
            }
            let reference = post.sample(&config.schedule, 0.0, pooled.len(), REFERENCE_SEED)?;
            agg.pooled_energy_distance = Some(metrics::energy_distance(&pooled, &reference)?);
            let mean = pooled
                .iter()
                .fold(DVector::zeros(post.dim()), |acc, p| acc + p)
                / pooled.len() as f64;
            let scale = target_mean.norm();
            agg.pooled_mean_relative_error = Some(if scale > 0.0 {
                (&mean - &target_mean).norm() / scale
            } else {
                mean.norm()
            });
        }
    }
    let mut rec = record(config, rows, aggs);
    rec.coupling_trend_decreasing = Some(coupling_trend(config, &rec));
    Ok(RunOutput {
        record: rec,
        artifacts,
        markers: posterior.map(|p| p.means().to_vec()).unwrap_or_default(),
    })
}

/// For every γ, mean coupling residual strictly decreases along ρ sorted
/// from largest to smallest.
fn coupling_trend(config: &ExperimentConfig, rec: &RunRecord) -> bool {
    let inv = config.inverse.as_ref().expect("validated");
    let mut rhos = inv.rhos.clone();
    rhos.sort_by(|a, b| b.total_cmp(a));
    config.gammas.iter().all(|&g| {
        let values: Vec<Option<f64>> = rhos
            .iter()
            .map(|&r| {
                rec.aggregate(&inverse_label(g, r))
                    .and_then(|a| a.coupling_residual.map(|s| s.mean))
            })
            .collect();
        values.iter().all(Option::is_some)
            && values.windows(2).all(|w| w[1].unwrap() < w[0].unwrap())
    })
}

fn compare_impl(config: &ExperimentConfig) -> Result<RunOutput> {
    let cmp = config.compare.as_ref().expect("validated");
    let prior = config.prior.build()?;
    let spec = config.kernel.build(config.gammas[0])?;
    let reference = ancestral_sample(
        &prior,
        &config.schedule,
        cmp.reference_steps,
        cmp.reference_samples,
        REFERENCE_SEED,
    )?;
    let rules = [
        UpdateKind::WgfRepulsive,
        UpdateKind::Svgd,
        UpdateKind::Ancestral,
    ];
    let label = |k: UpdateKind| match k {
        UpdateKind::WgfRepulsive => "wgf_repulsive",
        UpdateKind::Svgd => "svgd",
        UpdateKind::Ancestral => "ancestral",
        UpdateKind::RsdDistill => "rsd_distill",
        UpdateKind::BwGaussian => "bw_gaussian",
    };
    let settings: Vec<(String, Option<f64>)> = rules
        .iter()
        .map(|&k| (label(k).to_string(), None))
        .collect();
    let seeds = config.seeds.to_vec();
    let mut jobs = Vec::new();
    for (setting, _) in &settings {
        for &seed in &seeds {
            jobs.push(Job {
                setting: setting.clone(),
                seed,
                spec: &spec,
            });
        }
    }
    let (rows, artifacts) = run_jobs(&jobs, |job| {
        let kind = rules[settings
            .iter()
            .position(|(s, _)| *s == job.setting)
            .expect("known rule")];
        let (particles, degenerate, frames) = if kind == UpdateKind::Ancestral {
            let samples = ancestral_sample(
                &prior,
                &config.schedule,
                cmp.ancestral_steps,
                config.rule.particles,
                job.seed,
            )?;
            (samples, 0, Vec::new())
        } else {
            let (e, frames) = drive_ensemble(config, &prior, job.spec, kind, job.seed)?;
            (e.positions().to_vec(), e.degenerate_steps(), frames)
        };
        let mut row = SeedMetrics::new(&job.setting, job.seed);
        mode_metrics(&mut row, &particles, &prior)?;
        row.energy_distance = Some(metrics::energy_distance(&particles, &reference)?);
        row.degenerate_steps = degenerate;
        Ok((
            row,
            Some(SeedArtifacts {
                setting: job.setting.clone(),
                seed: job.seed,
                particles,
                frames,
                diagnostics: Vec::new(),
            }),
        ))
    });
    let coverage = Some(config.rule.particles.min(prior.num_components()));
    let mut aggs = aggregates(&settings, &rows, coverage);
    for agg in aggs.iter_mut() {
        let pooled: Vec<DVector<f64>> = artifacts
            .iter()
            .filter(|a| a.setting == agg.setting)
            .flat_map(|a| a.particles.iter().cloned())
            .collect();
        if !pooled.is_empty() {
            agg.pooled_energy_distance = Some(metrics::energy_distance(&pooled, &reference)?);
        }
    }
    Ok(RunOutput {
        record: record(config, rows, aggs),
        artifacts,
        markers: prior.means().to_vec(),
    })
}

fn bw_impl(config: &ExperimentConfig) -> Result<RunOutput> {
    let bw = config.bw.as_ref().expect("validated");
    let target = config.prior.build()?;
    let target_mean = target.mean();
    let setting = "bw_flow".to_string();
    let settings = vec![(setting.clone(), None)];
    let unused = KernelSpec::default();
    let jobs: Vec<Job> = config
        .seeds
        .to_vec()
        .into_iter()
        .map(|seed| Job {
            setting: setting.clone(),
            seed,
            spec: &unused,
        })
        .collect();
    let (rows, artifacts) = run_jobs(&jobs, |job| {
        let mut state = GaussianState::new(
            DVector::from_vec(bw.init_mean.clone()),
            DMatrix::from_diagonal(&DVector::from_vec(bw.init_variance.clone())),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
        let mut repairs = 0;
        let every = config
            .rule
            .snapshot_every
            .unwrap_or(config.rule.steps.div_ceil(200).max(1));
        let mut frames = vec![(0, vec![state.mean.clone()])];
        for step in 1..=config.rule.steps {
            let next = state.bw_flow_step(
                &target,
                config.rule.step_size,
                bw.mc_samples,
                rng.next_u64(),
            )?;
            repairs += next.repaired as usize;
            state = next.state;
            if step.is_multiple_of(every) || step == config.rule.steps {
                frames.push((step, vec![state.mean.clone()]));
            }
        }
        let mut row = SeedMetrics::new(&job.setting, job.seed);
        row.mean_error = Some((&state.mean - &target_mean).norm());
        row.covariance_trace = Some(state.covariance.trace());
        row.degenerate_steps = repairs;
        Ok((
            row,
            Some(SeedArtifacts {
                setting: job.setting.clone(),
                seed: job.seed,
                particles: vec![state.mean],
                frames,
                diagnostics: Vec::new(),
            }),
        ))
    });
    let aggs = aggregates(&settings, &rows, None);
    Ok(RunOutput {
        record: record(config, rows, aggs),
        artifacts,
        markers: vec![target_mean],
    })
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rsd::experiments::{
    self, ExperimentConfig, ExperimentKind, Measurement, Preset, RunOptions, Seeds,
};

/// Repulsive particle samplers on Gaussian-mixture diffusion priors.
#[derive(Parser)]
#[command(name = "rsd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collapse study on the two-mode toy mixture over several γ.
    ToyBimodal(RunArgs),
    /// Diversity / prior-likelihood trade-off over a γ grid.
    GammaSweep(RunArgs),
    /// Augmented solver on a linear inverse problem.
    Invert {
        #[command(flatten)]
        run: RunArgs,
        /// Built-in task used when no --config is given.
        #[arg(long, value_enum, default_value_t = InverseTask::Conjugate)]
        task: InverseTask,
    },
    /// Repulsive Wasserstein flow vs. SVGD vs. ancestral sampling.
    Compare(RunArgs),
    /// Gaussian (Bures–Wasserstein) restriction of the KL flow.
    BwFlow {
        #[command(flatten)]
        run: RunArgs,
        /// Built-in target used when no --config is given.
        #[arg(long, value_enum, default_value_t = BwTarget::Gaussian)]
        target: BwTarget,
    },
    /// Print the summary of a finished run directory.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum InverseTask {
    /// Gaussian prior, identity operator: closed-form posterior.
    Conjugate,
    /// Bimodal prior with one coordinate observed.
    Coverage,
}

#[derive(Clone, Copy, ValueEnum)]
enum BwTarget {
    Gaussian,
    Bimodal,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; defaults to the built-in preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed; with --seeds the run uses seed-base .. seed-base+seeds.
    #[arg(long)]
    seed_base: Option<u64>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<u64>,
    /// Single-threaded execution.
    #[arg(long)]
    deterministic: bool,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let (args, preset, kind) = match &cli.command {
        Command::ToyBimodal(a) => (a, Preset::ToyBimodal, ExperimentKind::ToyBimodal),
        Command::GammaSweep(a) => (a, Preset::GammaSweep, ExperimentKind::GammaSweep),
        Command::Invert { run, task } => (
            run,
            match task {
                InverseTask::Conjugate => Preset::InverseConjugate,
                InverseTask::Coverage => Preset::InverseCoverage,
            },
            ExperimentKind::InverseTask,
        ),
        Command::Compare(a) => (a, Preset::SamplerCompare, ExperimentKind::SamplerCompare),
        Command::BwFlow { run, target } => (
            run,
            match target {
                BwTarget::Gaussian => Preset::BwFlowGaussian,
                BwTarget::Bimodal => Preset::BwFlowBimodal,
            },
            ExperimentKind::BwFlow,
        ),
        Command::Report { dir } => {
            let record = experiments::load_record(dir)
                .with_context(|| format!("reading run in {}", dir.display()))?;
            print!("{}", record.report());
            return Ok(());
        }
    };
    let config = resolve_config(args, preset, kind)?;
    if args.print_config {
        print!("{}", config.to_toml_string()?);
        return Ok(());
    }
    let output = experiments::run(
        &config,
        RunOptions {
            deterministic: args.deterministic,
        },
    )?;
    let written = experiments::write_outputs(&output, &config, &config.output_dir)
        .with_context(|| format!("writing outputs to {}", config.output_dir.display()))?;
    print!("{}", output.record.report());
    println!(
        "wrote {} files to {}",
        written.len(),
        config.output_dir.display()
    );
    Ok(())
}

fn resolve_config(
    args: &RunArgs,
    preset: Preset,
    kind: ExperimentKind,
) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let mut c = ExperimentConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?;
            if c.experiment != kind {
                bail!(
                    "{} describes a {} experiment, not {}",
                    path.display(),
                    c.experiment.name(),
                    kind.name()
                );
            }
            anchor_paths(&mut c, path.parent().unwrap_or(Path::new(".")));
            c
        }
        None => ExperimentConfig::preset(preset),
    };
    if args.seed_base.is_some() || args.seeds.is_some() {
        let current = config.seeds.to_vec();
        let base = args
            .seed_base
            .unwrap_or_else(|| current.iter().copied().min().unwrap_or(0));
        let count = args.seeds.unwrap_or(current.len() as u64);
        config.seeds = Seeds::range(base, count);
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Makes a relative measurement CSV path relative to the config file.
fn anchor_paths(config: &mut ExperimentConfig, base: &Path) {
    if let Some(inv) = config.inverse.as_mut() {
        if let Measurement::Csv { csv } = &mut inv.y {
            if csv.is_relative() {
                *csv = base.join(&*csv);
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shiftrisk_cli::commands::{self, CliError, Context};
use shiftrisk_cli::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "shiftrisk", version, about = "Augmentation-shift risk experiments")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed, overriding the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel trials.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rejection-sample augmentations and report the acceptance rate.
    SampleAug,
    /// Check shifted = clean + gap on randomized configurations.
    CheckDecomposition,
    /// Check the two-sided bound on the log-ratio on random draws.
    BoundsCheck,
    /// Fit the decay rate of the gap estimator's variance.
    VarianceScan,
    /// Train one model and write its run directory.
    Train,
    /// Train across lambda values and seeds and tabulate test metrics.
    AblateLambda {
        /// Comma-separated lambda values, overriding `experiment.lambdas`
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Comma-separated seeds, overriding `experiment.seeds`
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Export the dataset and its splits.
    ExportData,
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml("")?,
    };
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    let ctx = Context::new(config, cli.out, cli.seed);
    let outcome = match cli.command {
        Command::SampleAug => commands::sample_aug(&ctx),
        Command::CheckDecomposition => commands::check_decomposition(&ctx),
        Command::BoundsCheck => commands::bounds_check(&ctx),
        Command::VarianceScan => commands::variance_scan_cmd(&ctx),
        Command::Train => commands::train_cmd(&ctx),
        Command::AblateLambda { lambdas, seeds } => {
            let e = &ctx.config.experiment;
            let lambdas = lambdas.unwrap_or_else(|| e.lambdas.clone());
            let seeds = seeds.unwrap_or_else(|| e.seeds.clone());
            commands::ablate_lambda(&ctx, &lambdas, &seeds)
        }
        Command::ExportData => commands::export_data(&ctx),
    }?;
    print!("{}", outcome.summary.render());
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

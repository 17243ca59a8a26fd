use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oi_assim::fsv::fmt_f64;
use oi_assim_cli::{
    cmd_assimilate, cmd_evaluate, cmd_generate, cmd_osse, cmd_sweep, CliError, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "oi-assim",
    version,
    about = "Localized optimal interpolation and synthetic assimilation experiments"
)]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides master_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides output_dir.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true, env = "OI_ASSIM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize nature and forecast runs, stations and pseudo-observations.
    Generate,
    /// Analyze a background series with an observation file.
    Assimilate {
        #[arg(long)]
        background: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        /// Truth for scoring and for an estimated background variance.
        #[arg(long)]
        nature: Option<PathBuf>,
    },
    /// Mean analysis RMSE over correlation lengths and station counts.
    Sweep,
    /// Per-cell RMSE between two field series.
    Evaluate { a: PathBuf, b: PathBuf },
    /// Full synthetic experiment: generate, assimilate, score.
    Osse,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(out) = cli.output {
        config.output_dir = out;
    }
    let out = config.output_dir.clone();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;

    pool.install(|| match cli.command {
        Command::Generate => cmd_generate(&config, &out).map(|_| ()),
        Command::Assimilate {
            background,
            obs,
            nature,
        } => cmd_assimilate(&config, &background, &obs, nature.as_deref(), &out).map(|_| ()),
        Command::Sweep => {
            let report = cmd_sweep(&config, &out)?;
            if let Some(s) = report.sweep {
                for (n, l) in s.n_values.iter().zip(&s.argmin_l) {
                    println!("N={n} argmin L={l}");
                }
            }
            Ok(())
        }
        Command::Evaluate { a, b } => {
            println!("{}", fmt_f64(cmd_evaluate(&a, &b, &out)?));
            Ok(())
        }
        Command::Osse => {
            let report = cmd_osse(&config, &out)?;
            if let (Some(f), Some(a), Some(r)) = (
                report.forecast_rmse_mean,
                report.analysis_rmse_mean,
                report.reduction,
            ) {
                println!(
                    "forecast {} analysis {} reduction {}",
                    fmt_f64(f),
                    fmt_f64(a),
                    fmt_f64(r)
                );
            }
            Ok(())
        }
        Command::ShowConfig => {
            config.validate()?;
            print!("{}", config.to_json());
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::FAILURE
        }
    }
}

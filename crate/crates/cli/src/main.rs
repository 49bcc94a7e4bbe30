use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use orim_cli::commands::{cmd_eval, cmd_gen, cmd_reproduce, cmd_train, resolve_out, CliError, Experiment, RunOptions};
use orim_cli::config::{ConfigError, ExperimentConfig};
use orim_core::Summation;

/// Learn and evaluate low-rank regularized inverse matrices.
#[derive(Parser)]
#[command(name = "orim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Ordered reductions everywhere; reruns are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (overrides `outputs.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write SVG charts.
    #[arg(long, global = true)]
    svg: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw training and validation splits.
    Gen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit the configured solver on the training split.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate the trained operator on the validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a complete experiment at reduced size.
    Reproduce {
        #[arg(value_enum)]
        experiment: Experiment,
        /// Size relative to the full setup, in (0, 1].
        #[arg(long, default_value_t = 0.4)]
        scale: f64,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("ORIM_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| ConfigError {
        field: "ORIM_THREADS".into(),
        message: format!("expected a positive integer, got `{raw}`"),
    })?;
    // fails only if a pool already exists, which cannot happen this early
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let summation = if cli.deterministic {
        Summation::Ordered
    } else {
        Summation::Parallel
    };
    let options = |cfg: Option<&ExperimentConfig>| -> Result<RunOptions, CliError> {
        Ok(RunOptions {
            out: resolve_out(cli.out.as_deref(), cfg)?,
            summation,
            svg: cli.svg || cfg.is_some_and(|c| c.outputs.svg),
            csv: cfg.is_some_and(|c| c.outputs.csv),
        })
    };
    let load = |path: &PathBuf| -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    };
    match &cli.command {
        Command::Gen { config } => {
            let cfg = load(config)?;
            print!("{}", cmd_gen(&cfg, &options(Some(&cfg))?)?);
        }
        Command::Train { config } => {
            let cfg = load(config)?;
            print!("{}", cmd_train(&cfg, &options(Some(&cfg))?)?);
        }
        Command::Eval { config } => {
            let cfg = load(config)?;
            print!("{}", cmd_eval(&cfg, &options(Some(&cfg))?)?);
        }
        Command::Reproduce { experiment, scale } => {
            let opts = options(None)?;
            for path in cmd_reproduce(*experiment, *scale, cli.seed.unwrap_or(0), &opts)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("orim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

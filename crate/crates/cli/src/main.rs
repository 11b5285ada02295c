use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use momentum_cli::{
    cmd_backtest, cmd_cpd, cmd_features, cmd_ingest, cmd_report, cmd_run, cmd_train, exit_code, RunConfig,
};
use momentum_transformer::{Error, Result};

#[derive(Parser)]
#[command(name = "momentum", version, about = "Momentum Transformer research pipeline")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `paths.out_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate prices and write the aligned panel.
    Ingest,
    /// Changepoint detection for every asset and date.
    Cpd,
    /// Build model input features.
    Features,
    /// Walk-forward training and out-of-sample positions per variant.
    Train,
    /// Daily strategy returns from the position files.
    Backtest,
    /// Performance table and cumulative returns.
    Report,
    /// All stages in order.
    Run,
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    match cli.command {
        Command::Ingest => {
            let s = cmd_ingest(&cfg)?;
            println!("{} assets, {} dates ({} to {})", s.assets, s.dates, s.first, s.last);
            for e in s.excluded {
                println!("excluded {e}");
            }
        }
        Command::Cpd => println!("wrote {}", cmd_cpd(&cfg)?.display()),
        Command::Features => {
            cmd_features(&cfg)?;
            println!("wrote features to {}", cfg.paths.out_dir.display());
        }
        Command::Train => {
            for p in cmd_train(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Backtest => println!("wrote {}", cmd_backtest(&cfg)?.display()),
        Command::Report => print!("{}", cmd_report(&cfg)?.to_markdown()),
        Command::Run => print!("{}", cmd_run(&cfg)?.to_markdown()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

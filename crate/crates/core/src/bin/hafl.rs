use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hafl::cli::{cmd_compare, cmd_run, format_rankings};
use hafl::{ExperimentConfig, HaflError, Scheme};

#[derive(Parser)]
#[command(
    name = "hafl",
    version,
    about = "Heterogeneous federated LoRA simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated seed list (overrides `seeds`).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated checkpoint rounds (overrides `checkpoints`).
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<usize>>,
    /// Worker threads for client training; 0 = all cores (overrides `threads`).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scheme for every seed.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run several schemes on identical data and seeds.
    Compare {
        config: PathBuf,
        /// e.g. ifalora,italora,ifzlora,homlora:16,homlora:2
        #[arg(long, value_delimiter = ',', required = true)]
        schemes: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Parse and validate a config, then print it in canonical form.
    Validate { config: PathBuf },
}

fn load(path: &PathBuf, o: Option<&Overrides>) -> Result<ExperimentConfig, HaflError> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(o) = o {
        if let Some(dir) = &o.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(seeds) = &o.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(cps) = &o.checkpoints {
            cfg.checkpoints = cps.clone();
        }
        if let Some(t) = o.threads {
            cfg.threads = t;
        }
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HaflError> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, Some(&overrides))?;
            let out = cmd_run(&cfg, &cfg.out_dir, cfg.threads)?;
            for cp in &out.summary.checkpoints {
                println!(
                    "{} round {}: global acc {:.4} ± {:.4}",
                    cfg.scheme, cp.round, cp.global_acc.mean, cp.global_acc.std
                );
            }
            println!("wrote {}", out.csv.display());
            println!("wrote {}", out.summary_path.display());
        }
        Command::Compare {
            config,
            schemes,
            overrides,
        } => {
            let cfg = load(&config, Some(&overrides))?;
            let schemes = schemes
                .iter()
                .map(|s| {
                    s.parse::<Scheme>()
                        .map_err(|e| HaflError::config("schemes", e))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let out = cmd_compare(&cfg, &schemes, &cfg.out_dir, cfg.threads)?;
            print!("{}", format_rankings(&out.rankings));
            println!("wrote {}", out.csv.display());
            println!("wrote {}", out.ranking_path.display());
        }
        Command::Validate { config } => {
            let cfg = load(&config, None)?;
            print!("{}", cfg.to_config_string());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hafl: {e}");
            ExitCode::FAILURE
        }
    }
}

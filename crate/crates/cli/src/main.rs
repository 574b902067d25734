use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bird_core::bird::Variant;
use bird_core::harness::{compare, evaluate_checkpoint, run_training, CompareRun, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bird", version, about = "Train and evaluate latent-imagination agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics, effective config and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from a checkpoint, appending to the metrics in --out.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the effective config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a checkpoint with the mean action.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
    },
    /// Train several configs under shared seeds and merge their metrics.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: bird_core::BirdError| e.to_string())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            variant,
            seed,
            episodes,
            out,
            resume,
            print_config,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = episodes {
                cfg.total_episodes = e;
            }
            cfg.validate()?;
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let trainer = run_training(cfg, &out, resume.as_deref())?;
            println!(
                "trained {} episodes ({} env steps); output in {}",
                trainer.episode(),
                trainer.env_steps(),
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let s = evaluate_checkpoint(&checkpoint, episodes, seed)?;
            println!("mean_return\t{}\nstd_return\t{}", s.mean, s.std);
        }
        Command::Compare { configs, seeds, out } => {
            let mut runs = Vec::new();
            for path in &configs {
                let config = load_config(path)?;
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
                runs.push(CompareRun {
                    label: stem.to_string(),
                    config,
                });
            }
            if seeds.is_empty() {
                bail!("--seeds needs at least one seed");
            }
            let dirs = compare(&runs, &seeds, &out)?;
            println!("{} runs; merged table in {}", dirs.len(), out.join("compare.tsv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

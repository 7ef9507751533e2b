use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qcnn_cli::commands::{self, EvalOptions};
use qcnn_cli::config::{default_data_root, RunConfig};
use qcnn_cli::CliError;
use qcnn_core::data::Split;
use qcnn_core::oracle::suites::Fault;

#[derive(Parser)]
#[command(name = "qcnn", version, about = "Quantum convolutional networks with orthogonal Qfilters")]
struct Cli {
    /// Threads used for evaluation (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw IDX files, downsample to 8x8 and cache.
    Prepare {
        #[arg(long, conflicts_with = "fmnist_dir", required_unless_present = "fmnist_dir")]
        mnist_dir: Option<PathBuf>,
        #[arg(long)]
        fmnist_dir: Option<PathBuf>,
        /// Where the caches go (default: $QCNN_DATA_DIR/<dataset> or data/<dataset>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration.
    Train {
        #[arg(long, required_unless_present = "dump_default_config")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print every config key with its default and exit.
        #[arg(long)]
        dump_default_config: bool,
    },
    /// Clean or noisy accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "off", value_parser = ["off", "on"])]
        noise: String,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        insertion: Option<String>,
        /// auto, exact or trajectory.
        #[arg(long, default_value = "auto")]
        method: String,
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate a seeded random subset of this size.
        #[arg(long)]
        subsample: Option<usize>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Noise report CSV to append to (default: eval_report.csv next to the checkpoint).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Learning-rate sweep, then extra seeds at the chosen rate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated learning rates.
        #[arg(long, default_value = "0.003,0.01,0.03,0.1,0.3,1.0")]
        grid: String,
        #[arg(long, default_value_t = 0)]
        extra_seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classical tensor-power baseline.
    Baseline {
        /// 1 or 2.
        #[arg(long)]
        order: String,
        #[arg(long)]
        dataset: Option<String>,
        /// Base config for the optimizer settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run a sweep over this grid instead of a single training run.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value_t = 0)]
        extra_seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the internal consistency suites.
    Verify {
        /// Deliberately break one check; the run must then fail.
        #[arg(long)]
        inject_fault: Option<Fault>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &PathBuf, out: Option<PathBuf>, workers: Option<usize>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(o) = out {
        cfg.out_dir = o.to_string_lossy().into_owned();
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare {
            mnist_dir,
            fmnist_dir,
            out,
        } => {
            let (name, source) = match (mnist_dir, fmnist_dir) {
                (Some(d), _) => ("mnist", d),
                (None, Some(d)) => ("fmnist", d),
                (None, None) => unreachable!("clap requires one"),
            };
            let out = out.unwrap_or_else(|| default_data_root().join(name));
            commands::prepare(&source, &out)?;
        }
        Command::Train {
            config,
            out,
            dump_default_config,
        } => {
            if dump_default_config {
                print!("{}", RunConfig::default().to_toml());
                return Ok(());
            }
            let cfg = load_config(&config.expect("required by clap"), out, cli.workers)?;
            commands::train(&cfg)?;
        }
        Command::Eval {
            checkpoint,
            split,
            noise,
            p,
            gamma,
            insertion,
            method,
            trajectories,
            seed,
            subsample,
            data_dir,
            report,
        } => {
            let opts = EvalOptions {
                split: Some(split),
                noisy: noise == "on",
                p,
                gamma,
                insertion,
                method: Some(method),
                trajectories,
                seed,
                subsample,
                data_dir,
                report,
                workers: cli.workers,
            };
            commands::eval(&checkpoint, &opts)?;
        }
        Command::Sweep {
            config,
            grid,
            extra_seeds,
            out,
        } => {
            let cfg = load_config(&config, out, cli.workers)?;
            let grid = commands::parse_grid(&grid)?;
            commands::sweep(&cfg, &grid, extra_seeds)?;
        }
        Command::Baseline {
            order,
            dataset,
            config,
            grid,
            extra_seeds,
            out,
        } => {
            let base = match config {
                Some(path) => load_config(&path, out, cli.workers)?,
                None => {
                    let mut cfg = RunConfig::default();
                    if let Some(o) = out {
                        cfg.out_dir = o.to_string_lossy().into_owned();
                    }
                    if let Some(w) = cli.workers {
                        cfg.workers = w;
                    }
                    cfg
                }
            };
            let cfg = commands::baseline_config(&base, &order, dataset.as_deref())?;
            println!(
                "baseline order {order} on {}: feature dimension {}",
                cfg.dataset,
                cfg.qcnn()?.feature_dim()
            );
            match grid {
                Some(g) => {
                    let grid = commands::parse_grid(&g)?;
                    commands::sweep(&cfg, &grid, extra_seeds)?;
                }
                None => {
                    commands::train(&cfg)?;
                }
            }
        }
        Command::Verify { inject_fault, seed } => {
            commands::verify(inject_fault, seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}

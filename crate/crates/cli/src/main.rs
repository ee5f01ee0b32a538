use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xdomainmix::metrics::RemovalStrategy;
use xdomainmix_cli::config::{parse_fractions, parse_seeds, CliError, CliResult, ExperimentConfig};
use xdomainmix_cli::runner;

/// Default thread cap when --threads is absent.
const THREADS_ENV: &str = "XDM_THREADS";

#[derive(Parser)]
#[command(name = "xdm", about = "Cross-domain feature augmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, checkpoints, and a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured training method.
        #[arg(long)]
        method: Option<String>,
    },
    /// Run the (method x seed) cross product and summarize mean ± std.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// N, N,M,... or LO..HI (half-open).
        #[arg(long)]
        seeds: String,
        /// Comma-separated; defaults to all four methods.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the component ablation grid (baseline + 4 variants).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Feature-divergence study over shared original features.
    MmdStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        /// Shared kernel bandwidth; defaults to the median heuristic.
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Feature-removal curves from a trained checkpoint.
    RemovalStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// importance, random, grad_norm, or all.
        #[arg(long, default_value = "all")]
        strategy: String,
        #[arg(long, default_value = "0.0,0.1,0.25,0.5,0.75,1.0")]
        fractions: String,
        /// class or domain.
        #[arg(long, default_value = "class")]
        target: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export original and augmented validation features.
    DumpFeatures {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the 2-D projector on frozen features and export coordinates.
    #[command(name = "project-2d")]
    Project2d {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn thread_count(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
    .max(1)
}

fn execute(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            method,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = method {
                cfg.train.method = runner::parse_method(&m)?;
            }
            let outcome = runner::run(&cfg, seed, &out)?;
            println!(
                "run {} seed {}: test_acc {:.4} val_acc {:.4}",
                outcome.method, outcome.seed, outcome.test_acc, outcome.val_acc
            );
            Ok(true)
        }
        Command::Sweep {
            config,
            seeds,
            methods,
            out,
            threads,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds = parse_seeds(&seeds)?;
            let methods = match methods {
                Some(list) => list
                    .split(',')
                    .map(|m| runner::parse_method(m.trim()))
                    .collect::<CliResult<Vec<_>>>()?,
                None => runner::METHODS.to_vec(),
            };
            let (path, all_ok) = runner::sweep(&cfg, &seeds, &methods, &out, thread_count(threads))?;
            println!("sweep summary: {}", path.display());
            Ok(all_ok)
        }
        Command::Ablate {
            config,
            seeds,
            out,
            threads,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds = parse_seeds(&seeds)?;
            let (path, all_ok) = runner::ablate(&cfg, &seeds, &out, thread_count(threads))?;
            println!("ablation table: {}", path.display());
            Ok(all_ok)
        }
        Command::MmdStudy {
            config,
            seeds,
            out,
            bandwidth,
            threads,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds = parse_seeds(&seeds)?;
            let path = runner::mmd_study(&cfg, &seeds, &out, bandwidth, thread_count(threads))?;
            println!("divergence table: {}", path.display());
            Ok(true)
        }
        Command::RemovalStudy {
            config,
            checkpoint,
            strategy,
            fractions,
            target,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let strategies = if strategy == "all" {
                vec![
                    RemovalStrategy::Importance,
                    RemovalStrategy::Random,
                    RemovalStrategy::GradNorm,
                ]
            } else {
                vec![runner::parse_strategy(&strategy)?]
            };
            let fractions = parse_fractions(&fractions)?;
            let target = runner::parse_target(&target)?;
            let paths = runner::removal_study_cli(
                &cfg, &checkpoint, &strategies, &fractions, target, seed, &out,
            )?;
            for p in paths {
                println!("removal curve: {}", p.display());
            }
            Ok(true)
        }
        Command::DumpFeatures {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let path = runner::dump_features(&cfg, &checkpoint, seed, &out)?;
            println!("features: {}", path.display());
            Ok(true)
        }
        Command::Project2d {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let path = runner::project_2d_cli(&cfg, &checkpoint, seed, &out)?;
            println!("projection: {}", path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more child runs failed");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {}", msg);
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(1)
        }
    }
}

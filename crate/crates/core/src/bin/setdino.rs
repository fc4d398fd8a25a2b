use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use setdino::error::{Error, Result};
use setdino::pipeline::{self, env_overrides, ExperimentConfig, FeatureSource, RunOptions};
use setdino::store::Normalization;

#[derive(Parser)]
#[command(name = "setdino", version, about = "Set-level self-distillation on a synthetic pooled screen")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML config; missing keys take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Applied after
    /// SETDINO__SECTION__KEY environment variables.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed of the world, dataset and training (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread; outputs are byte-identical across reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Rerun stages that are already up to date.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic screen: world, cell manifest and truth pair lists.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder; resumes from a checkpoint in --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many steps in total.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Write single-cell, guide, batch-gene and consensus tables.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        normalization: Option<String>,
        /// Use engineered features instead of a checkpoint.
        #[arg(long)]
        engineered: bool,
    },
    /// Metrics report, PR curves, adjacency matrices and PCA sweep.
    Evaluate {
        #[arg(long)]
        tables: PathBuf,
        /// Two-column CSV of related gene pairs.
        #[arg(long)]
        truth: PathBuf,
        /// Curated subset of the truth; defaults to --truth.
        #[arg(long)]
        curated: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every arm of the configured sampling grid.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Existing dataset; generated under --out when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Markdown summary of evaluation and ablation directories.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn load(global: &Global) -> Result<ExperimentConfig> {
    let mut overrides = env_overrides(std::env::vars());
    for o in &global.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(o.clone(), "expected KEY=VALUE"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = global.seed {
        overrides.push(("seed".into(), seed.to_string()));
        overrides.push(("train.seed".into(), seed.to_string()));
    }
    pipeline::load_config(global.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    let threads = if cli.global.deterministic { Some(1) } else { cli.global.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("threads", e.to_string()))?;
    }
    let mut cfg = load(&cli.global)?;
    let mut opts = RunOptions {
        force: cli.global.force,
        deterministic: cli.global.deterministic,
        stop_after: None,
    };
    match cli.command {
        Command::Synth { out } => {
            let path = pipeline::synth(&cfg, &out, &opts)?;
            println!("{}", path.display());
        }
        Command::Train { data, out, stop_after } => {
            opts.stop_after = stop_after;
            let path = pipeline::train(&cfg, &data, &out, &opts)?;
            println!("{}", path.display());
        }
        Command::Embed {
            data,
            out,
            checkpoint,
            normalization,
            engineered,
        } => {
            if let Some(n) = normalization {
                cfg.preprocess.normalization = n.parse::<Normalization>()?;
            }
            if engineered {
                cfg.embed.features = FeatureSource::Engineered;
            }
            for p in pipeline::embed(&cfg, checkpoint.as_deref(), &data, &out, &opts)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate {
            tables,
            truth,
            curated,
            out,
        } => {
            let path = pipeline::evaluate_tables(&cfg, &tables, &truth, curated.as_deref(), &out, &opts)?;
            println!("{}", path.display());
        }
        Command::Ablate { out, data } => {
            let path = pipeline::ablate(&cfg, &out, data.as_deref(), &opts)?;
            println!("{}", path.display());
        }
        Command::Report { out, inputs } => {
            let path = pipeline::report(&inputs, &out)?;
            println!("{}", path.display());
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
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use layercache_service::config::PipelineConfig;
use layercache_service::error::{ServiceError, ServiceResult};
use layercache_service::pipeline::{self, ToySizes};

#[derive(Parser)]
#[command(name = "layercache", version, about = "Build and serve cache-enabled models")]
struct Cli {
    /// Pipeline config file; missing keys take their defaults.
    #[arg(long, short, global = true, default_value = "layercache.toml")]
    config: PathBuf,
    #[arg(long, global = true)]
    backbone: Option<PathBuf>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    test_data: Option<PathBuf>,
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,
    /// Accepted accuracy drop as a fraction, e.g. 0.02.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
    #[arg(long, global = true)]
    skip_last_k: Option<usize>,
    /// Seed for splits and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    port: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List cacheable layers of the backbone.
    Candidates,
    /// Tap the candidate layers over the inference data and split it.
    Collect,
    /// Train and compare cache architectures per layer.
    Search,
    /// Train the selected architectures.
    TrainCaches {
        /// Continue from existing weights instead of reinitializing.
        #[arg(long)]
        warm_start: bool,
    },
    /// Fit temperatures and assign thresholds.
    Calibrate,
    /// Choose the subset of caches to enable.
    Optimize,
    /// Report accuracy, hit rates, FLOPs and latency on labeled data.
    Evaluate,
    /// Serve the cache-enabled model over TCP.
    Serve,
    /// Show build state and retraining triggers.
    Report,
    /// Write a toy backbone, datasets and config into a directory.
    Toy {
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        toy_seed: u64,
    },
}

fn load_config(cli: &Cli) -> ServiceResult<PipelineConfig> {
    let mut cfg = if cli.config.exists() {
        PipelineConfig::load(&cli.config)?
    } else if cli.config == Path::new("layercache.toml") {
        PipelineConfig::default()
    } else {
        return Err(ServiceError::Config(format!("{} not found", cli.config.display())));
    };
    if let Some(p) = &cli.backbone {
        cfg.paths.backbone = p.clone();
    }
    if let Some(p) = &cli.data {
        cfg.paths.data = p.clone();
    }
    if let Some(p) = &cli.test_data {
        cfg.paths.test_data = Some(p.clone());
    }
    if let Some(p) = &cli.artifacts {
        cfg.paths.artifacts = p.clone();
    }
    if let Some(t) = cli.tolerance {
        cfg.tolerance = t;
    }
    if let Some(k) = cli.skip_last_k {
        cfg.skip_last_k = k;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.split.seed = s;
    }
    if let Some(p) = cli.port {
        cfg.serve.port = p;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> ServiceResult<String> {
    if let Command::Toy { dir, toy_seed } = &cli.command {
        let (path, text) = pipeline::toy(dir, ToySizes::default(), *toy_seed)?;
        return Ok(format!("{text}config written to {}\n", path.display()));
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Candidates => pipeline::candidates(&cfg),
        Command::Collect => pipeline::collect(&cfg),
        Command::Search => pipeline::search(&cfg),
        Command::TrainCaches { warm_start } => pipeline::train_caches(&cfg, *warm_start),
        Command::Calibrate => pipeline::calibrate(&cfg),
        Command::Optimize => pipeline::optimize(&cfg),
        Command::Evaluate => pipeline::evaluate(&cfg),
        Command::Serve => pipeline::serve(&cfg),
        Command::Report => pipeline::report(&cfg),
        Command::Toy { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

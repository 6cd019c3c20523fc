//! `attriqa`: dataset generation, training, extraction, evaluation and
//! saliency for attribute-based image quality assessment.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use attriqa::{Error, ErrorClass};
use clap::{Parser, Subcommand};

use commands::Context;
use config::{Paths, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "attriqa", version, about)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); overrides the configuration.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory of this command; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "ATTRIQA_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Render a multi-distortion dataset and its manifest.
    Generate,
    /// Build an attribute registry with text anchors.
    BuildRegistry,
    /// Train the distortion model.
    TrainDist,
    /// Write attribute probabilities of every manifest record.
    Extract,
    /// Train the quality regressor on attribute probabilities.
    TrainReg,
    /// Distortion and/or score metrics on a split.
    Eval,
    /// Gradient saliency maps and overlays.
    Saliency,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::BuildRegistry => "build-registry",
            Command::TrainDist => "train-dist",
            Command::Extract => "extract",
            Command::TrainReg => "train-reg",
            Command::Eval => "eval",
            Command::Saliency => "saliency",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Io => 1,
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn context(cli: &Cli) -> attriqa::Result<Context> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    if let Some(out) = &cli.out {
        let slot = match cli.command {
            Command::Generate => &mut config.generate.out,
            Command::BuildRegistry => &mut config.registry.out,
            Command::TrainDist => &mut config.train_dist.out,
            Command::Extract => &mut config.extract.out,
            Command::TrainReg => &mut config.train_reg.out,
            Command::Eval => &mut config.eval.out,
            Command::Saliency => &mut config.saliency.out,
        };
        *slot = out.clone();
    }
    let config_dir = cli
        .config
        .as_ref()
        .and_then(|p| p.parent())
        .map(PathBuf::from)
        .filter(|p| !p.as_os_str().is_empty());
    let root = cli
        .data_root
        .clone()
        .or_else(|| config.data_root.clone())
        .or(config_dir)
        .unwrap_or_else(|| PathBuf::from("."));
    config.data_root = None;
    if config.workers > 0 {
        // only fails if a pool already exists, which cannot happen here
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build_global()
            .ok();
    }
    Ok(Context {
        config,
        paths: Paths { root },
        creator: format!("attriqa {} {}", env!("CARGO_PKG_VERSION"), cli.command.name()),
    })
}

fn run(cli: &Cli) -> attriqa::Result<()> {
    let ctx = context(cli)?;
    match cli.command {
        Command::Generate => commands::generate_cmd(&ctx),
        Command::BuildRegistry => commands::build_registry_cmd(&ctx),
        Command::TrainDist => commands::train_dist_cmd(&ctx),
        Command::Extract => commands::extract_cmd(&ctx),
        Command::TrainReg => commands::train_reg_cmd(&ctx),
        Command::Eval => commands::eval_cmd(&ctx),
        Command::Saliency => commands::saliency_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

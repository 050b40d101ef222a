use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use drascore_cli::stages::{self, AblationPart};
use drascore_cli::RunConfig;

#[derive(Parser)]
#[command(name = "drascore", version, about = "Anatomy-aligned contrastive pre-training on synthetic phantoms")]
struct Cli {
    /// JSON run config; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Seed for training, fine-tuning and probing (phantom seeds live in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single worker thread, bit-reproducible outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides train.steps.
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Generate,
    Register,
    Grid,
    Pretrain,
    Probe,
    Finetune,
    Detect,
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "perturbation,conditioning,neighbors")]
        parts: Vec<AblationPart>,
    },
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(n) = cli.steps {
        cfg.train.steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = resolve(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Generate => stages::generate(&cfg, out).map(drop),
        Command::Register => stages::register(&cfg, out).map(drop),
        Command::Grid => stages::grid(&cfg, out).map(drop),
        Command::Pretrain => stages::pretrain(&cfg, out).map(drop),
        Command::Probe => stages::probe(&cfg, out).map(drop),
        Command::Finetune => stages::finetune(&cfg, out).map(drop),
        Command::Detect => stages::detect(&cfg, out).map(drop),
        Command::Ablate { parts } => stages::ablate(&cfg, out, parts).map(drop),
        Command::Gradcheck { seeds } => {
            let worst = stages::gradcheck(&cfg, out, *seeds)?;
            println!("worst relative error {worst:.3e}");
            anyhow::ensure!(worst < 1e-4, "gradient check failed: worst relative error {worst:.3e}");
            Ok(())
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    match e.downcast_ref::<drascore::Error>() {
        Some(drascore::Error::MissingArtifact(_)) => "missing_artifact",
        Some(drascore::Error::Config(_)) => "config",
        Some(drascore::Error::Format(_)) => "format",
        Some(drascore::Error::TrainingHealth(_)) => "training_health",
        Some(_) => "runtime",
        None if e.downcast_ref::<serde_json::Error>().is_some() => "config",
        None => "error",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DRASCORE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use cmas_core::pipeline::evaluate_files;
use cmas_core::{Pipeline, PipelineConfig};

/// Zero-shot named entity recognition with cooperating LLM agents.
#[derive(Debug, Parser)]
#[command(name = "cmas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the unlabeled corpus and the test folds.
    Ingest(Common),
    /// Self-annotate the unlabeled corpus.
    Annotate(Common),
    /// Mine type-related features from the annotations.
    MineTrf(Common),
    /// Retrieve, score and predict every test sentence.
    Predict(Common),
    /// Score predictions. With --gold and --pred, compares two files directly.
    Evaluate(EvaluateArgs),
    /// Classify prediction errors.
    AnalyzeErrors(Common),
    /// Run every stage in order.
    RunAll(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Default, Args)]
struct Overrides {
    /// Frequency ratio bound for feature mining.
    #[arg(long)]
    rho: Option<f64>,
    /// n-gram size for feature mining.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gold demonstrations per fold; 0 means zero-shot.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "gold")]
    config: Option<PathBuf>,
    /// Gold JSONL file.
    #[arg(long, requires = "pred")]
    gold: Option<PathBuf>,
    /// Prediction JSONL file.
    #[arg(long, requires = "gold")]
    pred: Option<PathBuf>,
    /// Leave failed predictions out of the scores.
    #[arg(long)]
    exclude_failed: bool,
    #[command(flatten)]
    overrides: Overrides,
}

impl Overrides {
    fn apply(&self, config: &mut PipelineConfig) {
        if let Some(v) = self.rho {
            config.rho = v;
        }
        if let Some(v) = self.m {
            config.m = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.shots {
            config.shots = v;
        }
        if let Some(v) = &self.output_dir {
            config.output_dir = v.clone();
        }
        if let Some(v) = &self.cache_dir {
            config.cache_dir = Some(v.clone());
        }
        if let Some(v) = self.concurrency {
            config.concurrency = v;
        }
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    overrides.apply(&mut config);
    config.validate().context("invalid configuration")?;
    Ok(config)
}

fn open(path: &Path, overrides: &Overrides) -> Result<Pipeline> {
    Pipeline::new(load(path, overrides)?).context("starting pipeline")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(c) => open(&c.config, &c.overrides)?.ingest()?,
        Command::Annotate(c) => open(&c.config, &c.overrides)?.annotate()?,
        Command::MineTrf(c) => open(&c.config, &c.overrides)?.mine_trf()?,
        Command::Predict(c) => open(&c.config, &c.overrides)?.predict()?,
        Command::Evaluate(args) => {
            if let (Some(gold), Some(pred)) = (&args.gold, &args.pred) {
                let report = evaluate_files(gold, pred, args.exclude_failed)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                let path = args.config.as_ref().context("--config is required")?;
                let mut config = load(path, &args.overrides)?;
                config.exclude_failed |= args.exclude_failed;
                print!("{}", Pipeline::new(config)?.evaluate()?.to_text());
            }
        }
        Command::AnalyzeErrors(c) => {
            let summary = open(&c.config, &c.overrides)?.analyze_errors()?;
            print!("{}", summary.report.to_text());
        }
        Command::RunAll(c) => {
            let report = open(&c.config, &c.overrides)?.run_all()?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::commands::{data, eval, gen, lora, serve};
use crate::error::CliError;

/// Synthetic spill data, detector evaluation and spill monitoring.
#[derive(Debug, Parser)]
#[command(name = "spillkit", version)]
pub struct Cli {
    /// JSON configuration file; every section is optional.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render background scenes through the diffusion backend.
    GenerateScenes(gen::ScenesArgs),
    /// Render feathered inpainting masks for every box of a COCO file.
    MakeMasks(gen::MasksArgs),
    /// Paint anomalies into scenes, from a batch file or a COCO file plus masks.
    Inpaint(gen::InpaintArgs),
    /// Host the annotation API, the inpainting worker and optionally the UI.
    AnnotateServe(serve::AnnotateArgs),
    /// Watch frame sources, detect anomalies and dispatch alerts.
    MonitorServe(serve::MonitorArgs),
    /// Run a detector over a dataset and write COCO results.
    Detect(eval::DetectArgs),
    /// Score a detector on a dataset at one IoU threshold.
    Evaluate(eval::EvalArgs),
    /// Hit-rate across a range of IoU thresholds.
    Sweep(eval::EvalArgs),
    /// Convert COCO annotations to YOLO label files.
    Convert(data::ConvertArgs),
    /// Cluster near-duplicate images by perceptual hash.
    Dedup(data::DedupArgs),
    /// Draw disjoint, seeded splits of a dataset's images.
    Split(data::SplitArgs),
    /// Fold a low-rank adapter into base weights.
    MergeLora(lora::MergeArgs),
    /// Render saved evaluation reports as a table.
    RenderReport(eval::RenderArgs),
}

async fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = commands::load_config(cli.config.as_deref())?;
    let out = commands::Output { json: cli.json };
    match cli.command {
        Command::GenerateScenes(a) => gen::scenes(cfg, a, out).await,
        Command::MakeMasks(a) => gen::masks(cfg, a, out),
        Command::Inpaint(a) => gen::inpaint(cfg, a, out).await,
        Command::AnnotateServe(a) => serve::annotate(cfg, a, out).await,
        Command::MonitorServe(a) => serve::monitor(cfg, a, out).await,
        Command::Detect(a) => eval::detect(cfg, a, out).await,
        Command::Evaluate(a) => eval::evaluate(cfg, a, out).await,
        Command::Sweep(a) => eval::sweep(cfg, a, out).await,
        Command::Convert(a) => data::convert(a, out),
        Command::Dedup(a) => data::dedup(a, out),
        Command::Split(a) => data::split(cfg, a, out),
        Command::MergeLora(a) => lora::merge(a, out),
        Command::RenderReport(a) => eval::render(a, out),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let json = cli.json;
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                println!("{}", json!({ "error": e.to_json() }));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

use std::path::PathBuf;

use clap::Args;
use spillkit_core::lora::{load_adapters, merge_store, read_store, write_store, MergeSummary, Pathway, PathwayFilter};

use super::{read_bytes, read_json, write_file, Output};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Base weights container.
    #[arg(long)]
    base: PathBuf,
    /// Adapter container holding both low-rank factors for each target module.
    #[arg(long)]
    adapter: PathBuf,
    /// Which pathway receives the update: L, V or V+L.
    #[arg(long, default_value = "V+L")]
    variant: String,
    /// Scale override; otherwise the adapter metadata, then 1/r.
    #[arg(long)]
    alpha: Option<f64>,
    /// JSON file with `vision_prefixes` and `language_prefixes`.
    #[arg(long)]
    filter: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn merge(args: MergeArgs, out: Output) -> Result<(), CliError> {
    let pathway: Pathway = args.variant.parse().map_err(|e: spillkit_core::lora::LoraError| CliError::Usage(e.to_string()))?;
    let filter: PathwayFilter = match &args.filter {
        Some(p) => read_json(p)?,
        None => PathwayFilter::default(),
    };
    let base = read_store(&read_bytes(&args.base)?).map_err(|e| CliError::failed(args.base.display().to_string(), e))?;
    let adapter_store =
        read_store(&read_bytes(&args.adapter)?).map_err(|e| CliError::failed(args.adapter.display().to_string(), e))?;
    let adapters = load_adapters(&adapter_store, args.alpha).map_err(|e| CliError::failed("adapter", e))?;
    let (merged, summary): (_, MergeSummary) =
        merge_store(&base, &adapters, pathway, &filter).map_err(|e| CliError::failed("merge", e))?;
    write_file(&args.out, &write_store(&merged))?;
    out.emit(&summary, || {
        format!(
            "merged {} tensors ({} outside the {pathway} pathway) into {}",
            summary.merged.len(),
            summary.filtered_out.len(),
            args.out.display()
        )
    })
}

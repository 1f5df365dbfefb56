use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;
use spillkit_core::config::Config;
use spillkit_core::dataset::{coco_dataset_to_yolo, dedup_files, make_splits, DedupReport, SourceTag, SplitProfile};

use super::{read_coco, write_file, write_json, Output};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// COCO dataset to convert.
    #[arg(long)]
    coco: PathBuf,
    /// Directory for the YOLO label files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Converted {
    files: Vec<String>,
}

pub fn convert(args: ConvertArgs, out: Output) -> Result<(), CliError> {
    let ds = read_coco(&args.coco)?;
    let labels = coco_dataset_to_yolo(&ds).map_err(|e| CliError::failed("conversion", e))?;
    let mut files = Vec::new();
    for (name, text) in &labels {
        let path = args.out.join(name);
        write_file(&path, text.as_bytes())?;
        files.push(path.to_string_lossy().into_owned());
    }
    let done = Converted { files };
    out.emit(&done, || format!("{} label files written to {}", done.files.len(), args.out.display()))
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    /// Directory of images to compare.
    #[arg(long)]
    dir: PathBuf,
    /// Largest hash distance, in bits, still counted as a duplicate.
    #[arg(long, default_value_t = 5)]
    max_hamming: u32,
}

pub fn dedup(args: DedupArgs, out: Output) -> Result<(), CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.dir)
        .map_err(|e| CliError::failed(args.dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let report: DedupReport = dedup_files(&paths, args.max_hamming);
    out.emit(&report, || {
        let mut s = format!("{} duplicate clusters\n", report.clusters.len());
        for c in &report.clusters {
            s.push_str(&format!("{}: {}\n", c.representative, c.members.join(", ")));
        }
        for w in &report.warnings {
            s.push_str(&format!("warning: {w:?}\n"));
        }
        s
    })
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Profile {
    Public,
    Proprietary,
    Synthetic,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// COCO dataset whose image ids are split.
    #[arg(long)]
    coco: PathBuf,
    /// Preset split sizes.
    #[arg(long, value_enum, default_value = "public")]
    profile: Profile,
    /// Custom sizes as name=count; replaces the preset sizes.
    #[arg(long = "count", value_parser = parse_count)]
    counts: Vec<(String, usize)>,
    /// Seed; defaults to the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the manifest here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_count(s: &str) -> Result<(String, usize), String> {
    let (name, n) = s.split_once('=').ok_or_else(|| format!("expected name=count, got '{s}'"))?;
    let n = n.parse().map_err(|e| format!("count in '{s}': {e}"))?;
    Ok((name.to_string(), n))
}

pub fn split(cfg: Config, args: SplitArgs, out: Output) -> Result<(), CliError> {
    let ds = read_coco(&args.coco)?;
    let mut profile = match args.profile {
        Profile::Public => SplitProfile::public_default(),
        Profile::Proprietary => SplitProfile::proprietary_default(),
        Profile::Synthetic => SplitProfile::synthetic_default(),
    };
    if !args.counts.is_empty() {
        profile.counts = args.counts.clone();
    }
    let ids: Vec<u64> = ds.images.iter().map(|i| i.id).collect();
    let manifest = make_splits(&ids, &profile, args.seed.unwrap_or(cfg.seed)).map_err(|e| CliError::failed("split", e))?;
    if let Some(p) = &args.out {
        write_json(p, &manifest)?;
    }
    out.emit(&manifest, || {
        let source = match manifest.source {
            SourceTag::Public => "public",
            SourceTag::Proprietary => "proprietary",
            SourceTag::Synthetic => "synthetic",
        };
        let mut s = format!("{source} splits, seed {}\n", manifest.seed);
        for (name, ids) in &manifest.splits {
            s.push_str(&format!("  {name}: {} images\n", ids.len()));
        }
        s
    })
}

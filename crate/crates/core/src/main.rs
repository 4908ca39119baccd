// SPDX-License-Identifier: Apache-2.0

//! `hdseg`: project scans, train, evaluate and inspect block topologies.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hdseg_core::pipeline::{evaluate, load_frames, load_model, train, DataConfig, RunConfig};
use hdseg_core::pointcloud::load_kitti_scan;
use hdseg_core::projection::{project, write_range_image};
use hdseg_core::topology::{topology_report, Rule};
use hdseg_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "hdseg",
    version,
    about = "Range-image LiDAR semantic segmentation",
    after_help = "Any config field can be overridden with --dotted.key=value, e.g. --optimizer.lr=0.02"
)]
struct Cli {
    /// JSON run configuration. Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(flatten)]
    knn: KnnFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct KnnFlags {
    #[arg(long, global = true)]
    knn_window: Option<usize>,
    #[arg(long, global = true)]
    knn_k: Option<usize>,
    #[arg(long, global = true)]
    knn_sigma: Option<f64>,
    #[arg(long, global = true)]
    knn_cutoff: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes range-image files with index maps and prints occupancy.
    Project {
        /// KITTI `.bin` scans. Without any, the configured training frames
        /// are projected.
        scans: Vec<PathBuf>,
        #[arg(long, default_value = "ranges")]
        out: PathBuf,
    },
    /// Trains from scratch; writes metrics.jsonl and best.ckpt to the output
    /// directory.
    Train,
    /// Scores a checkpoint on the validation frames, with and without
    /// neighbour refinement.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score the training frames instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Prints predecessor sets and connection totals for a block depth.
    Topology {
        #[arg(long)]
        layers: usize,
        #[arg(long, default_value = "lite-hd")]
        rule: Rule,
        /// Emit JSON only.
        #[arg(long)]
        json: bool,
    },
    /// Prints the effective configuration.
    Config,
}

/// Splits `--dotted.key=value` arguments from the ones clap handles.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some((k, v)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            if k.contains('.') {
                overrides.push((k.to_string(), v.to_string()));
                continue;
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn load_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.output {
        cfg.output = Some(o.clone());
    }
    let k = &cli.knn;
    cfg.knn.window = k.knn_window.unwrap_or(cfg.knn.window);
    cfg.knn.k = k.knn_k.unwrap_or(cfg.knn.k);
    cfg.knn.sigma = k.knn_sigma.unwrap_or(cfg.knn.sigma);
    cfg.knn.cutoff = k.knn_cutoff.unwrap_or(cfg.knn.cutoff);
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn cmd_project(cfg: &RunConfig, scans: &[PathBuf], out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let write = |name: &str, cloud: &hdseg_core::pointcloud::PointCloud, extra: serde_json::Value| -> Result<()> {
        let img = project(cloud, &cfg.projection)?;
        let path = out.join(format!("{name}.rimg"));
        write_range_image(&path, &img)?;
        let mut line = json!({
            "input": name,
            "output": path,
            "points": cloud.len(),
            "height": img.height(),
            "width": img.width(),
            "occupancy": img.occupancy(),
        });
        if let (Some(o), Some(e)) = (line.as_object_mut(), extra.as_object()) {
            o.extend(e.clone());
        }
        println!("{line}");
        Ok(())
    };
    if scans.is_empty() {
        let data = load_frames(&cfg.data)?;
        let rays = match &cfg.data {
            DataConfig::Synthetic { scene, .. } => Some(scene.rows * scene.cols),
            DataConfig::Kitti { .. } => None,
        };
        for f in &data.train {
            let extra = rays.map_or(json!({}), |r| json!({ "hit_fraction": f.cloud.len() as f64 / r as f64 }));
            write(&f.name, &f.cloud, extra)?;
        }
    } else {
        for p in scans {
            let scan = load_kitti_scan(p)?;
            let name = p.file_stem().map_or("scan".into(), |s| s.to_string_lossy().into_owned());
            write(&name, &scan.cloud, json!({ "dropped": scan.dropped.len() }))?;
        }
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    let out = cfg.output.get_or_insert_with(|| PathBuf::from("hdseg-run")).clone();
    let data = load_frames(&cfg.data)?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?).map_err(|e| io_err(&cfg_path, e))?;
    let outcome = train(&cfg, &data, |e| println!("{}", serde_json::to_string(e).unwrap_or_default()))?;
    println!(
        "{}",
        json!({ "best_epoch": outcome.best_epoch, "checkpoint": out.join("best.ckpt") })
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, train_split: bool) -> Result<()> {
    let model = load_model(checkpoint)?;
    if model.class_count() != cfg.model.class_count {
        return Err(Error::ClassCount {
            model: model.class_count(),
            data: cfg.model.class_count,
        });
    }
    let data = load_frames(&cfg.data)?;
    let frames = if train_split { &data.train } else { &data.val };
    let report = evaluate(&model, frames, &cfg.projection, &cfg.knn, data.ignore, &data.class_names)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::EmptyScan(_) | Error::Framing { .. } | Error::LabelMismatch { .. } => "input",
        Error::ClassMap { .. } => "class_map",
        Error::Config(_) | Error::ClassCount { .. } => "config",
        Error::EmptyDataset(_) => "empty_dataset",
        Error::Checkpoint(_) => "checkpoint",
        Error::Diverged { .. } => "diverged",
        Error::Json(_) => "json",
        _ => "runtime",
    }
}

fn run(cli: &Cli, overrides: &[(String, String)]) -> Result<()> {
    if let Command::Topology { layers, rule, json } = &cli.command {
        if *layers == 0 {
            return Err(Error::Config("--layers must be >= 1".into()));
        }
        let report = topology_report(*layers, *rule);
        if !json {
            print!("{}", report.to_table());
        }
        println!("{}", serde_json::to_string(&report)?);
        return Ok(());
    }
    let cfg = load_config(cli, overrides)?;
    match &cli.command {
        Command::Project { scans, out } => cmd_project(&cfg, scans, out),
        Command::Train => cmd_train(&cfg),
        Command::Eval {
            checkpoint,
            train_split,
        } => cmd_eval(&cfg, checkpoint, *train_split),
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
        Command::Topology { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(&cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": error_kind(&e), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

//! Command-line surface: dataset generation, training, evaluation,
//! inference, and embedding import.
//!
//! Exit codes: 0 success, 1 usage/configuration problem, 2 data problem,
//! 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use affpose::data::synth::generate_synthetic;
use affpose::data::{
    atomic_write, load_cloud, load_dataset, save_dataset_with_sidecar, split_dataset, ObjectRecord,
};
use affpose::embeddings::import_vectors;
use affpose::geometry::Pose;
use affpose::train::{
    evaluate, infer, load_checkpoint, save_checkpoint, train, EvalOptions, ExperimentConfig,
};
use affpose::{Error, Result};

#[derive(Parser)]
#[command(
    name = "affpose",
    version,
    about = "Open-vocabulary affordance detection and language-conditioned 6-DoF pose generation on point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset described by the config.
    GenData {
        /// Experiment config file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output manifest path (.json), or a directory for dataset.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch on the config's dataset; checkpoints every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file, rewritten after each epoch.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one dataset split and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Guidance-weight override (changes only the pose report).
        #[arg(long)]
        w: Option<f64>,
        /// Override for generated poses per (object, affordance) pair.
        #[arg(long)]
        poses: Option<usize>,
        /// Report output path (JSON).
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict an affordance map and sample poses for one cloud file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Standalone cloud file (JSON, metric frame).
        #[arg(long)]
        cloud: PathBuf,
        /// Comma-separated query labels; the background label is added
        /// automatically.
        #[arg(long)]
        labels: String,
        /// Poses to generate per label.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Guidance-weight override.
        #[arg(long)]
        w: Option<f64>,
        /// Optional JSON output path; a summary always prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a JSON file of label vectors into an embedding table.
    EmbedImport {
        /// Input JSON: {"label": [..]} or {"vectors": {"label": [..]}}.
        #[arg(long = "in")]
        input: PathBuf,
        /// Embedding table output path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, out } => run_train(&config, &out),
        Command::Eval {
            ckpt,
            split,
            w,
            poses,
            report,
        } => run_eval(&ckpt, &split, w, poses, &report),
        Command::Infer {
            ckpt,
            cloud,
            labels,
            count,
            w,
            out,
        } => run_infer(&ckpt, &cloud, &labels, count, w, out.as_deref()),
        Command::EmbedImport { input, out } => {
            let table = import_vectors(&input, &out)?;
            println!(
                "imported {} label vectors of dimension {} into {}",
                table.vectors.len(),
                table.dimension,
                out.display()
            );
            Ok(())
        }
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "json") {
        out.to_path_buf()
    } else {
        out.join("dataset.json")
    }
}

fn gen_data(config_path: &Path, out: &Path) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let records = generate_synthetic(&config.synth, config.seed)?;
    let path = manifest_path(out);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    save_dataset_with_sidecar(&records, &path)?;
    println!(
        "wrote {} objects ({} points each) to {}",
        records.len(),
        config.synth.points_per_cloud,
        path.display()
    );
    if path != Path::new(&config.dataset_path) {
        log::warn!(
            "config points at dataset_path `{}`; update it to `{}` before training",
            config.dataset_path,
            path.display()
        );
    }
    Ok(())
}

/// Loads the config's dataset and returns the records of one split part, in
/// the id order of the split.
fn split_records(config: &ExperimentConfig, part: &str) -> Result<Vec<ObjectRecord>> {
    let records = load_dataset(Path::new(&config.dataset_path))?;
    let split = split_dataset(&records, config.split_ratios, config.split_seed)?;
    let ids = split.part(part)?;
    let mut chosen = Vec::with_capacity(ids.len());
    for id in ids {
        let record = records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| Error::Data(format!("split id `{id}` missing from the dataset")))?;
        chosen.push(record.clone());
    }
    Ok(chosen)
}

fn run_train(config_path: &Path, out: &Path) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let train_records = split_records(&config, "train")?;
    println!(
        "training on {} objects for {} epochs (batch {})",
        train_records.len(),
        config.epochs,
        config.batch_size
    );
    let checkpoint = train(&config, &train_records, |ckpt| {
        let last = ckpt.loss_history.last().expect("at least one epoch");
        println!(
            "epoch {}/{}: detection loss {:.4}, pose loss {:.4}",
            ckpt.epoch, ckpt.config.epochs, last.affordance, last.pose
        );
        save_checkpoint(ckpt, out)
    })?;
    println!(
        "trained {} epochs over {} labels; checkpoint at {}",
        checkpoint.epoch,
        checkpoint.labels.len(),
        out.display()
    );
    Ok(())
}

fn run_eval(
    ckpt_path: &Path,
    split: &str,
    w: Option<f64>,
    poses: Option<usize>,
    report_path: &Path,
) -> Result<()> {
    let checkpoint = load_checkpoint(ckpt_path)?;
    let records = split_records(&checkpoint.config, split)?;
    let mut options = EvalOptions::new(split);
    options.guidance = w;
    options.poses_per_pair = poses;
    let reports = evaluate(&checkpoint, &records, &options)?;
    let json = serde_json::to_vec_pretty(&reports).map_err(|e| Error::Json {
        what: "evaluation report".into(),
        source: e,
    })?;
    atomic_write(report_path, &json)?;
    println!(
        "split {} ({} objects): Acc {:.4}, mIoU {:.4}, mAcc {:.4}",
        reports.split,
        records.len(),
        reports.detection.accuracy,
        reports.detection.mean_iou,
        reports.detection.mean_class_accuracy
    );
    println!(
        "{} {:.4}, {} {:.4} over {} pairs (w = {})",
        reports.poses.coverage_metric,
        reports.poses.mean_coverage,
        reports.poses.similarity_metric,
        reports.poses.mean_similarity,
        reports.poses.pairs.len(),
        reports.guidance
    );
    println!("report written to {}", report_path.display());
    Ok(())
}

#[derive(Serialize)]
struct InferOutput<'a> {
    labels: &'a [String],
    /// Per-point indices into `labels`.
    assignments: &'a [usize],
    /// Generated poses per non-background label, metric frame.
    poses: &'a BTreeMap<String, Vec<Pose>>,
}

fn run_infer(
    ckpt_path: &Path,
    cloud_path: &Path,
    labels: &str,
    count: usize,
    w: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let checkpoint = load_checkpoint(ckpt_path)?;
    let cloud = load_cloud(cloud_path)?;
    let labels: Vec<String> = labels
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let guidance = w.unwrap_or(checkpoint.config.guidance);
    let result = infer(&checkpoint, &cloud, &labels, count, guidance, None)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &a in &result.map.assignments {
        *counts.entry(result.labels[a].as_str()).or_default() += 1;
    }
    println!(
        "labeled {} points over {:?} (w = {guidance}):",
        result.map.assignments.len(),
        result.labels
    );
    for (label, n) in &counts {
        println!("  {label}: {n} points");
    }
    for (label, poses) in &result.poses {
        println!("  {label}: {} poses generated", poses.len());
    }
    if let Some(path) = out {
        let json = serde_json::to_vec_pretty(&InferOutput {
            labels: &result.labels,
            assignments: &result.map.assignments,
            poses: &result.poses,
        })
        .map_err(|e| Error::Json {
            what: "inference output".into(),
            source: e,
        })?;
        atomic_write(path, &json)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

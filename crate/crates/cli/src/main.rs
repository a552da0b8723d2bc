use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Train a shared image representation once and reuse it across task heads.
#[derive(Parser, Debug)]
#[command(name = "urep", version)]
struct Cli {
    /// Replace wall-clock columns with `-` so reports are reproducible.
    #[arg(long, global = true)]
    no_timing: bool,
    #[command(subcommand)]
    command: Command,
}

/// Run settings: a `key=value` config file, then `--set` pairs, then dedicated flags.
#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// Config file of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with images, masks and a manifest.
    GenData {
        /// Generator config (`mode`, `count`, `seed`, ...).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search a backbone and save the best checkpoint with its report.
    TrainBackbone {
        /// `unsupervised` (denoising autoencoder) or `supervised` (dilated CNN on class labels).
        #[arg(long)]
        mode: Option<String>,
        /// Dataset manifest or the directory holding `manifest.tsv`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Search space, `axis=v1,v2;axis=...`.
        #[arg(long)]
        space: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Attach one head to a backbone checkpoint and train it.
    TrainHead {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `seg`, `cls` or `quality`.
        #[arg(long)]
        task: String,
        /// Head name inside the checkpoint; defaults to the task name.
        #[arg(long)]
        task_id: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep the backbone weights fixed.
        #[arg(long)]
        freeze_backbone: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train several heads together on the shared backbone with a summed loss.
    TrainJoint {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated tasks, e.g. `seg,cls`.
        #[arg(long)]
        tasks: String,
        /// Comma-separated loss weights, one per task.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate every head of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Noise level for the denoising row.
        #[arg(long, default_value_t = 0.03)]
        sigma: f64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grad-CAM heatmap and overlay of one class for one image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "class")]
        class_index: usize,
        /// Classification head to explain; defaults to the first one.
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge class and quality predictions into a usability verdict.
    Recommend {
        #[arg(long)]
        cls_checkpoint: PathBuf,
        #[arg(long)]
        quality_checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Rule table, lines of `id class quality verdict`.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Shared backbone with heads versus individually trained models.
    Compare {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "seg,cls")]
        tasks: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Intensity-distribution relatedness of two datasets.
    Relatedness {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use maskctl_core::weak_loss::LossVariant;

#[derive(Debug, Parser)]
#[command(name = "maskctl", version, about = "Foreground mask pipeline over a dataset manifest")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse conv4/conv5 activations into a foreground heat map per image.
    Fuse {
        #[command(flatten)]
        common: Common,
    },
    /// CRF-smoothed binary mask per image.
    Mask {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Diverse mask candidates per image.
    Candidates {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        tuning: Tuning,
        /// Diversity weight (default: 0.1 * mean |unary cost|).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        num_candidates: Option<usize>,
    },
    /// Evaluate a loss and check its gradient against finite differences.
    Loss {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional directory for loss_<variant>.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: LossVariant,
        /// Log-sum-exp sharpness.
        #[arg(long)]
        r: Option<f64>,
    },
    /// Per-class IOU of predicted label PNGs against ground truth.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        #[arg(long, default_value_t = 21)]
        num_classes: usize,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Tuning {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Mean-field iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
}

fn parse_variant(s: &str) -> Result<LossVariant, String> {
    s.parse()
}

//! The `densepath` command line.
//!
//! Exit status: 0 on success, 1 on runtime failure (I/O, training, incompatible
//! checkpoint), 2 on usage or validation errors. Failures also print a single
//! JSON object on stderr: `{"error": kind, "exit_code": n, "message": text}`.

mod commands;
mod config;

use std::ffi::OsString;
use std::fmt::Display;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{DataConfig, ReferenceSource, RunConfig};

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(kind: &'static str, message: impl Display) -> Self {
        Self {
            code: 2,
            kind,
            message: message.to_string(),
        }
    }

    pub fn runtime(kind: &'static str, message: impl Display) -> Self {
        Self {
            code: 1,
            kind,
            message: message.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({"error": self.kind, "exit_code": self.code, "message": self.message}).to_string()
    }
}

#[derive(Parser, Debug)]
#[command(name = "densepath", version, about = "DenseNet-SE histopathology classifier: data preparation, transfer training and patient-level evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-class texture dataset with a manifest.
    Synth(SynthArgs),
    /// Colour-normalize images and optionally expand them six ways.
    Preprocess(PreprocessArgs),
    /// Assign manifest rows to train/val/test and write `path,split`.
    Split(SplitArgs),
    /// Train a model, single stage or a multi-stage transfer pipeline.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write patient- and image-level metrics.
    Eval(EvalArgs),
    /// Edit checkpoints: freeze layers, transplant weights, inspect contents.
    Surgery(SurgeryArgs),
    /// Merge training histories into one CSV keyed by epoch.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory; receives PNGs under benign/ and malignant/ plus manifest.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Images per class.
    #[arg(long, default_value_t = 8)]
    pub per_class: usize,
    /// Synthetic patients per class.
    #[arg(long, default_value_t = 2)]
    pub patients: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Palette and noise preset (0, 1, 2); variants share the texture rule.
    #[arg(long, default_value_t = 0)]
    pub variant: u32,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Input manifest; image paths are relative to its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for images, manifest.csv and reference_stats.json.
    #[arg(long)]
    pub out: PathBuf,
    /// `first-train`, a reference PNG, or a JSON file with mean/std arrays.
    #[arg(long, default_value = "first-train")]
    pub reference: String,
    /// Split file used to find the first training image; without it the first manifest row is used.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    /// Write identity, rot90, rot180, rot270, hflip and vflip variants as `<stem>__<aug>.png`.
    #[arg(long)]
    pub augment: bool,
    /// Resize outputs to this square size after normalization and augmentation.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// train:val:test proportions.
    #[arg(long, default_value = "7:1:2")]
    pub ratios: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `image` shuffles source images; `patient` keeps each patient in one split.
    #[arg(long, default_value = "image")]
    pub mode: String,
    /// Output CSV; defaults to split.csv beside the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration JSON (sections: architecture, train, data, stages).
    #[arg(long)]
    pub config: PathBuf,
    /// Initialize the first stage from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory for checkpoints, histories and summary.json.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// `path,split` CSV; without it every manifest row is evaluated.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    /// Which split to score.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Score augmented variants too instead of originals only.
    #[arg(long)]
    pub include_augmented: bool,
    /// Run configuration whose architecture the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for metrics.json, table.csv and predictions.csv.
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct SurgeryArgs {
    #[command(subcommand)]
    pub action: SurgeryAction,
}

#[derive(Subcommand, Debug)]
pub enum SurgeryAction {
    /// Mark layers before the boundary frozen and the rest trainable.
    Freeze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layer index; defaults to the end of the first dense block.
        #[arg(long)]
        boundary: Option<usize>,
        /// Output checkpoint; defaults to overwriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Copy matching tensors from one checkpoint into another.
    Transplant {
        /// Source checkpoint.
        #[arg(long)]
        from: PathBuf,
        /// Target checkpoint providing the architecture and fallback values.
        #[arg(long)]
        into: PathBuf,
        /// Glob over tensor names, e.g. `block1/*` or `*`.
        #[arg(long, default_value = "*")]
        filter: String,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the transplant report JSON; printed to stdout otherwise.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print provenance, fingerprint and the tensor directory as JSON.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// History CSVs (`epoch,train_loss,train_acc,val_loss,val_acc`).
    #[arg(long, num_args = 1.., required = true)]
    pub history: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command, and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", CliError::usage("usage", e.kind()).to_json());
                return 2;
            }
            return 0;
        }
    };
    if let Err(e) = commands::configure_threads() {
        eprintln!("{}", e.to_json());
        return e.code;
    }
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.code
        }
    }
}

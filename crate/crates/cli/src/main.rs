//! `hierdl`: the two-level classification pipeline as subcommands.
//!
//! Exit codes: 0 success, 1 runtime failure (e.g. training diverged),
//! 2 input or configuration error, 3 taxonomy error (cycle), 4 verification
//! failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hierdl_core::training::LayerCount;

#[derive(Parser)]
#[command(name = "hierdl", version, about = "Two-level hierarchical image classification")]
struct Cli {
    /// Seed for every random choice; overrides seeds in recipe/config files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for multi-model training and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the rolled-up synset tree from an ISA edge file.
    TaxonomyBuild {
        /// "parent child" edge file.
        #[arg(long)]
        isa: PathBuf,
        /// One synset ID per line.
        #[arg(long)]
        synsets: PathBuf,
        #[arg(long, default_value_t = 9)]
        iterations: usize,
        /// Tree output (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a tree into leaf groups and assign RID/LID/GID labels.
    TaxonomyPartition {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        max_leaf: usize,
        #[arg(long)]
        min_leaf: usize,
        /// Partition output (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one CNN on a directory-per-class dataset.
    Train {
        #[command(flatten)]
        model: TrainArgs,
        /// Model container output.
        #[arg(long)]
        out: PathBuf,
        /// Epoch log, one "epoch, mean_loss, top1, top5" line per epoch.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a root model and one leaf model per group, and write a bundle.
    TrainHierarchy {
        #[command(flatten)]
        model: TrainArgs,
        /// Partition file; class directories must be named by synset ID.
        #[arg(long)]
        partition: PathBuf,
        /// Receives the models, epoch logs, a partition copy and bundle.toml.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a convolutional RBM with CD-1.
    PretrainCrbm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        /// Images are resized to size x size.
        #[arg(long)]
        size: usize,
        #[arg(long)]
        filters: usize,
        /// Square kernel extent.
        #[arg(long)]
        kernel: usize,
        #[arg(long, default_value_t = 1)]
        pool_block: usize,
        /// CD-1 settings (TOML); missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// One "epoch, recon_mse, var_ratio_mean, lr" line per epoch.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Copy CRBM filters or leading CNN layers into a CNN.
    Transfer {
        /// Source container (CRBM or CNN).
        #[arg(long)]
        from: PathBuf,
        /// Target CNN container; layers not transferred keep its values.
        #[arg(long)]
        into: PathBuf,
        /// CNN source: parameterized layers to copy ("all" or a count).
        #[arg(long, default_value = "all")]
        layers: LayerCount,
        /// CRBM source: index of the target conv layer (default: the first conv).
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the most likely classes of one image.
    Classify {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        widths: Widths,
    },
    /// Top-k error of a bundle on a dataset whose class directories are synset IDs.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate only the held-out part of a split made with this
        /// training fraction (same --seed as training).
        #[arg(long)]
        train_fraction: Option<f64>,
        #[command(flatten)]
        widths: Widths,
        /// Report output (text, or JSON for a .json path).
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a first-layer filter mosaic as PGM/PPM.
    ExportFilters {
        /// CNN or CRBM container.
        #[arg(long)]
        model: PathBuf,
        /// Conv layer index (CNN only).
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every layer kernel and of a network.
    Gradcheck {
        /// Builtin spec name or TOML path.
        #[arg(long, default_value = "toy")]
        spec: String,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Builtin spec name (toy, desk, table1_root, ...) or TOML path; the
    /// softmax width is set from the data.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    data: PathBuf,
    /// Recipe (TOML); defaults to the scratch leaf recipe.
    #[arg(long)]
    recipe: Option<PathBuf>,
    /// "scratch" or a model container to warm-start from.
    #[arg(long)]
    init: Option<String>,
    /// Layers copied by a warm start.
    #[arg(long, default_value = "all")]
    init_layers: LayerCount,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_dropout: bool,
    #[arg(long)]
    no_stochastic: bool,
    /// Train on this fraction of each class (seeded split).
    #[arg(long, default_value_t = 1.0)]
    train_fraction: f64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Target {
    /// Bundle manifest (hierarchical routing).
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Single model container (flat classification).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Clone, Copy)]
struct Widths {
    /// Predictions reported.
    #[arg(long, default_value_t = 5)]
    topk: usize,
    /// Root groups expanded.
    #[arg(long, default_value_t = 5)]
    root_k: usize,
    /// Classes kept per expanded leaf.
    #[arg(long, default_value_t = 5)]
    leaf_k: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// 16 classes of 16x16 shapes, directories named by synset; also writes
    /// isa.txt and synsets.txt.
    Shapes,
    /// 2 classes of 8x8 bright-left / bright-right images.
    Halves,
    /// 8x8 bars and stripes, one class.
    Bars,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

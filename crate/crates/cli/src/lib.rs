//! The `ssr` command line. Every command prints one JSON record on stdout;
//! failures print `{"error": {"kind", "message"}}` and exit nonzero.

pub mod commands;
pub mod server;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ssr", version, about = "Semi-supervised GAN super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw paired / unpaired / test subsets and prepare their images.
    Split(SplitArgs),
    /// Train from a config file; flags override file values.
    Train(TrainArgs),
    /// Super-resolve one image or a directory of images.
    Infer(InferArgs),
    /// FID between two image directories.
    Fid(FidArgs),
    /// Mean opinion scores from a ratings log.
    Mos(MosArgs),
    /// Render a blinded rating-study bundle from checkpoints.
    ExportStudy(ExportStudyArgs),
    /// Serve a study bundle to the rating UI.
    ServeStudy(ServeStudyArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Source root: `<src>/hr` (and optional `<src>/lr`), or a plain image directory.
    #[arg(long, conflicts_with = "hr")]
    pub src: Option<PathBuf>,
    /// HR image directory (alternative to --src).
    #[arg(long)]
    pub hr: Option<PathBuf>,
    /// Native LR directory with stems matching --hr.
    #[arg(long, requires = "hr")]
    pub lr: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub paired: usize,
    /// Defaults to every image left after the test and paired draws.
    #[arg(long)]
    pub unpaired: Option<usize>,
    #[arg(long, default_value_t = 238)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub hr_size: usize,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// bicubic, average-pool or nearest.
    #[arg(long, default_value = "bicubic")]
    pub kernel: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint file, or a run directory (uses its last checkpoint).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `trainer.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_batches: Option<u64>,
    #[arg(long)]
    pub warmup_batches: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr_init: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub validate_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint file, or a run directory (uses its last checkpoint).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// An image file or a directory of images.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output PNG path, or a directory when --in is a directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Tile side in LR pixels; enables tiled inference.
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long, default_value_t = 8, requires = "tile")]
    pub overlap: usize,
}

#[derive(Debug, Args)]
pub struct FidArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub fake: PathBuf,
    /// Use at most this many images from each directory.
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Narrow, shallow feature network on 32×32 inputs.
    #[arg(long)]
    pub small: bool,
    /// VGG-19 weights (safetensors, torchvision layout); seeded init otherwise.
    #[arg(long, conflicts_with = "small")]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MosArgs {
    #[arg(long)]
    pub ratings: PathBuf,
    /// Blinding key of the study bundle; adds method names to the table.
    #[arg(long)]
    pub key: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportStudyArgs {
    /// `NAME=PATH`, or a bare path named after its file stem. Repeatable.
    #[arg(long = "ckpt", required = true)]
    pub ckpts: Vec<String>,
    /// Split manifest (file or directory); its test split supplies the images.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n_images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long, default_value_t = 8, requires = "tile")]
    pub overlap: usize,
}

#[derive(Debug, Args)]
pub struct ServeStudyArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Append-only ratings log; replayed on startup.
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Built rating UI to serve at `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

//! Batch workflows over the `ulfdti` toolkit. Each subcommand writes its
//! outputs plus a `manifest.json` into an output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "ulfdti", version, about = "Ultra-low-field diffusion tensor workflows")]
pub struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct DwiArgs {
    /// 4-D diffusion NIfTI.
    #[arg(long)]
    pub dwi: PathBuf,
    #[arg(long)]
    pub bvals: PathBuf,
    #[arg(long)]
    pub bvecs: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Log-linear tensor fit: tensor, FA, ADC and V1 maps.
    Fit {
        #[command(flatten)]
        input: DwiArgs,
        #[arg(long)]
        out: PathBuf,
        /// Weighted least squares after an OLS pass.
        #[arg(long)]
        weighted: bool,
    },
    /// Fit the 7-channel low-b + ℓ≤2 SH sample.
    ShFit {
        #[command(flatten)]
        input: DwiArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Direction-dependent bias correction against an atlas bundle.
    BiasCorrect {
        #[command(flatten)]
        input: DwiArgs,
        /// 11-channel atlas NIfTI on the DWI grid.
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda_c: Option<f64>,
        #[arg(long)]
        lambda_gm: Option<f64>,
        #[arg(long)]
        adam_steps: Option<usize>,
        #[arg(long)]
        adam_lr: Option<f64>,
    },
    /// Simulate the low-field protocol: coarser voxels, fewer directions,
    /// Rician noise.
    Degrade {
        #[command(flatten)]
        input: DwiArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        voxel_mm: Option<f64>,
        #[arg(long)]
        directions: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Start the direction selection at the first direction.
        #[arg(long)]
        fixed_start: bool,
    },
    /// Write augmented HR/LR training pairs for inspection.
    AugmentPreview {
        /// 7-channel SH sample NIfTI.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Cubic crop edge in voxels.
        #[arg(long)]
        crop: Option<usize>,
    },
    /// Synthetic tensor phantom with its DWI, truth maps and atlas.
    Phantom {
        #[arg(long, default_value = "curved_bundle")]
        scene: String,
        /// Grid size as nx,ny,nz.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        voxel_mm: Option<f64>,
        /// Inject a smooth direction-dependent bias.
        #[arg(long)]
        bias: bool,
        /// Rician noise σ in signal units.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the superresolution network on SH samples or fresh phantoms.
    Train {
        /// SH sample NIfTIs; phantoms are generated when none are given.
        #[arg(long = "sample")]
        samples: Vec<PathBuf>,
        #[arg(long, default_value_t = 8)]
        phantoms: usize,
        #[arg(long, value_delimiter = ',', default_value = "32,32,32")]
        phantom_dims: Vec<usize>,
        #[arg(long, default_value_t = 1.75)]
        phantom_voxel_mm: f64,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Superresolve an SH sample (or raw DWI) onto a finer grid.
    Superresolve {
        #[arg(long)]
        model: PathBuf,
        /// 7-channel SH sample NIfTI.
        #[arg(long, conflicts_with = "dwi")]
        input: Option<PathBuf>,
        #[arg(long, requires_all = ["bvals", "bvecs"])]
        dwi: Option<PathBuf>,
        #[arg(long)]
        bvals: Option<PathBuf>,
        #[arg(long)]
        bvecs: Option<PathBuf>,
        /// Target isotropic voxel size.
        #[arg(long)]
        voxel_mm: f64,
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        /// Run the whole volume at once.
        #[arg(long, conflicts_with = "tile")]
        whole: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a prediction against a reference volume.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Mask NIfTI; nonzero voxels are included.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        lncc_window: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit { .. } => "fit",
            Command::ShFit { .. } => "sh-fit",
            Command::BiasCorrect { .. } => "bias-correct",
            Command::Degrade { .. } => "degrade",
            Command::AugmentPreview { .. } => "augment-preview",
            Command::Phantom { .. } => "phantom",
            Command::Train { .. } => "train",
            Command::Superresolve { .. } => "superresolve",
            Command::Metrics { .. } => "metrics",
        }
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_USAGE } else { error::EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(()) => error::EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! `epinaf`: phantoms, simulated projections, reconstruction, training,
//! evaluation and the experiment grid from the command line.
//!
//! Exit codes: 0 on success, 2 for usage errors, 3 for runtime failures.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epinaf_core::Method;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "epinaf", version, about = "Limited-angle cone-beam CT reconstruction toolkit")]
pub struct Cli {
    /// Seed for model initialisation and training (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the parallel loops (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory outputs are written to.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Progress lines on stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a phantom's ellipsoid list and its rasterised volume.
    #[command(group = clap::ArgGroup::new("source").required(true).args(["name", "spec"]))]
    Phantom {
        /// Built-in phantom: shepp-logan or lung.
        name: Option<String>,
        /// JSON list of ellipsoids instead of a built-in.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        dims: usize,
        /// Half size of the volume in mm.
        #[arg(long, default_value_t = 64.0)]
        extent: f64,
    },
    /// Simulate a projection stack over a centred arc.
    Project {
        /// Built-in name or ellipsoid JSON file.
        #[arg(long)]
        phantom: String,
        /// Arc length in degrees, at most 180.
        #[arg(long)]
        range: f64,
        #[arg(long, default_value_t = 50)]
        views: usize,
        /// Geometry JSON; its angle list is replaced by the arc.
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        i0: f64,
        /// Quadrature points per ray.
        #[arg(long, default_value_t = 512)]
        samples: usize,
        /// Half size of the volume a built-in phantom is scaled to (mm).
        #[arg(long, default_value_t = 64.0)]
        extent: f64,
    },
    /// Reconstruct a projection stack with any method.
    Reconstruct {
        /// fdk, sart, asdpocs, naf or epinaf.
        method: Method,
        /// Projection file written by `project`.
        #[arg(long)]
        proj: PathBuf,
        /// Ground-truth volume; when given, PSNR and SSIM are reported.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a neural attenuation field and render it.
    Train {
        #[arg(long)]
        proj: PathBuf,
        /// naf (no consistency term) or epinaf.
        #[arg(long, default_value = "epinaf")]
        method: Method,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// PSNR and SSIM of a volume against ground truth, as JSON on stdout.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Write one slice of a volume as a 16-bit PGM.
    ExportSlice {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_enum, default_value = "z")]
        axis: Axis,
        /// Slice index; the middle slice by default.
        #[arg(long)]
        index: Option<usize>,
        /// Window to this volume's range instead of the slice's own volume.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Output file (default `<out-dir>/slice.pgm`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every range × method × seed cell and write the result tables.
    Experiment {
        /// Comma-separated arc lengths in degrees.
        #[arg(long, value_delimiter = ',')]
        ranges: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        phantom: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Reconstruction settings: an optional JSON file (the experiment spec
/// format) with individual fields overridden by flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Voxels per axis of the output grid.
    #[arg(long)]
    pub dims: Option<usize>,
    /// Half size of the output grid in mm.
    #[arg(long)]
    pub grid_extent: Option<f64>,
    #[arg(long)]
    pub sart_iterations: Option<usize>,
    #[arg(long)]
    pub tv_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Fixed consistency weight; unset means the by-range rule.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub rays_per_batch: Option<usize>,
    /// Samples per training ray.
    #[arg(long)]
    pub ray_samples: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

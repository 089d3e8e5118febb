use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use epinaf_core::experiment::{self, ExperimentError, RunOptions, TABLE_FILE};
use epinaf_core::geometry::centered_arc;
use epinaf_core::io::{self, Provenance};
use epinaf_core::metrics::evaluate;
use epinaf_core::phantom::{builtin, PhantomError};
use epinaf_core::projector::{simulate_projections, Quadrature};
use epinaf_core::trainer::LambdaRule;
use epinaf_core::{ConeBeamGeometry, ExperimentSpec, GridSpec, Method, Phantom, VoxelVolume};
use serde_json::json;

use crate::{Axis, Cli, Command, ConfigArgs};

/// A problem with the invocation rather than with the computation.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Rewraps core errors that really describe bad input as usage errors.
fn classify(e: ExperimentError) -> anyhow::Error {
    match e {
        ExperimentError::Invalid(m) => usage(m),
        ExperimentError::Phantom(p @ PhantomError::UnknownPhantom(_)) => usage(p.to_string()),
        other => other.into(),
    }
}

struct Ctx {
    seed: u64,
    out_dir: PathBuf,
    command: String,
    verbose: bool,
}

impl Ctx {
    fn provenance(&self, config: &serde_json::Value) -> Provenance {
        Provenance {
            seed: self.seed,
            config_hash: io::config_hash(config),
            command: Some(self.command.clone()),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(0),
        out_dir: cli.out_dir.clone(),
        command: std::iter::once("epinaf".to_string())
            .chain(std::env::args().skip(1))
            .collect::<Vec<_>>()
            .join(" "),
        verbose: cli.verbose,
    };
    fs::create_dir_all(&ctx.out_dir).with_context(|| format!("creating {}", ctx.out_dir.display()))?;

    match &cli.command {
        Command::Phantom {
            name,
            spec,
            dims,
            extent,
        } => {
            let source = match (name, spec) {
                (_, Some(path)) => path.to_string_lossy().into_owned(),
                (Some(n), None) => n.clone(),
                (None, None) => unreachable!("clap requires one source"),
            };
            cmd_phantom(&ctx, &source, spec.is_some(), *dims, *extent)
        }
        Command::Project {
            phantom,
            range,
            views,
            geometry,
            i0,
            samples,
            extent,
        } => cmd_project(&ctx, phantom, *range, *views, geometry.as_deref(), *i0, *samples, *extent),
        Command::Reconstruct {
            method,
            proj,
            truth,
            config,
        } => {
            let train_dir = ctx.path("train");
            cmd_reconstruct(&ctx, *method, proj, truth.as_deref(), config, &train_dir)
        }
        Command::Train {
            proj,
            method,
            truth,
            config,
        } => {
            if !method.is_neural() {
                return Err(usage(format!("train needs naf or epinaf, not {method}")));
            }
            cmd_reconstruct(&ctx, *method, proj, truth.as_deref(), config, &ctx.out_dir)
        }
        Command::Eval { recon, truth } => {
            let (r, _) = io::read_volume(recon)?;
            let (t, _) = io::read_volume(truth)?;
            let report = evaluate(&r, &t)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::ExportSlice {
            volume,
            axis,
            index,
            truth,
            out,
        } => cmd_export_slice(&ctx, volume, *axis, *index, truth.as_deref(), out.as_deref()),
        Command::Experiment {
            ranges,
            methods,
            seeds,
            views,
            phantom,
            config,
        } => {
            let mut spec = load_spec(config)?;
            if let Some(r) = ranges {
                spec.ranges_deg = r.clone();
            }
            if let Some(m) = methods {
                spec.methods = m.clone();
            }
            match (seeds, cli.seed) {
                (Some(s), _) => spec.seeds = s.clone(),
                (None, Some(s)) => spec.seeds = vec![s],
                (None, None) => {}
            }
            if let Some(v) = views {
                spec.n_views = *v;
            }
            if let Some(p) = phantom {
                spec.phantom = p.clone();
            }
            spec.validate().map_err(classify)?;
            let opts = RunOptions {
                out_dir: ctx.out_dir.clone(),
                command: Some(ctx.command.clone()),
                verbose: ctx.verbose,
            };
            experiment::run_experiment(&spec, &opts).map_err(classify)?;
            print!("{}", fs::read_to_string(ctx.path(TABLE_FILE))?);
            Ok(())
        }
    }
}

fn load_phantom(source: &str, from_file: bool, extent: f64) -> Result<Phantom> {
    if from_file || Path::new(source).is_file() {
        let p: Phantom = io::read_json(Path::new(source))?;
        p.validate()?;
        return Ok(p);
    }
    builtin(source, extent).map_err(|e| usage(e.to_string()))
}

fn cmd_phantom(ctx: &Ctx, source: &str, from_file: bool, dims: usize, extent: f64) -> Result<()> {
    if dims < 2 || !(extent > 0.0) {
        return Err(usage("--dims must be at least 2 and --extent positive"));
    }
    let phantom = load_phantom(source, from_file, extent)?;
    let grid = GridSpec::cube(dims, extent);
    let vol = phantom.rasterize(grid);
    let config = json!({ "phantom": phantom, "grid": grid });
    io::write_json(&ctx.path("ellipsoids.json"), &phantom)?;
    let out = ctx.path("phantom.raw");
    io::write_volume(&out, &vol, ctx.provenance(&config))?;
    println!("{}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_project(
    ctx: &Ctx,
    phantom: &str,
    range: f64,
    views: usize,
    geometry: Option<&Path>,
    i0: f64,
    samples: usize,
    extent: f64,
) -> Result<()> {
    if !(range > 0.0 && range <= 180.0) {
        return Err(usage(format!("--range must lie in (0, 180], got {range}")));
    }
    if views < 2 {
        return Err(usage("--views must be at least 2"));
    }
    if !(i0 > 0.0) {
        return Err(usage("--i0 must be positive"));
    }
    let ph = load_phantom(phantom, false, extent)?;
    let mut geom = match geometry {
        Some(p) => io::read_json::<ConeBeamGeometry>(p)?,
        None => ConeBeamGeometry::desk_default(Vec::new()),
    };
    geom.angles = centered_arc(range, views);
    geom.validate()?;
    let proj = simulate_projections(&ph, &geom, samples, i0, Quadrature::Midpoint)?;
    let config = json!({ "phantom": ph, "geometry": geom, "i0": i0, "samples": samples });
    let out = ctx.path("projections.raw");
    io::write_projections(&out, &proj, ctx.provenance(&config))?;
    println!("{}", out.display());
    Ok(())
}

/// Experiment spec from `--config` (or defaults) with flag overrides applied.
fn load_spec(args: &ConfigArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(p) => io::read_json::<ExperimentSpec>(p)?,
        None => ExperimentSpec::default(),
    };
    if args.dims.is_some() || args.grid_extent.is_some() {
        let n = args.dims.unwrap_or(spec.grid.dims[0]);
        let e = args.grid_extent.unwrap_or(spec.grid.extent[0]);
        spec.grid = GridSpec::cube(n, e);
    }
    if let Some(n) = args.sart_iterations {
        spec.sart_iterations = n;
    }
    if let Some(n) = args.tv_steps {
        spec.asd_tv_steps = n;
    }
    let t = &mut spec.train;
    if let Some(n) = args.epochs {
        t.n_epochs = n;
    }
    if let Some(n) = args.warmup {
        t.warmup_epochs = n;
    }
    if let Some(l) = args.lambda {
        t.lambda = l;
        t.lambda_rule = LambdaRule::Fixed;
    }
    if let Some(lr) = args.lr {
        t.lr = lr;
    }
    if let Some(n) = args.rays_per_batch {
        t.rays_per_batch = n;
    }
    if let Some(n) = args.ray_samples {
        t.n_samples = n;
    }
    if let Some(h) = &args.hidden {
        spec.field.hidden = h.clone();
    }
    Ok(spec)
}

fn cmd_reconstruct(
    ctx: &Ctx,
    method: Method,
    proj_path: &Path,
    truth: Option<&Path>,
    args: &ConfigArgs,
    train_dir: &Path,
) -> Result<()> {
    let (proj, side) = io::read_projections(proj_path)?;
    let mut spec = load_spec(args)?;
    spec.geometry = proj.geometry.clone();
    spec.field.bound = proj.geometry.volume_radius;
    spec.methods = vec![method];
    spec.validate().map_err(classify)?;
    let truth = truth.map(io::read_volume).transpose()?.map(|(v, _)| v);

    let neural = method.is_neural().then_some(train_dir);
    let out = experiment::reconstruct(&spec, &proj, method, ctx.seed, neural).map_err(classify)?;
    let config = json!({
        "method": method,
        "spec": spec,
        "projections": side.provenance.config_hash,
    });
    let path = ctx.path("recon.raw");
    io::write_volume(&path, &out.volume, ctx.provenance(&config))?;

    let mut summary = json!({ "method": method, "volume": path });
    if let Some(t) = &out.train {
        summary["lambda"] = json!(t.lambda);
        summary["final_recon_loss"] = json!(t.final_recon_loss);
        summary["iterations"] = json!(t.state.iteration);
        if ctx.verbose {
            eprintln!("trained {} iterations, lambda {}", t.state.iteration, t.lambda);
        }
    }
    if let Some(truth) = &truth {
        let report = evaluate(&out.volume, truth)?;
        io::write_json(&ctx.path("metrics.json"), &report)?;
        summary["psnr"] = json!(report.psnr);
        summary["ssim"] = json!(report.ssim);
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_export_slice(
    ctx: &Ctx,
    volume: &Path,
    axis: Axis,
    index: Option<usize>,
    truth: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let (vol, _) = io::read_volume(volume)?;
    let a = match axis {
        Axis::X => 0,
        Axis::Y => 1,
        Axis::Z => 2,
    };
    let index = index.unwrap_or(vol.dims[a] / 2);
    let (w, h, pixels) = vol
        .slice(a, index)
        .ok_or_else(|| usage(format!("slice index {index} out of range (axis has {} slices)", vol.dims[a])))?;
    let window: VoxelVolume = match truth {
        Some(p) => io::read_volume(p)?.0,
        None => vol,
    };
    let (lo, hi) = window.min_max();
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| ctx.path("slice.pgm"));
    fs::write(&out, io::encode_pgm16(w, h, &pixels, lo, hi)).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}

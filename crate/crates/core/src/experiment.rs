//! Range × method experiment grid: simulate projections on a centered arc,
//! reconstruct with every requested method, score against the rasterized
//! phantom and aggregate into CSV tables.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{render_volume, FieldConfig, FieldError, FieldModel};
use crate::geometry::{centered_arc, ConeBeamGeometry, GeometryError};
use crate::io::{self, IoError, Provenance};
use crate::metrics::{evaluate, MetricError};
use crate::phantom::{builtin, PhantomError};
use crate::projector::{simulate_projections, ProjectionSet, ProjectorError, Quadrature, SIMULATION_SAMPLES};
use crate::recon::{asd_pocs, fdk, sart, AsdPocsConfig, ReconError, SartConfig};
use crate::trainer::{train, LambdaRule, RunFiles, TrainConfig, TrainError, TrainReport};
use crate::volume::{GridSpec, VoxelVolume};

pub const RESULTS_FILE: &str = "results.csv";
pub const TABLE_FILE: &str = "table.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("i/o: {0}")]
    File(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fdk,
    Sart,
    Asdpocs,
    Naf,
    Epinaf,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Fdk, Method::Sart, Method::Asdpocs, Method::Naf, Method::Epinaf];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fdk => "fdk",
            Method::Sart => "sart",
            Method::Asdpocs => "asdpocs",
            Method::Naf => "naf",
            Method::Epinaf => "epinaf",
        }
    }

    /// Neural methods are trained once per seed; the others are deterministic.
    pub fn is_neural(self) -> bool {
        matches!(self, Method::Naf | Method::Epinaf)
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase().replace(['-', '_'], ""))
            .ok_or_else(|| format!("unknown method `{s}` (expected fdk, sart, asdpocs, naf or epinaf)"))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub phantom: String,
    /// Acquisition template; its angle list is replaced per range.
    pub geometry: ConeBeamGeometry,
    pub ranges_deg: Vec<f64>,
    pub n_views: usize,
    pub methods: Vec<Method>,
    /// Evaluation and reconstruction grid.
    pub grid: GridSpec,
    pub seeds: Vec<u64>,
    pub i0: f64,
    pub sim_samples: usize,
    pub sart_iterations: usize,
    pub sart_relaxation: f64,
    pub asd_tv_steps: usize,
    pub asd_tv_ratio: f64,
    pub asd_tv_reduction: f64,
    pub field: FieldConfig,
    /// Shared by both neural methods. `naf` cells force λ = 0; `epinaf`
    /// cells keep `lambda_rule` (and `lambda` when the rule is fixed).
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let geometry = ConeBeamGeometry::desk_default(Vec::new());
        ExperimentSpec {
            phantom: "lung".into(),
            field: FieldConfig::new(geometry.volume_radius),
            geometry,
            ranges_deg: vec![45.0, 60.0, 90.0, 120.0],
            n_views: 50,
            methods: Method::ALL.to_vec(),
            grid: GridSpec::cube(64, 64.0),
            seeds: vec![0],
            i0: 1.0,
            sim_samples: SIMULATION_SAMPLES,
            sart_iterations: 20,
            sart_relaxation: 1.0,
            asd_tv_steps: 20,
            asd_tv_ratio: 0.2,
            asd_tv_reduction: 0.95,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Invalid(m.to_string()));
        if self.methods.is_empty() {
            return bad("methods must be nonempty");
        }
        if self.ranges_deg.is_empty() || self.ranges_deg.iter().any(|&r| !(r > 0.0 && r <= 180.0)) {
            return bad("angle ranges must lie in (0, 180]");
        }
        if self.n_views < 2 {
            return bad("need at least two views per range");
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty");
        }
        if !(self.i0 > 0.0) {
            return bad("i0 must be positive");
        }
        builtin(&self.phantom, self.half_extent())?;
        self.field.validate()?;
        self.train.validate()?;
        self.sart_config().validate()?;
        self.asd_config().validate()?;
        Ok(())
    }

    fn half_extent(&self) -> f64 {
        self.grid.extent.iter().cloned().fold(0.0, f64::max)
    }

    pub fn geometry_for(&self, range_deg: f64) -> ConeBeamGeometry {
        ConeBeamGeometry {
            angles: centered_arc(range_deg, self.n_views),
            ..self.geometry.clone()
        }
    }

    pub fn sart_config(&self) -> SartConfig {
        SartConfig {
            n_iterations: self.sart_iterations,
            relaxation: self.sart_relaxation,
            ..SartConfig::new(self.grid)
        }
    }

    pub fn asd_config(&self) -> AsdPocsConfig {
        AsdPocsConfig {
            n_tv_steps: self.asd_tv_steps,
            tv_step_ratio: self.asd_tv_ratio,
            tv_reduction: self.asd_tv_reduction,
            ..AsdPocsConfig::new(self.sart_config())
        }
    }

    /// Training configuration of a neural cell.
    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        let mut c = self.train.clone();
        c.seed = seed;
        if method == Method::Naf {
            c.lambda = 0.0;
            c.lambda_rule = LambdaRule::Fixed;
        }
        c
    }

    pub fn truth(&self) -> Result<VoxelVolume, ExperimentError> {
        Ok(builtin(&self.phantom, self.half_extent())?.rasterize(self.grid))
    }

    pub fn simulate(&self, range_deg: f64) -> Result<ProjectionSet, ExperimentError> {
        let geom = self.geometry_for(range_deg);
        geom.validate()?;
        let ph = builtin(&self.phantom, self.half_extent())?;
        Ok(simulate_projections(&ph, &geom, self.sim_samples, self.i0, Quadrature::Midpoint)?)
    }

    /// Every cell of the grid, in execution order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &range_deg in &self.ranges_deg {
            for &method in &self.methods {
                let seeds: &[u64] = if method.is_neural() { &self.seeds } else { &self.seeds[..1] };
                for &seed in seeds {
                    out.push(Cell { range_deg, method, seed });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub range_deg: f64,
    pub method: Method,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("r{:03}_{}_s{}", self.range_deg.round() as i64, self.method, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub phantom: String,
    pub range_deg: f64,
    pub method: Method,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    /// λ used by neural cells.
    pub lambda: Option<f64>,
    pub final_recon_loss: Option<f64>,
    pub wall_ms: u64,
}

/// Reconstruction of one method from one projection set.
pub struct CellOutput {
    pub volume: VoxelVolume,
    pub train: Option<TrainReport>,
}

/// Runs one method. Neural methods write their training artifacts to
/// `train_dir` when given and resume from a saved state found there.
pub fn reconstruct(
    spec: &ExperimentSpec,
    proj: &ProjectionSet,
    method: Method,
    seed: u64,
    train_dir: Option<&Path>,
) -> Result<CellOutput, ExperimentError> {
    let volume_only = |volume| CellOutput { volume, train: None };
    Ok(match method {
        Method::Fdk => volume_only(fdk(&proj.to_line_integrals()?, spec.grid)?),
        Method::Sart => volume_only(sart(&proj.to_line_integrals()?, &spec.sart_config())?),
        Method::Asdpocs => volume_only(asd_pocs(&proj.to_line_integrals()?, &spec.asd_config())?),
        Method::Naf | Method::Epinaf => {
            let mut model = FieldModel::new(spec.field.clone(), seed)?;
            let files = RunFiles {
                out_dir: train_dir.map(Path::to_path_buf),
                resume: true,
            };
            let report = train(proj, &mut model, &spec.train_config(method, seed), &files)?;
            CellOutput {
                volume: render_volume(&model, spec.grid),
                train: Some(report),
            }
        }
    })
}

/// Options for [`run_experiment`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub command: Option<String>,
    /// Print one line per finished cell to stderr.
    pub verbose: bool,
}

/// Runs every cell that has no report yet, then rewrites the aggregate CSVs
/// from all reports on disk.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<Vec<CellResult>, ExperimentError> {
    spec.validate()?;
    let out = &opts.out_dir;
    fs::create_dir_all(out)?;
    let hash = io::config_hash(spec);
    io::write_json(&out.join("experiment.json"), spec)?;
    let truth = spec.truth()?;
    let (lo, hi) = truth.min_max();
    let mut projections: BTreeMap<i64, ProjectionSet> = BTreeMap::new();
    let mut results = Vec::new();
    for cell in spec.cells() {
        let dir = out.join("cells").join(cell.dir_name());
        let report_path = dir.join(REPORT_FILE);
        if report_path.exists() {
            results.push(io::read_json(&report_path)?);
            continue;
        }
        let key = (cell.range_deg * 1e6).round() as i64;
        if let Entry::Vacant(slot) = projections.entry(key) {
            slot.insert(spec.simulate(cell.range_deg)?);
        }
        let proj = &projections[&key];
        let start = Instant::now();
        let neural_dir = cell.method.is_neural().then(|| dir.join("train"));
        let output = reconstruct(spec, proj, cell.method, cell.seed, neural_dir.as_deref())?;
        let metrics = evaluate(&output.volume, &truth)?;
        let result = CellResult {
            phantom: spec.phantom.clone(),
            range_deg: cell.range_deg,
            method: cell.method,
            seed: cell.seed,
            psnr: metrics.psnr,
            ssim: metrics.ssim,
            lambda: output.train.as_ref().map(|t| t.lambda),
            final_recon_loss: output.train.as_ref().map(|t| t.final_recon_loss),
            wall_ms: start.elapsed().as_millis() as u64,
        };
        let prov = Provenance {
            seed: cell.seed,
            config_hash: hash.clone(),
            command: opts.command.clone(),
        };
        io::write_volume(&dir.join("recon.raw"), &output.volume, prov)?;
        let mid = output.volume.dims[2] / 2;
        if let Some((w, h, img)) = output.volume.slice(2, mid) {
            fs::write(dir.join("slice_z.pgm"), io::encode_pgm16(w, h, &img, lo, hi))?;
        }
        // Written last: its presence marks the cell complete.
        io::write_json(&report_path, &result)?;
        if opts.verbose {
            eprintln!(
                "{:>5.0}° {:<8} seed {:<3} PSNR {:6.2} dB  SSIM {:.4}  ({:.1} s)",
                result.range_deg,
                result.method,
                result.seed,
                result.psnr,
                result.ssim,
                result.wall_ms as f64 / 1e3
            );
        }
        results.push(result);
    }
    fs::write(out.join(RESULTS_FILE), results_csv(&results))?;
    fs::write(out.join(TABLE_FILE), table_csv(&results))?;
    Ok(results)
}

/// One row per cell.
pub fn results_csv(results: &[CellResult]) -> String {
    let mut s = String::from("phantom,range_deg,method,seed,psnr,ssim,lambda,final_recon_loss\n");
    for r in results {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{},{}",
            r.phantom,
            r.range_deg,
            r.method,
            r.seed,
            r.psnr,
            r.ssim,
            opt(r.lambda),
            opt(r.final_recon_loss)
        );
    }
    s
}

/// Seed-averaged metrics of one (range, method) pair.
pub fn mean_metrics(results: &[CellResult], range_deg: f64, method: Method) -> Option<(f64, f64)> {
    let sel: Vec<_> = results
        .iter()
        .filter(|r| r.method == method && (r.range_deg - range_deg).abs() < 1e-9)
        .collect();
    if sel.is_empty() {
        return None;
    }
    let n = sel.len() as f64;
    Some((
        sel.iter().map(|r| r.psnr).sum::<f64>() / n,
        sel.iter().map(|r| r.ssim).sum::<f64>() / n,
    ))
}

/// Rows: phantom × method. Columns: one `psnr/ssim` pair per range.
pub fn table_csv(results: &[CellResult]) -> String {
    let mut ranges: Vec<f64> = results.iter().map(|r| r.range_deg).collect();
    ranges.sort_by(f64::total_cmp);
    ranges.dedup();
    let mut rows: Vec<(String, Method)> = results.iter().map(|r| (r.phantom.clone(), r.method)).collect();
    rows.sort();
    rows.dedup();
    let mut s = String::from("phantom,method");
    for r in &ranges {
        let _ = write!(s, ",psnr_{r},ssim_{r}");
    }
    s.push('\n');
    for (phantom, method) in rows {
        let _ = write!(s, "{phantom},{method}");
        let mine: Vec<CellResult> = results.iter().filter(|r| r.phantom == phantom).cloned().collect();
        for &r in &ranges {
            match mean_metrics(&mine, r, method) {
                Some((p, q)) => {
                    let _ = write!(s, ",{p:.4},{q:.4}");
                }
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(range_deg: f64, method: Method, seed: u64, psnr: f64) -> CellResult {
        CellResult {
            phantom: "lung".into(),
            range_deg,
            method,
            seed,
            psnr,
            ssim: psnr / 100.0,
            lambda: None,
            final_recon_loss: None,
            wall_ms: 0,
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("ASD-POCS".parse::<Method>().unwrap(), Method::Asdpocs);
        assert!("art".parse::<Method>().is_err());
    }

    #[test]
    fn cells_repeat_only_neural_methods_per_seed() {
        let spec = ExperimentSpec {
            ranges_deg: vec![45.0, 90.0],
            methods: vec![Method::Sart, Method::Naf],
            seeds: vec![0, 1, 2],
            ..Default::default()
        };
        let cells = spec.cells();
        assert_eq!(cells.len(), 2 * (1 + 3));
        assert_eq!(cells[0].dir_name(), "r045_sart_s0");
    }

    #[test]
    fn naf_cells_force_zero_lambda() {
        let spec = ExperimentSpec::default();
        let c = spec.train_config(Method::Naf, 4);
        assert_eq!(c.effective_lambda(&centered_arc(90.0, 50)), 0.0);
        assert_eq!(c.seed, 4);
        let e = spec.train_config(Method::Epinaf, 4);
        assert_eq!(e.effective_lambda(&centered_arc(90.0, 50)), 1e-3);
    }

    #[test]
    fn validation() {
        assert!(ExperimentSpec::default().validate().is_ok());
        let bad = [
            ExperimentSpec {
                methods: vec![],
                ..Default::default()
            },
            ExperimentSpec {
                ranges_deg: vec![200.0],
                ..Default::default()
            },
            ExperimentSpec {
                phantom: "teapot".into(),
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(s.validate().is_err());
        }
    }

    #[test]
    fn table_averages_seeds() {
        let rs = vec![
            result(90.0, Method::Naf, 0, 20.0),
            result(90.0, Method::Naf, 1, 22.0),
            result(45.0, Method::Fdk, 0, 10.0),
        ];
        let (p, q) = mean_metrics(&rs, 90.0, Method::Naf).unwrap();
        assert_eq!(p, 21.0);
        assert!((q - 0.21).abs() < 1e-12);
        let t = table_csv(&rs);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "phantom,method,psnr_45,ssim_45,psnr_90,ssim_90");
        assert_eq!(lines[1], "lung,fdk,10.0000,0.1000,,");
        assert_eq!(lines[2], "lung,naf,,,21.0000,0.2100");
        assert_eq!(results_csv(&rs).lines().count(), 4);
    }
}

//! SART with a ray-driven trilinear projector and its exact adjoint.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ReconError;
use crate::geometry::Ray;
use crate::projector::LineIntegralStack;
use crate::volume::{GridSpec, VoxelVolume};

fn default_step() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SartConfig {
    pub n_iterations: usize,
    pub relaxation: f64,
    pub grid: GridSpec,
    /// Ray sampling step as a fraction of the smallest voxel edge.
    #[serde(default = "default_step")]
    pub step_fraction: f64,
}

impl SartConfig {
    pub fn new(grid: GridSpec) -> Self {
        SartConfig {
            n_iterations: 20,
            relaxation: 1.0,
            grid,
            step_fraction: default_step(),
        }
    }

    pub fn validate(&self) -> Result<(), ReconError> {
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(ReconError::InvalidConfig("relaxation must lie in (0, 2)"));
        }
        if !(self.step_fraction > 0.0) {
            return Err(ReconError::InvalidConfig("step_fraction must be positive"));
        }
        if self.grid.dims.iter().any(|&d| d < 2) {
            return Err(ReconError::InvalidConfig("grid needs at least 2 voxels per axis"));
        }
        Ok(())
    }
}

/// Ray-driven projector over a fixed grid: sample points every `step` mm
/// inside the grid's interpolation support, trilinear weights at each.
pub(crate) struct VoxelProjector {
    step: f64,
}

struct RaySamples {
    stencils: Vec<(usize, f64)>,
}

impl VoxelProjector {
    pub(crate) fn new(grid: GridSpec, step_fraction: f64) -> Self {
        let vs = grid.voxel_size();
        VoxelProjector {
            step: step_fraction * vs.iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }

    /// Flattened (voxel index, weight·δ) pairs along the ray.
    fn ray_samples(&self, probe: &VoxelVolume, ray: &Ray) -> RaySamples {
        let mut stencils = Vec::new();
        if let Some((s0, s1)) = probe.clip_ray(ray) {
            let n = ((s1 - s0) / self.step).ceil().max(1.0) as usize;
            let h = (s1 - s0) / n as f64;
            let mut st = [(0usize, 0.0f64); 8];
            for i in 0..n {
                let q = ray.at(s0 + (i as f64 + 0.5) * h);
                let m = probe.trilinear_stencil(&q, &mut st);
                stencils.extend(st[..m].iter().map(|&(idx, w)| (idx, w * h)));
            }
        }
        RaySamples { stencils }
    }

    pub(crate) fn forward(&self, vol: &VoxelVolume, ray: &Ray) -> f64 {
        self.ray_samples(vol, ray)
            .stencils
            .iter()
            .map(|&(i, w)| w * vol.data[i])
            .sum()
    }
}

fn view_rays(proj: &LineIntegralStack, view: usize) -> Vec<Ray> {
    let g = &proj.geometry;
    let angle = g.angles[view];
    let mut rays = Vec::with_capacity(g.n_u * g.n_v);
    for iv in 0..g.n_v {
        for iu in 0..g.n_u {
            let (u, v) = g.pixel_center(iu, iv);
            rays.push(g.detector_ray(angle, u, v));
        }
    }
    rays
}

/// One SART sweep: views in order, each followed by a nonnegativity clamp.
pub(crate) fn sart_sweep(
    proj: &LineIntegralStack,
    projector: &VoxelProjector,
    vol: &mut VoxelVolume,
    relaxation: f64,
) {
    let n = vol.data.len();
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for view in 0..proj.n_views() {
        let measured = proj.image(view);
        let rays = view_rays(proj, view);
        let current = &*vol;
        let samples: Vec<(RaySamples, f64)> = rays
            .par_iter()
            .zip(measured.par_iter())
            .map(|(ray, &b)| {
                let rs = projector.ray_samples(current, ray);
                let (mut fwd, mut len) = (0.0, 0.0);
                for &(i, w) in &rs.stencils {
                    fwd += w * current.data[i];
                    len += w;
                }
                let r = if len > 1e-9 { (b - fwd) / len } else { 0.0 };
                (rs, r)
            })
            .collect();
        num.iter_mut().for_each(|x| *x = 0.0);
        den.iter_mut().for_each(|x| *x = 0.0);
        for (rs, r) in &samples {
            for &(i, w) in &rs.stencils {
                num[i] += w * r;
                den[i] += w;
            }
        }
        for ((x, &a), &d) in vol.data.iter_mut().zip(&num).zip(&den) {
            if d > 1e-9 {
                *x += relaxation * a / d;
            }
        }
        vol.clamp_nonnegative();
    }
}

/// `Σ (measured − forward)²` over every pixel of every view.
pub fn data_residual(proj: &LineIntegralStack, vol: &VoxelVolume, step_fraction: f64) -> f64 {
    let projector = VoxelProjector::new(vol.spec(), step_fraction);
    (0..proj.n_views())
        .map(|view| {
            let rays = view_rays(proj, view);
            rays.par_iter()
                .zip(proj.image(view).par_iter())
                .map(|(ray, &b)| (b - projector.forward(vol, ray)).powi(2))
                .collect::<Vec<f64>>()
                .into_iter()
                .sum::<f64>()
        })
        .sum()
}

/// Forward projection of a voxel volume with the SART projector.
pub fn forward_project(
    vol: &VoxelVolume,
    geom: &crate::geometry::ConeBeamGeometry,
    step_fraction: f64,
) -> LineIntegralStack {
    let projector = VoxelProjector::new(vol.spec(), step_fraction);
    let empty = LineIntegralStack {
        geometry: geom.clone(),
        data: Vec::new(),
    };
    let data = (0..geom.angles.len())
        .flat_map(|view| {
            let rays = view_rays(&empty, view);
            rays.par_iter()
                .map(|ray| projector.forward(vol, ray))
                .collect::<Vec<f64>>()
        })
        .collect();
    LineIntegralStack {
        geometry: geom.clone(),
        data,
    }
}

pub fn sart(proj: &LineIntegralStack, config: &SartConfig) -> Result<VoxelVolume, ReconError> {
    Ok(sart_with_history(proj, config, None, false)?.0)
}

/// SART from an optional starting volume; when `track` is set, also returns
/// the data residual after every sweep.
pub fn sart_with_history(
    proj: &LineIntegralStack,
    config: &SartConfig,
    start: Option<VoxelVolume>,
    track: bool,
) -> Result<(VoxelVolume, Vec<f64>), ReconError> {
    config.validate()?;
    let mut vol = match start {
        Some(v) if v.spec() == config.grid => v,
        Some(_) => return Err(ReconError::InvalidConfig("start volume does not match grid")),
        None => VoxelVolume::zeros(config.grid),
    };
    let projector = VoxelProjector::new(config.grid, config.step_fraction);
    let mut history = Vec::new();
    for _ in 0..config.n_iterations {
        sart_sweep(proj, &projector, &mut vol, config.relaxation);
        if track {
            history.push(data_residual(proj, &vol, config.step_fraction));
        }
    }
    Ok((vol, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{centered_arc, ConeBeamGeometry};
    use crate::phantom::{Ellipsoid, Phantom};

    fn small_geom(views: usize, range: f64) -> ConeBeamGeometry {
        let mut g = ConeBeamGeometry::desk_default(centered_arc(range, views));
        g.n_u = 24;
        g.n_v = 24;
        g.pitch_u = 14.4;
        g.pitch_v = 14.4;
        g
    }

    #[test]
    fn consistent_data_is_a_fixed_point() {
        let grid = GridSpec::cube(12, 64.0);
        let geom = small_geom(6, 180.0);
        let data: Vec<f64> = (0..grid.len()).map(|i| ((i * 37) % 11) as f64 * 0.003).collect();
        let vol = VoxelVolume::from_data(grid, data).unwrap();
        let proj = forward_project(&vol, &geom, 0.5);
        let mut cfg = SartConfig::new(grid);
        cfg.n_iterations = 1;
        let (out, _) = sart_with_history(&proj, &cfg, Some(vol.clone()), false).unwrap();
        for (a, b) in out.data.iter().zip(&vol.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_iteration_on_a_sphere() {
        let grid = GridSpec::cube(32, 64.0);
        let geom = small_geom(12, 180.0);
        let r = 25.0;
        let ph = Phantom::new(vec![Ellipsoid::sphere([0.0; 3], r, 0.02)]).unwrap();
        let proj = crate::projector::project_line_integrals(&ph, &geom, 256, crate::projector::Quadrature::Midpoint).unwrap();
        let mut cfg = SartConfig::new(grid);
        cfg.n_iterations = 1;
        let vol = sart(&proj, &cfg).unwrap();
        assert!(vol.data.iter().all(|&v| v >= 0.0));
        let (imax, _) = vol
            .data
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let (i, j, k) = (imax % 32, (imax / 32) % 32, imax / 1024);
        assert!(grid.center(i, j, k).norm() < r);
    }

    #[test]
    fn residual_decreases_over_first_iterations() {
        let grid = GridSpec::cube(16, 64.0);
        let geom = small_geom(10, 90.0);
        let ph = crate::phantom::shepp_logan(64.0);
        let proj = crate::projector::project_line_integrals(&ph, &geom, 256, crate::projector::Quadrature::Midpoint).unwrap();
        let mut cfg = SartConfig::new(grid);
        cfg.n_iterations = 10;
        let (_, hist) = sart_with_history(&proj, &cfg, None, true).unwrap();
        for w in hist.windows(2) {
            assert!(w[1] <= w[0], "{hist:?}");
        }
    }

    #[test]
    fn rejects_bad_relaxation() {
        let mut cfg = SartConfig::new(GridSpec::cube(4, 1.0));
        cfg.relaxation = 2.0;
        assert!(cfg.validate().is_err());
    }
}

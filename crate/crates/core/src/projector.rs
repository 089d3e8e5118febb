//! Cone-beam projection by ray marching (discretised Beer–Lambert law).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{ConeBeamGeometry, GeometryError, Ray, Vec3};
use crate::phantom::Phantom;
use crate::volume::VoxelVolume;

/// Samples per ray used for simulating projections.
pub const SIMULATION_SAMPLES: usize = 512;

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("non-positive intensity {value} at view {view}, pixel {pixel}")]
    NonPositiveIntensity { view: usize, pixel: usize, value: f64 },
    #[error("projection data has {got} values, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("n_samples must be at least 2")]
    TooFewSamples,
}

/// Anything that can report an attenuation coefficient at a world point.
/// Implementations are read-only during projection and may be shared
/// across worker threads.
pub trait AttenuationSampler: Sync {
    fn attenuation(&self, q: &Vec3) -> f64;
}

impl AttenuationSampler for Phantom {
    fn attenuation(&self, q: &Vec3) -> f64 {
        self.density(q)
    }
}

impl AttenuationSampler for VoxelVolume {
    fn attenuation(&self, q: &Vec3) -> f64 {
        self.sample_trilinear(q)
    }
}

impl<S: AttenuationSampler + ?Sized> AttenuationSampler for &S {
    fn attenuation(&self, q: &Vec3) -> f64 {
        (**self).attenuation(q)
    }
}

/// Sample positions along `[s_near, s_far]`: one per stratum of `n` equal
/// strata, at the stratum midpoint or jittered uniformly within it. Returns
/// `(s_i, δ_i)` with `δ_i = s_{i+1} − s_i` and the last `δ = s_far − s_N`.
pub fn sample_positions<R: Rng + ?Sized>(
    ray: &Ray,
    n: usize,
    mut jitter: Option<&mut R>,
    out: &mut Vec<(f64, f64)>,
) {
    out.clear();
    if !ray.hits_volume() || n == 0 {
        return;
    }
    let h = (ray.s_far - ray.s_near) / n as f64;
    for i in 0..n {
        let f = match jitter.as_deref_mut() {
            Some(rng) => rng.gen::<f64>(),
            None => 0.5,
        };
        out.push((ray.s_near + (i as f64 + f) * h, 0.0));
    }
    for i in 0..n {
        let next = if i + 1 < n { out[i + 1].0 } else { ray.s_far };
        out[i].1 = next - out[i].0;
    }
}

/// Line integral `g = Σ μ_i δ_i` along a ray with midpoint sampling.
pub fn march_ray<S: AttenuationSampler + ?Sized>(sampler: &S, ray: &Ray, n_samples: usize) -> f64 {
    march_ray_with::<S, ChaCha8Rng>(sampler, ray, n_samples, None)
}

pub fn march_ray_with<S: AttenuationSampler + ?Sized, R: Rng + ?Sized>(
    sampler: &S,
    ray: &Ray,
    n_samples: usize,
    jitter: Option<&mut R>,
) -> f64 {
    let mut pts = Vec::with_capacity(n_samples);
    sample_positions(ray, n_samples, jitter, &mut pts);
    pts.iter()
        .map(|&(s, d)| sampler.attenuation(&ray.at(s)) * d)
        .sum()
}

/// `I = I₀·exp(−g)`.
#[inline]
pub fn render_intensity(g: f64, i0: f64) -> f64 {
    i0 * (-g).exp()
}

/// How sample points are placed along simulated rays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quadrature {
    Midpoint,
    /// Stratified jitter; each ray gets its own stream derived from the seed
    /// and its index, so results do not depend on scheduling.
    Jittered { seed: u64 },
}

/// Stack of detector images, `data[view][v][u]` flattened u-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub geometry: ConeBeamGeometry,
    pub i0: f64,
    pub data: Vec<f64>,
}

/// Per-pixel line integrals `g = −ln(I/I₀)`, same layout as [`ProjectionSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct LineIntegralStack {
    pub geometry: ConeBeamGeometry,
    pub data: Vec<f64>,
}

fn image_len(g: &ConeBeamGeometry) -> usize {
    g.n_u * g.n_v
}

impl ProjectionSet {
    pub fn new(geometry: ConeBeamGeometry, i0: f64, data: Vec<f64>) -> Result<Self, ProjectorError> {
        let expected = geometry.angles.len() * image_len(&geometry);
        if data.len() != expected {
            return Err(ProjectorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(ProjectionSet { geometry, i0, data })
    }

    pub fn n_views(&self) -> usize {
        self.geometry.angles.len()
    }

    pub fn image(&self, view: usize) -> &[f64] {
        let n = image_len(&self.geometry);
        &self.data[view * n..(view + 1) * n]
    }

    pub fn pixel(&self, view: usize, iu: usize, iv: usize) -> f64 {
        self.image(view)[iv * self.geometry.n_u + iu]
    }

    /// `g = −ln(I/I₀)` for every pixel.
    pub fn to_line_integrals(&self) -> Result<LineIntegralStack, ProjectorError> {
        let n = image_len(&self.geometry);
        let mut data = Vec::with_capacity(self.data.len());
        for (idx, &value) in self.data.iter().enumerate() {
            if !(value > 0.0) {
                return Err(ProjectorError::NonPositiveIntensity {
                    view: idx / n,
                    pixel: idx % n,
                    value,
                });
            }
            data.push(-(value / self.i0).ln());
        }
        Ok(LineIntegralStack {
            geometry: self.geometry.clone(),
            data,
        })
    }

    /// Keep only the listed views.
    pub fn select_views(&self, views: &[usize]) -> ProjectionSet {
        let mut geometry = self.geometry.clone();
        geometry.angles = views.iter().map(|&v| self.geometry.angles[v]).collect();
        let data = views.iter().flat_map(|&v| self.image(v).to_vec()).collect();
        ProjectionSet {
            geometry,
            i0: self.i0,
            data,
        }
    }
}

impl LineIntegralStack {
    pub fn new(geometry: ConeBeamGeometry, data: Vec<f64>) -> Result<Self, ProjectorError> {
        let expected = geometry.angles.len() * image_len(&geometry);
        if data.len() != expected {
            return Err(ProjectorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(LineIntegralStack { geometry, data })
    }

    pub fn n_views(&self) -> usize {
        self.geometry.angles.len()
    }

    pub fn image(&self, view: usize) -> &[f64] {
        let n = image_len(&self.geometry);
        &self.data[view * n..(view + 1) * n]
    }

    pub fn to_intensities(&self, i0: f64) -> ProjectionSet {
        ProjectionSet {
            geometry: self.geometry.clone(),
            i0,
            data: self.data.iter().map(|&g| render_intensity(g, i0)).collect(),
        }
    }

    /// Bilinear lookup at detector coordinate `(u, v)` of one view; zero
    /// outside the detector.
    pub fn sample(&self, view: usize, u: f64, v: f64) -> f64 {
        bilinear(
            self.image(view),
            self.geometry.n_u,
            self.geometry.n_v,
            u / self.geometry.pitch_u + self.geometry.n_u as f64 / 2.0 - 0.5,
            v / self.geometry.pitch_v + self.geometry.n_v as f64 / 2.0 - 0.5,
        )
    }
}

/// Bilinear interpolation on a row-major image at continuous pixel index
/// `(x, y)`; pixels outside the image read as zero.
pub fn bilinear(img: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    if x <= -1.0 || y <= -1.0 || x >= w as f64 || y >= h as f64 {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
            0.0
        } else {
            img[yi as usize * w + xi as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0))
        + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1))
}

/// Line-integral images of `sampler` for every view of `geom`.
pub fn project_line_integrals<S: AttenuationSampler + ?Sized>(
    sampler: &S,
    geom: &ConeBeamGeometry,
    n_samples: usize,
    quadrature: Quadrature,
) -> Result<LineIntegralStack, ProjectorError> {
    if n_samples < 2 {
        return Err(ProjectorError::TooFewSamples);
    }
    geom.validate()?;
    let (n_u, n_v) = (geom.n_u, geom.n_v);
    let mut data = vec![0.0; geom.angles.len() * n_u * n_v];
    data.par_chunks_mut(n_u)
        .enumerate()
        .for_each(|(row, out)| {
            let view = row / n_v;
            let iv = row % n_v;
            let angle = geom.angles[view];
            let mut pts = Vec::with_capacity(n_samples);
            for (iu, slot) in out.iter_mut().enumerate() {
                let ray = geom.detector_ray(angle, geom.pixel_center(iu, iv).0, geom.pixel_center(iu, iv).1);
                match quadrature {
                    Quadrature::Midpoint => {
                        sample_positions::<ChaCha8Rng>(&ray, n_samples, None, &mut pts)
                    }
                    Quadrature::Jittered { seed } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream((row * n_u + iu) as u64);
                        sample_positions(&ray, n_samples, Some(&mut rng), &mut pts)
                    }
                }
                *slot = pts
                    .iter()
                    .map(|&(s, d)| sampler.attenuation(&ray.at(s)) * d)
                    .sum();
            }
        });
    Ok(LineIntegralStack {
        geometry: geom.clone(),
        data,
    })
}

/// Simulated detector intensities `I₀·exp(−g)` for every view of `geom`.
pub fn simulate_projections<S: AttenuationSampler + ?Sized>(
    sampler: &S,
    geom: &ConeBeamGeometry,
    n_samples: usize,
    i0: f64,
    quadrature: Quadrature,
) -> Result<ProjectionSet, ProjectorError> {
    Ok(project_line_integrals(sampler, geom, n_samples, quadrature)?.to_intensities(i0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::centered_arc;
    use crate::phantom::{shepp_logan, Ellipsoid};
    use crate::volume::GridSpec;

    fn sphere_geom() -> ConeBeamGeometry {
        ConeBeamGeometry::desk_default(centered_arc(90.0, 4))
    }

    #[test]
    fn zero_volume_gives_zero() {
        let vol = VoxelVolume::zeros(GridSpec::cube(8, 64.0));
        let g = sphere_geom();
        let ray = g.pixel_ray(0.3, 31, 31).unwrap();
        assert_eq!(march_ray(&vol, &ray, 64), 0.0);
    }

    #[test]
    fn uniform_sphere_diameter() {
        let ph = Phantom::new(vec![Ellipsoid::sphere([0.0; 3], 50.0, 0.01)]).unwrap();
        let mut g = sphere_geom();
        g.n_u = 65;
        g.n_v = 65;
        g.pitch_u = 5.3;
        g.pitch_v = 5.3;
        let ray = g.pixel_ray(0.0, 32, 32).unwrap();
        assert!((ph.line_integral(&ray) - 1.0).abs() < 1e-12);
        let marched = march_ray(&ph, &ray, 512);
        assert!((marched - 1.0).abs() < 0.02, "{marched}");
    }

    #[test]
    fn render_intensity_examples() {
        assert_eq!(render_intensity(0.0, 3.0), 3.0);
        assert!((render_intensity(2f64.ln(), 1.0) - 0.5).abs() < 1e-15);
        assert!((render_intensity(4.0, 1.0) - 0.018_315_638_888_734_18).abs() < 1e-15);
    }

    #[test]
    fn line_integral_round_trip() {
        let geom = ConeBeamGeometry::desk_default(vec![0.5]);
        let n = geom.n_u * geom.n_v;
        let data: Vec<f64> = (0..n).map(|i| 0.01 + (i as f64 * 0.7).sin().abs()).collect();
        let ps = ProjectionSet::new(geom, 2.0, data.clone()).unwrap();
        let g = ps.to_line_integrals().unwrap();
        let back = g.to_intensities(2.0);
        for (a, b) in back.data.iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }

        let mut flat = ProjectionSet::new(ps.geometry.clone(), 2.0, vec![2.0; n]).unwrap();
        assert!(flat.to_line_integrals().unwrap().data.iter().all(|&x| x == 0.0));
        flat.data[0] = 2.0 / std::f64::consts::E;
        assert!((flat.to_line_integrals().unwrap().data[0] - 1.0).abs() < 1e-15);
        flat.data[5] = 0.0;
        assert!(matches!(
            flat.to_line_integrals(),
            Err(ProjectorError::NonPositiveIntensity { view: 0, pixel: 5, .. })
        ));
    }

    #[test]
    fn empty_phantom_projects_to_i0() {
        let geom = sphere_geom();
        let ps = simulate_projections(&Phantom::default(), &geom, 16, 1.0, Quadrature::Midpoint).unwrap();
        assert_eq!(ps.n_views(), 4);
        assert!(ps.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn centered_sphere_views_are_mirror_images() {
        let ph = Phantom::new(vec![Ellipsoid::sphere([0.0; 3], 40.0, 0.02)]).unwrap();
        let mut geom = ConeBeamGeometry::desk_default(vec![0.3, 2.1]);
        geom.n_u = 32;
        geom.n_v = 32;
        geom.pitch_u = 10.8;
        geom.pitch_v = 10.8;
        let ps = simulate_projections(&ph, &geom, 128, 1.0, Quadrature::Midpoint).unwrap();
        for iv in 0..32 {
            for iu in 0..32 {
                let a = ps.pixel(0, iu, iv);
                let b = ps.pixel(1, 31 - iu, iv);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adding_density_never_brightens() {
        let geom = sphere_geom();
        let base = shepp_logan(64.0);
        let mut more = base.clone();
        more.ellipsoids.push(Ellipsoid::sphere([10.0, -5.0, 3.0], 15.0, 0.01));
        let a = simulate_projections(&base, &geom, 64, 1.0, Quadrature::Midpoint).unwrap();
        let b = simulate_projections(&more, &geom, 64, 1.0, Quadrature::Midpoint).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| y <= x));
        assert!(a.data.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn jittered_simulation_is_deterministic() {
        let geom = sphere_geom();
        let ph = shepp_logan(64.0);
        let q = Quadrature::Jittered { seed: 5 };
        let a = project_line_integrals(&ph, &geom, 32, q).unwrap();
        let b = project_line_integrals(&ph, &geom, 32, q).unwrap();
        assert_eq!(a, b);
        let c = project_line_integrals(&ph, &geom, 32, Quadrature::Midpoint).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_positions_cover_the_segment() {
        let ray = Ray {
            origin: Vec3::zeros(),
            direction: Vec3::x(),
            s_near: 2.0,
            s_far: 10.0,
        };
        let mut pts = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        sample_positions(&ray, 8, Some(&mut rng), &mut pts);
        assert_eq!(pts.len(), 8);
        for (i, &(s, _)) in pts.iter().enumerate() {
            assert!(s >= 2.0 + i as f64 && s < 3.0 + i as f64);
        }
        let last = pts[7];
        assert!((last.0 + last.1 - 10.0).abs() < 1e-12);
        let total: f64 = pts.iter().map(|p| p.1).sum();
        assert!((total - (10.0 - pts[0].0)).abs() < 1e-12);
    }
}

//! Analytic ellipsoid phantoms.
//!
//! A phantom is a list of ellipsoids whose densities add where they overlap
//! (negative densities carve out nested regions). Densities are attenuation
//! coefficients in mm⁻¹; built-in phantoms are scaled so the densest straight
//! path through them integrates to [`TARGET_MAX_LINE_INTEGRAL`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Ray, Vec3};
use crate::volume::{GridSpec, VoxelVolume};

/// Largest line integral through a built-in phantom (`e⁻⁴ ≈ 0.018`).
pub const TARGET_MAX_LINE_INTEGRAL: f64 = 4.0;

pub const BUILTIN_PHANTOMS: &[&str] = &["shepp-logan", "lung"];

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("unknown phantom '{0}', built-ins are: shepp-logan, lung")]
    UnknownPhantom(String),
    #[error("ellipsoid {index}: {reason}")]
    InvalidEllipsoid { index: usize, reason: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Row-major body→world rotation.
    pub rotation: [[f64; 3]; 3],
    pub density: f64,
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Ellipsoid {
    pub fn sphere(center: [f64; 3], radius: f64, density: f64) -> Self {
        Ellipsoid {
            center,
            semi_axes: [radius; 3],
            rotation: IDENTITY,
            density,
        }
    }

    /// Axis-aligned ellipsoid rotated by `phi` radians about `z`.
    pub fn rotated_z(center: [f64; 3], semi_axes: [f64; 3], phi: f64, density: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Ellipsoid {
            center,
            semi_axes,
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            density,
        }
    }

    /// Point in the body frame scaled so the ellipsoid becomes the unit ball.
    #[inline]
    fn to_unit(&self, q: &Vec3) -> Vec3 {
        let d = [q[0] - self.center[0], q[1] - self.center[1], q[2] - self.center[2]];
        let r = &self.rotation;
        Vec3::new(
            (r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2]) / self.semi_axes[0],
            (r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2]) / self.semi_axes[1],
            (r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2]) / self.semi_axes[2],
        )
    }

    #[inline]
    fn dir_to_unit(&self, d: &Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            (r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2]) / self.semi_axes[0],
            (r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2]) / self.semi_axes[1],
            (r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2]) / self.semi_axes[2],
        )
    }

    #[inline]
    pub fn contains(&self, q: &Vec3) -> bool {
        self.to_unit(q).norm_squared() <= 1.0
    }

    /// Length of the part of `[s0, s1]` on the ray that lies inside.
    pub fn chord(&self, ray: &Ray, s0: f64, s1: f64) -> f64 {
        let o = self.to_unit(&ray.origin);
        let d = self.dir_to_unit(&ray.direction);
        let a = d.norm_squared();
        let b = o.dot(&d);
        let c = o.norm_squared() - 1.0;
        let disc = b * b - a * c;
        if disc <= 0.0 {
            return 0.0;
        }
        let root = disc.sqrt();
        let lo = ((-b - root) / a).max(s0);
        let hi = ((-b + root) / a).min(s1);
        (hi - lo).max(0.0)
    }

    fn validate(&self, index: usize) -> Result<(), PhantomError> {
        if !self.semi_axes.iter().all(|&a| a > 0.0 && a.is_finite()) {
            return Err(PhantomError::InvalidEllipsoid {
                index,
                reason: "semi-axes must be positive",
            });
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(PhantomError::InvalidEllipsoid {
                        index,
                        reason: "rotation is not orthonormal",
                    });
                }
            }
        }
        if !self.density.is_finite() {
            return Err(PhantomError::InvalidEllipsoid {
                index,
                reason: "density must be finite",
            });
        }
        Ok(())
    }
}

/// A list of additive ellipsoids. Serialises as a bare JSON array.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Phantom {
    pub ellipsoids: Vec<Ellipsoid>,
}

impl Phantom {
    pub fn new(ellipsoids: Vec<Ellipsoid>) -> Result<Self, PhantomError> {
        for (i, e) in ellipsoids.iter().enumerate() {
            e.validate(i)?;
        }
        Ok(Phantom { ellipsoids })
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        for (i, e) in self.ellipsoids.iter().enumerate() {
            e.validate(i)?;
        }
        Ok(())
    }

    pub fn density(&self, q: &Vec3) -> f64 {
        self.ellipsoids
            .iter()
            .filter(|e| e.contains(q))
            .map(|e| e.density)
            .sum()
    }

    /// Exact `∫μ ds` over the ray's `[s_near, s_far]`.
    pub fn line_integral(&self, ray: &Ray) -> f64 {
        if !ray.hits_volume() {
            return 0.0;
        }
        self.ellipsoids
            .iter()
            .map(|e| e.density * e.chord(ray, ray.s_near, ray.s_far))
            .sum()
    }

    pub fn rasterize(&self, spec: GridSpec) -> VoxelVolume {
        let [nx, ny, _] = spec.dims;
        let mut vol = VoxelVolume::zeros(spec);
        vol.data
            .par_chunks_mut(nx * ny)
            .enumerate()
            .for_each(|(k, plane)| {
                for j in 0..ny {
                    for i in 0..nx {
                        plane[i + nx * j] = self.density(&spec.center(i, j, k));
                    }
                }
            });
        vol
    }

    pub fn scaled_density(mut self, factor: f64) -> Self {
        for e in &mut self.ellipsoids {
            e.density *= factor;
        }
        self
    }

    /// Largest line integral over axis-parallel rays on a 97×97 grid per
    /// axis, spanning the phantom's bounding box.
    pub fn max_axis_line_integral(&self) -> f64 {
        let reach = self
            .ellipsoids
            .iter()
            .map(|e| {
                let c = Vec3::from(e.center);
                c.norm() + e.semi_axes.iter().cloned().fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if reach == 0.0 {
            return 0.0;
        }
        let n = 97;
        let mut best: f64 = 0.0;
        for axis in 0..3 {
            let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
            for i in 0..n {
                for j in 0..n {
                    let mut o = Vec3::zeros();
                    o[axis] = -2.0 * reach;
                    o[a1] = reach * (2.0 * i as f64 / (n - 1) as f64 - 1.0);
                    o[a2] = reach * (2.0 * j as f64 / (n - 1) as f64 - 1.0);
                    let mut d = Vec3::zeros();
                    d[axis] = 1.0;
                    let ray = Ray {
                        origin: o,
                        direction: d,
                        s_near: 0.0,
                        s_far: 4.0 * reach,
                    };
                    best = best.max(self.line_integral(&ray));
                }
            }
        }
        best
    }

    fn normalized(self) -> Self {
        let m = self.max_axis_line_integral();
        if m > 0.0 {
            self.scaled_density(TARGET_MAX_LINE_INTEGRAL / m)
        } else {
            self
        }
    }
}

/// Modified (high-contrast) 3D Shepp–Logan head in normalised units:
/// `(density, semi-axes a b c, centre x y z, rotation about z in degrees)`.
pub const SHEPP_LOGAN_TABLE: [(f64, [f64; 3], [f64; 3], f64); 10] = [
    (1.0, [0.6900, 0.920, 0.810], [0.0, 0.0, 0.0], 0.0),
    (-0.8, [0.6624, 0.874, 0.780], [0.0, -0.0184, 0.0], 0.0),
    (-0.2, [0.1100, 0.310, 0.220], [0.22, 0.0, 0.0], -18.0),
    (-0.2, [0.1600, 0.410, 0.280], [-0.22, 0.0, 0.0], 18.0),
    (0.1, [0.2100, 0.250, 0.410], [0.0, 0.35, -0.15], 0.0),
    (0.1, [0.0460, 0.046, 0.050], [0.0, 0.1, 0.25], 0.0),
    (0.1, [0.0460, 0.046, 0.050], [0.0, -0.1, 0.25], 0.0),
    (0.1, [0.0460, 0.023, 0.050], [-0.08, -0.605, 0.0], 0.0),
    (0.1, [0.0230, 0.023, 0.020], [0.0, -0.606, 0.0], 0.0),
    (0.1, [0.0230, 0.046, 0.020], [0.06, -0.605, 0.0], 0.0),
];

fn from_table(rows: &[(f64, [f64; 3], [f64; 3], f64)], scale: f64) -> Phantom {
    let ellipsoids = rows
        .iter()
        .map(|(density, axes, center, phi)| {
            Ellipsoid::rotated_z(
                center.map(|c| c * scale),
                axes.map(|a| a * scale),
                phi.to_radians(),
                *density,
            )
        })
        .collect();
    Phantom { ellipsoids }
}

/// Table densities unscaled, geometry scaled by `half_extent` (mm).
pub fn shepp_logan_raw(half_extent: f64) -> Phantom {
    from_table(&SHEPP_LOGAN_TABLE, half_extent)
}

pub fn shepp_logan(half_extent: f64) -> Phantom {
    shepp_logan_raw(half_extent).normalized()
}

/// Chest-like phantom: soft-tissue body, two low-density lungs with a dense
/// spine between them, and small dense nodules scattered inside the lungs.
pub const LUNG_TABLE: [(f64, [f64; 3], [f64; 3], f64); 13] = [
    (1.0, [0.85, 0.62, 0.85], [0.0, 0.0, 0.0], 0.0),
    (-0.8, [0.30, 0.42, 0.66], [-0.40, 0.04, 0.0], 8.0),
    (-0.8, [0.30, 0.42, 0.66], [0.40, 0.04, 0.0], -8.0),
    (0.9, [0.09, 0.09, 0.80], [0.0, -0.46, 0.0], 0.0),
    (0.3, [0.16, 0.13, 0.30], [0.02, 0.20, -0.10], 20.0),
    (1.0, [0.06, 0.06, 0.06], [-0.45, 0.15, 0.30], 0.0),
    (1.0, [0.05, 0.05, 0.05], [-0.30, -0.10, -0.25], 0.0),
    (1.0, [0.08, 0.07, 0.08], [-0.50, -0.05, -0.05], 0.0),
    (1.0, [0.04, 0.04, 0.04], [-0.35, 0.25, -0.45], 0.0),
    (1.0, [0.07, 0.07, 0.06], [0.45, 0.10, 0.25], 0.0),
    (1.0, [0.05, 0.05, 0.05], [0.32, -0.18, -0.30], 0.0),
    (1.0, [0.04, 0.04, 0.04], [0.52, -0.02, -0.10], 0.0),
    (1.0, [0.06, 0.05, 0.06], [0.38, 0.22, 0.48], 0.0),
];

pub fn lung_like(half_extent: f64) -> Phantom {
    from_table(&LUNG_TABLE, half_extent).normalized()
}

pub fn builtin(name: &str, half_extent: f64) -> Result<Phantom, PhantomError> {
    match name {
        "shepp-logan" | "shepp_logan" => Ok(shepp_logan(half_extent)),
        "lung" | "lung-like" => Ok(lung_like(half_extent)),
        other => Err(PhantomError::UnknownPhantom(other.to_string())),
    }
}

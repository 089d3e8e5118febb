//! Dense voxel grids of attenuation values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Ray, Vec3};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume dimensions must be at least 2 per axis, got {0:?}")]
    BadDims([usize; 3]),
    #[error("data length {got} does not match dims {dims:?}")]
    LengthMismatch { dims: [usize; 3], got: usize },
    #[error("volume contains non-finite values")]
    NonFinite,
}

/// Voxel grid centred on the world origin. `data` is x-fastest, z-slowest.
/// Voxel `(i, j, k)` has its centre at `extent·((2i+1)/n − 1)` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub dims: [usize; 3],
    /// Physical half-size per axis (mm).
    pub extent: [f64; 3],
    pub data: Vec<f64>,
}

/// Shape of a voxel grid, used wherever a reconstructor needs to know what to
/// produce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub extent: [f64; 3],
}

impl GridSpec {
    pub fn cube(n: usize, half_extent: f64) -> Self {
        GridSpec {
            dims: [n; 3],
            extent: [half_extent; 3],
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 2.0 * self.extent[a] / self.dims[a] as f64)
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let c = |idx: usize, a: usize| {
            self.extent[a] * ((2 * idx + 1) as f64 / self.dims[a] as f64 - 1.0)
        };
        Vec3::new(c(i, 0), c(j, 1), c(k, 2))
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Radius of the sphere circumscribing the grid box.
    pub fn circumradius(&self) -> f64 {
        self.extent.iter().map(|e| e * e).sum::<f64>().sqrt()
    }
}

impl VoxelVolume {
    pub fn zeros(spec: GridSpec) -> Self {
        VoxelVolume {
            dims: spec.dims,
            extent: spec.extent,
            data: vec![0.0; spec.len()],
        }
    }

    pub fn from_data(spec: GridSpec, data: Vec<f64>) -> Result<Self, VolumeError> {
        if spec.dims.iter().any(|&d| d < 2) {
            return Err(VolumeError::BadDims(spec.dims));
        }
        if data.len() != spec.len() {
            return Err(VolumeError::LengthMismatch {
                dims: spec.dims,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite);
        }
        Ok(VoxelVolume {
            dims: spec.dims,
            extent: spec.extent,
            data,
        })
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            dims: self.dims,
            extent: self.extent,
        }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.spec().index(i, j, k)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Continuous voxel coordinate of a world point along each axis; voxel
    /// centres sit at integer values.
    #[inline]
    fn continuous_index(&self, q: &Vec3) -> [f64; 3] {
        [0, 1, 2].map(|a| (q[a] / self.extent[a] + 1.0) * 0.5 * self.dims[a] as f64 - 0.5)
    }

    /// Trilinear weights and flat indices of the (up to) eight voxels around
    /// `q`. Voxels outside the grid count as zero and are omitted.
    #[inline]
    pub fn trilinear_stencil(&self, q: &Vec3, out: &mut [(usize, f64); 8]) -> usize {
        let c = self.continuous_index(q);
        let mut base = [0isize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if c[a] <= -1.0 || c[a] >= self.dims[a] as f64 {
                return 0;
            }
            let f = c[a].floor();
            base[a] = f as isize;
            frac[a] = c[a] - f;
        }
        let mut n = 0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                let p = base[a] + bit as isize;
                if p < 0 || p >= self.dims[a] as isize {
                    inside = false;
                    break;
                }
                idx[a] = p as usize;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if inside && w > 0.0 {
                out[n] = (idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2]), w);
                n += 1;
            }
        }
        n
    }

    /// Trilinear interpolation with zero padding outside the grid.
    #[inline]
    pub fn sample_trilinear(&self, q: &Vec3) -> f64 {
        let mut st = [(0usize, 0.0f64); 8];
        let n = self.trilinear_stencil(q, &mut st);
        st[..n].iter().map(|&(i, w)| w * self.data[i]).sum()
    }

    /// Parameter interval where a ray overlaps the interpolation support of
    /// the grid (the box grown by half a voxel per side), intersected with
    /// the ray's own `[s_near, s_far]`.
    #[allow(clippy::needless_range_loop)]
    pub fn clip_ray(&self, ray: &Ray) -> Option<(f64, f64)> {
        let vs = self.spec().voxel_size();
        let mut lo = ray.s_near;
        let mut hi = ray.s_far;
        for a in 0..3 {
            let h = self.extent[a] + 0.5 * vs[a];
            let o = ray.origin[a];
            let d = ray.direction[a];
            if d.abs() < 1e-15 {
                if o.abs() > h {
                    return None;
                }
                continue;
            }
            let t0 = (-h - o) / d;
            let t1 = (h - o) / d;
            lo = lo.max(t0.min(t1));
            hi = hi.min(t0.max(t1));
        }
        (hi > lo).then_some((lo, hi))
    }

    pub fn clamp_nonnegative(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    /// One axis-aligned slice as a row-major 2D image. `axis` is 0, 1 or 2;
    /// the remaining two axes keep their natural order (fastest first).
    pub fn slice(&self, axis: usize, index: usize) -> Option<(usize, usize, Vec<f64>)> {
        if axis > 2 || index >= self.dims[axis] {
            return None;
        }
        let [nx, ny, nz] = self.dims;
        let (w, h) = match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        };
        let mut img = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let (i, j, k) = match axis {
                    0 => (index, c, r),
                    1 => (c, index, r),
                    _ => (c, r, index),
                };
                img.push(self.data[i + nx * (j + ny * k)]);
            }
        }
        Some((w, h, img))
    }
}

//! Smoothed isotropic total variation on a voxel grid.
//!
//! Forward differences with a zero difference at the last index of each axis:
//! `TV(x) = Σ_v sqrt(dx² + dy² + dz² + η)`.

use crate::volume::VoxelVolume;

pub const TV_SMOOTHING: f64 = 1e-8;

#[inline]
fn diffs(x: &[f64], dims: [usize; 3], i: usize, j: usize, k: usize) -> [f64; 3] {
    let [nx, ny, nz] = dims;
    let at = |i: usize, j: usize, k: usize| x[i + nx * (j + ny * k)];
    let c = at(i, j, k);
    [
        if i + 1 < nx { at(i + 1, j, k) - c } else { 0.0 },
        if j + 1 < ny { at(i, j + 1, k) - c } else { 0.0 },
        if k + 1 < nz { at(i, j, k + 1) - c } else { 0.0 },
    ]
}

pub fn tv_value(vol: &VoxelVolume) -> f64 {
    let [nx, ny, nz] = vol.dims;
    let mut total = 0.0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let d = diffs(&vol.data, vol.dims, i, j, k);
                total += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + TV_SMOOTHING).sqrt();
            }
        }
    }
    total
}

/// Exact gradient of [`tv_value`] with respect to every voxel.
pub fn tv_gradient(vol: &VoxelVolume) -> Vec<f64> {
    let [nx, ny, nz] = vol.dims;
    let mut g = vec![0.0; vol.data.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let d = diffs(&vol.data, vol.dims, i, j, k);
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + TV_SMOOTHING).sqrt();
                let idx = i + nx * (j + ny * k);
                // Each difference is (neighbour − centre); a zeroed boundary
                // difference contributes nothing.
                if i + 1 < nx {
                    g[idx + 1] += d[0] / n;
                    g[idx] -= d[0] / n;
                }
                if j + 1 < ny {
                    g[idx + nx] += d[1] / n;
                    g[idx] -= d[1] / n;
                }
                if k + 1 < nz {
                    g[idx + nx * ny] += d[2] / n;
                    g[idx] -= d[2] / n;
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridSpec;

    fn random_volume(dims: [usize; 3], seed: u64) -> VoxelVolume {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let spec = GridSpec {
            dims,
            extent: [1.0; 3],
        };
        let data = (0..spec.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        VoxelVolume::from_data(spec, data).unwrap()
    }

    #[test]
    fn constant_volume_has_tiny_tv_and_zero_gradient() {
        let vol = VoxelVolume::from_data(GridSpec::cube(4, 1.0), vec![0.3; 64]).unwrap();
        assert!((tv_value(&vol) - 64.0 * TV_SMOOTHING.sqrt()).abs() < 1e-12);
        assert!(tv_gradient(&vol).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut vol = random_volume([5, 4, 3], 11);
        let g = tv_gradient(&vol);
        let h = 1e-6;
        for (idx, &gi) in g.iter().enumerate() {
            let x0 = vol.data[idx];
            vol.data[idx] = x0 + h;
            let fp = tv_value(&vol);
            vol.data[idx] = x0 - h;
            let fm = tv_value(&vol);
            vol.data[idx] = x0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - gi).abs() <= 1e-5 * fd.abs().max(1e-3), "{idx}: {fd} vs {gi}");
        }
    }

    #[test]
    fn gradient_is_local() {
        // Perturbing one voxel only changes the gradient within its
        // 6-neighbourhood and the backward neighbours' own stencils.
        let vol = random_volume([6, 6, 6], 3);
        let g0 = tv_gradient(&vol);
        let mut pert = vol.clone();
        let (pi, pj, pk) = (3, 3, 3);
        pert.data[pi + 6 * (pj + 6 * pk)] += 0.5;
        let g1 = tv_gradient(&pert);
        for k in 0..6usize {
            for j in 0..6usize {
                for i in 0..6usize {
                    let dist = i.abs_diff(pi) + j.abs_diff(pj) + k.abs_diff(pk);
                    let idx = i + 6 * (j + 6 * k);
                    if dist > 2 {
                        assert_eq!(g0[idx], g1[idx]);
                    }
                }
            }
        }
    }
}

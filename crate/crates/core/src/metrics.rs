//! Image quality metrics against a ground-truth volume.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::VoxelVolume;

pub const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("volume shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("ground truth is constant, dynamic range is zero")]
    ZeroRange,
    #[error("volume {0:?} is smaller than the SSIM window")]
    TooSmall([usize; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
}

fn check(recon: &VoxelVolume, truth: &VoxelVolume) -> Result<f64, MetricError> {
    if recon.dims != truth.dims {
        return Err(MetricError::ShapeMismatch(recon.dims, truth.dims));
    }
    let (lo, hi) = truth.min_max();
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(MetricError::ZeroRange);
    }
    Ok(range)
}

/// Peak signal-to-noise ratio in dB, with the truth's dynamic range as peak.
/// Identical volumes give `+∞`.
pub fn psnr(recon: &VoxelVolume, truth: &VoxelVolume) -> Result<f64, MetricError> {
    let range = check(recon, truth)?;
    let mse = recon
        .data
        .iter()
        .zip(&truth.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / truth.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Summed-volume table with a zero border: `t[(i,j,k)]` is the sum over
/// `[0,i)×[0,j)×[0,k)`.
struct Integral {
    dims: [usize; 3],
    t: Vec<f64>,
}

impl Integral {
    fn new(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let [nx, ny, nz] = dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let mut t = vec![0.0; sx * sy * (nz + 1)];
        for k in 0..nz {
            for j in 0..ny {
                let mut row = 0.0;
                for i in 0..nx {
                    row += f(i + nx * (j + ny * k));
                    let o = (i + 1) + sx * ((j + 1) + sy * (k + 1));
                    t[o] = row + t[o - sx] + t[o - sx * sy] - t[o - sx - sx * sy];
                }
            }
        }
        Integral { dims, t }
    }

    fn window(&self, i: usize, j: usize, k: usize, w: usize) -> f64 {
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let at = |a: usize, b: usize, c: usize| self.t[a + sx * (b + sy * c)];
        let (i1, j1, k1) = (i + w, j + w, k + w);
        at(i1, j1, k1) - at(i, j1, k1) - at(i1, j, k1) - at(i1, j1, k) + at(i, j, k1) + at(i, j1, k)
            + at(i1, j, k)
            - at(i, j, k)
    }
}

/// Mean structural similarity over all fully contained 7³ uniform windows,
/// with population statistics and the truth's dynamic range.
pub fn ssim(recon: &VoxelVolume, truth: &VoxelVolume) -> Result<f64, MetricError> {
    let range = check(recon, truth)?;
    let dims = truth.dims;
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(MetricError::TooSmall(dims));
    }
    let (x, y) = (&recon.data, &truth.data);
    let sx = Integral::new(dims, |i| x[i]);
    let sy = Integral::new(dims, |i| y[i]);
    let sxx = Integral::new(dims, |i| x[i] * x[i]);
    let syy = Integral::new(dims, |i| y[i] * y[i]);
    let sxy = Integral::new(dims, |i| x[i] * y[i]);
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let w = SSIM_WINDOW;
    let n = (w * w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..=dims[2] - w {
        for j in 0..=dims[1] - w {
            for i in 0..=dims[0] - w {
                let mx = sx.window(i, j, k, w) / n;
                let my = sy.window(i, j, k, w) / n;
                let vx = sxx.window(i, j, k, w) / n - mx * mx;
                let vy = syy.window(i, j, k, w) / n - my * my;
                let cxy = sxy.window(i, j, k, w) / n - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub fn evaluate(recon: &VoxelVolume, truth: &VoxelVolume) -> Result<MetricReport, MetricError> {
    Ok(MetricReport {
        psnr: psnr(recon, truth)?,
        ssim: ssim(recon, truth)?,
    })
}

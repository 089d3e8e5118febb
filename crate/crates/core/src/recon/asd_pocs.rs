//! Adaptive steepest descent with projection onto convex sets: SART sweeps
//! interleaved with normalized TV descent.

use serde::{Deserialize, Serialize};

use super::sart::{sart_sweep, SartConfig, VoxelProjector};
use super::tv::tv_gradient;
use super::ReconError;
use crate::projector::LineIntegralStack;
use crate::volume::VoxelVolume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsdPocsConfig {
    pub sart: SartConfig,
    pub n_tv_steps: usize,
    /// TV step length relative to the size of the preceding SART update.
    pub tv_step_ratio: f64,
    /// Geometric decay of the TV step from one outer iteration to the next.
    pub tv_reduction: f64,
}

impl AsdPocsConfig {
    pub fn new(sart: SartConfig) -> Self {
        AsdPocsConfig {
            sart,
            n_tv_steps: 20,
            tv_step_ratio: 0.2,
            tv_reduction: 0.95,
        }
    }

    pub fn validate(&self) -> Result<(), ReconError> {
        self.sart.validate()?;
        if !(self.tv_step_ratio >= 0.0) {
            return Err(ReconError::InvalidConfig("tv_step_ratio must be nonnegative"));
        }
        if !(self.tv_reduction > 0.0 && self.tv_reduction < 1.0) {
            return Err(ReconError::InvalidConfig("tv_reduction must lie in (0, 1)"));
        }
        Ok(())
    }
}

pub fn asd_pocs(proj: &LineIntegralStack, config: &AsdPocsConfig) -> Result<VoxelVolume, ReconError> {
    config.validate()?;
    let sc = &config.sart;
    let projector = VoxelProjector::new(sc.grid, sc.step_fraction);
    let mut vol = VoxelVolume::zeros(sc.grid);
    let mut before = vol.data.clone();
    let mut decay = 1.0;
    for _ in 0..sc.n_iterations {
        before.copy_from_slice(&vol.data);
        sart_sweep(proj, &projector, &mut vol, sc.relaxation);
        if config.n_tv_steps == 0 {
            continue;
        }
        let dp = vol
            .data
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let step = config.tv_step_ratio * dp * decay;
        decay *= config.tv_reduction;
        for _ in 0..config.n_tv_steps {
            let g = tv_gradient(&vol);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (x, gi) in vol.data.iter_mut().zip(&g) {
                    *x -= step * gi / norm;
                }
            }
        }
        vol.clamp_nonnegative();
    }
    Ok(vol)
}

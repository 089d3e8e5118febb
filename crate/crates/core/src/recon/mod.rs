//! Classical reconstructors: FDK, SART and ASD-POCS.

mod asd_pocs;
mod fdk;
mod sart;
mod tv;

use thiserror::Error;

pub use asd_pocs::{asd_pocs, AsdPocsConfig};
pub use fdk::fdk;
pub use sart::{data_residual, forward_project, sart, sart_with_history, SartConfig};
pub use tv::{tv_gradient, tv_value, TV_SMOOTHING};

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("reconstruction needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}

/// Angular integration weight per view: half the gap to each neighbour, with
/// the end views mirroring their single neighbour gap.
pub(crate) fn view_weights(angles: &[f64]) -> Vec<f64> {
    let n = angles.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { angles[i] - angles[i - 1] } else { angles[1] - angles[0] };
            let right = if i + 1 < n { angles[i + 1] - angles[i] } else { angles[n - 1] - angles[n - 2] };
            0.5 * (left.abs() + right.abs())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_views_get_uniform_weights() {
        let a: Vec<f64> = (0..5).map(|i| 0.1 + 0.2 * i as f64).collect();
        for w in view_weights(&a) {
            assert!((w - 0.2).abs() < 1e-12);
        }
    }
}

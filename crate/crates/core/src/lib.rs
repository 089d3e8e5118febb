//! Limited-angle cone-beam CT reconstruction.
//!
//! The crate simulates cone-beam projections of analytic phantoms,
//! reconstructs them with classical methods (FDK, SART, ASD-POCS) and with a
//! neural attenuation field trained against the projections, optionally
//! regularised by epipolar consistency between predicted views, and scores
//! reconstructions with PSNR and SSIM.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod experiment;
pub mod field;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod trainer;
pub mod volume;

pub use experiment::{ExperimentSpec, Method};
pub use field::{FieldConfig, FieldModel};
pub use geometry::{ConeBeamGeometry, EpipolarLine, EpipolarSample, GeometryError, Ray, Vec3};
pub use losses::{EccBatch, EccDomain, RayBatch};
pub use metrics::{MetricError, MetricReport};
pub use phantom::{Ellipsoid, Phantom};
pub use projector::{AttenuationSampler, LineIntegralStack, ProjectionSet};
pub use trainer::{train, TrainConfig, TrainReport, TrainState};
pub use volume::{GridSpec, VoxelVolume};

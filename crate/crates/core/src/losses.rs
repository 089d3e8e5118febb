//! Training objectives: projection matching over a batch of detector rays and
//! epipolar consistency between corresponding lines of two predicted views.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{Tape, Var};
use crate::geometry::{ConeBeamGeometry, EpipolarLine, EpipolarSample, Ray, Vec3};
use crate::projector::{sample_positions, AttenuationSampler, Quadrature};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("sample index {index} out of range for {n_s} samples")]
    IndexOutOfRange { index: usize, n_s: usize },
}

/// Detector pixel a training ray came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelId {
    pub view: usize,
    pub iu: usize,
    pub iv: usize,
}

#[derive(Debug, Clone)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub pixels: Vec<PixelId>,
    /// Measured intensities, same units as `i0`.
    pub measured: Vec<f64>,
    pub i0: f64,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct EccBatch {
    pub samples: Vec<EpipolarSample>,
}

/// Which image the consistency condition is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EccDomain {
    /// Cosine-weighted line integrals `g`.
    #[default]
    LineIntegral,
    /// Cosine-weighted normalized intensities `exp(−g)`.
    Intensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

/// Renders the line integral of each ray on the tape, evaluating all sample
/// points in one batched field pass.
pub fn render_line_integrals(tape: &mut Tape, rays: &[Ray], n_samples: usize, quadrature: Quadrature) -> Vec<Var> {
    let mut points: Vec<Vec3> = Vec::with_capacity(rays.len() * n_samples);
    let mut deltas: Vec<f64> = Vec::with_capacity(rays.len() * n_samples);
    let mut counts = Vec::with_capacity(rays.len());
    let mut pts = Vec::with_capacity(n_samples);
    for (i, ray) in rays.iter().enumerate() {
        match quadrature {
            Quadrature::Midpoint => sample_positions::<ChaCha8Rng>(ray, n_samples, None, &mut pts),
            Quadrature::Jittered { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                sample_positions(ray, n_samples, Some(&mut rng), &mut pts);
            }
        }
        counts.push(pts.len());
        for &(s, d) in &pts {
            points.push(ray.at(s));
            deltas.push(d);
        }
    }
    let mu = tape.field(&points);
    let mut out = Vec::with_capacity(rays.len());
    let mut off = 0;
    let mut terms = Vec::with_capacity(n_samples);
    for n in counts {
        terms.clear();
        terms.extend((off..off + n).map(|k| (mu[k], deltas[k])));
        out.push(tape.weighted_sum(&terms));
        off += n;
    }
    out
}

/// Mean squared difference between rendered `I₀·exp(−g)` and the measured
/// intensities.
pub fn recon_loss(tape: &mut Tape, batch: &RayBatch, n_samples: usize, quadrature: Quadrature) -> Var {
    let g = render_line_integrals(tape, &batch.rays, n_samples, quadrature);
    let sq: Vec<Var> = g
        .iter()
        .zip(&batch.measured)
        .map(|(&gi, &m)| {
            let neg = tape.scale(gi, -1.0);
            let e = tape.exp(neg);
            let pred = tape.scale(e, batch.i0);
            let target = tape.constant(m);
            let d = tape.sub(pred, target);
            tape.square(d)
        })
        .collect();
    tape.mean(&sq)
}

fn line_rays(geom: &ConeBeamGeometry, line: &EpipolarLine) -> Vec<Ray> {
    line.plus
        .iter()
        .chain(&line.minus)
        .map(|s| geom.detector_ray(line.view, s.u, s.v))
        .collect()
}

/// Weight of each rendered value in `Σ_j Δ_j·δ`, plus-line samples first.
fn line_weights(line: &EpipolarLine, epsilon: f64) -> Vec<f64> {
    let k = line.delta / (2.0 * epsilon);
    line.plus
        .iter()
        .map(|s| s.weight * k)
        .chain(line.minus.iter().map(|s| -s.weight * k))
        .collect()
}

/// `(Σ_j Δ_a,j·δ_a, Σ_j Δ_b,j·δ_b)` on the tape, with view b's side already
/// multiplied by the sample's orientation.
pub fn ecc_sides(
    tape: &mut Tape,
    geom: &ConeBeamGeometry,
    sample: &EpipolarSample,
    n_samples: usize,
    domain: EccDomain,
) -> (Var, Var) {
    let mut rays = line_rays(geom, &sample.a);
    rays.extend(line_rays(geom, &sample.b));
    let mut values = render_line_integrals(tape, &rays, n_samples, Quadrature::Midpoint);
    if domain == EccDomain::Intensity {
        for v in &mut values {
            let neg = tape.scale(*v, -1.0);
            *v = tape.exp(neg);
        }
    }
    let wa = line_weights(&sample.a, sample.epsilon);
    let wb: Vec<f64> = line_weights(&sample.b, sample.epsilon)
        .into_iter()
        .map(|w| w * sample.orientation)
        .collect();
    let na = wa.len();
    let ta: Vec<(Var, f64)> = values[..na].iter().copied().zip(wa).collect();
    let tb: Vec<(Var, f64)> = values[na..].iter().copied().zip(wb).collect();
    (tape.weighted_sum(&ta), tape.weighted_sum(&tb))
}

/// Mean over samples of the squared difference of the two derivative sums.
pub fn ecc_loss(tape: &mut Tape, geom: &ConeBeamGeometry, batch: &EccBatch, n_samples: usize, domain: EccDomain) -> Var {
    let terms: Vec<Var> = batch
        .samples
        .iter()
        .map(|s| {
            let (a, b) = ecc_sides(tape, geom, s, n_samples, domain);
            let d = tape.sub(a, b);
            tape.square(d)
        })
        .collect();
    tape.mean(&terms)
}

pub struct LossTerms {
    pub total: Var,
    pub recon: Var,
    pub ecc: Option<Var>,
}

/// `recon + λ·ecc` on one tape. Without an ECC batch, or with `λ = 0`, the
/// total is the reconstruction node itself.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    geom: &ConeBeamGeometry,
    rays: &RayBatch,
    ecc: Option<&EccBatch>,
    lambda: f64,
    n_samples: usize,
    quadrature: Quadrature,
    domain: EccDomain,
) -> LossTerms {
    let recon = recon_loss(tape, rays, n_samples, quadrature);
    match ecc {
        Some(batch) if lambda > 0.0 => {
            let e = ecc_loss(tape, geom, batch, n_samples, domain);
            let scaled = tape.scale(e, lambda);
            LossTerms {
                total: tape.add(recon, scaled),
                recon,
                ecc: Some(e),
            }
        }
        _ => LossTerms {
            total: recon,
            recon,
            ecc: None,
        },
    }
}

/// Derivative-sum pair `(Σ Δ_a·δ_a, orientation·Σ Δ_b·δ_b)` for any source of
/// detector values `value(view_angle, u, v)`.
pub fn ecc_sides_with(sample: &EpipolarSample, mut value: impl FnMut(f64, f64, f64) -> f64) -> (f64, f64) {
    let mut side = |line: &EpipolarLine| -> f64 {
        let k = line.delta / (2.0 * sample.epsilon);
        line.plus
            .iter()
            .zip(&line.minus)
            .map(|(p, m)| (p.weight * value(line.view, p.u, p.v) - m.weight * value(line.view, m.u, m.v)) * k)
            .sum()
    };
    let a = side(&sample.a);
    let b = side(&sample.b);
    (a, sample.orientation * b)
}

/// Central difference `Δ_j` of the cosine-weighted line-integral image across
/// the epipolar line, for a plain attenuation sampler.
pub fn ecc_delta<S: AttenuationSampler + ?Sized>(
    sampler: &S,
    geom: &ConeBeamGeometry,
    sample: &EpipolarSample,
    side: Side,
    j: usize,
    n_samples: usize,
) -> Result<f64, LossError> {
    let line = match side {
        Side::A => &sample.a,
        Side::B => &sample.b,
    };
    if j >= line.n_s() {
        return Err(LossError::IndexOutOfRange { index: j, n_s: line.n_s() });
    }
    let g = |u: f64, v: f64| crate::projector::march_ray(sampler, &geom.detector_ray(line.view, u, v), n_samples);
    let (p, m) = (line.plus[j], line.minus[j]);
    Ok((p.weight * g(p.u, p.v) - m.weight * g(m.u, m.v)) / (2.0 * sample.epsilon))
}

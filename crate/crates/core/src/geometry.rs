//! Cone-beam acquisition geometry.
//!
//! World frame: the rotation axis is `z`, the source travels on a circle of
//! radius `dso` in the `z = 0` plane. For a view angle `θ` the source sits at
//! `dso·(cos θ, sin θ, 0)` and the flat detector is perpendicular to the
//! source→isocenter line, its origin `O` at distance `dsd` from the source
//! (beyond the isocenter). Detector `u` runs along `(−sin θ, cos θ, 0)` and
//! `v` along `+z`; detector coordinates are in millimetres and centred on `O`.
//!
//! Epipolar lines on a detector are written `(α, t)`: the line direction is
//! `(cos α, sin α)` with `α ∈ [0, π)` and `t` is the signed distance from `O`
//! measured along the normal `(−sin α, cos α)`.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Minimum angular separation between the two views of an epipolar pair.
pub const MIN_PAIR_SEPARATION: f64 = 5.0 * PI / 180.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid distances: need dsd > dso > volume_radius > 0 (dsd={dsd}, dso={dso}, radius={radius})")]
    InvalidDistances { dso: f64, dsd: f64, radius: f64 },
    #[error("detector must have positive pixel counts and pitches")]
    InvalidDetector,
    #[error("detector half-size {half_size:.3} mm cannot hold the object shadow of radius {shadow:.3} mm")]
    DetectorTooSmall { half_size: f64, shadow: f64 },
    #[error("view angles must be strictly increasing inside [0, π)")]
    InvalidAngles,
    #[error("detector coordinate ({u}, {v}) lies outside the detector")]
    OutsideDetector { u: f64, v: f64 },
    #[error("pixel index ({iu}, {iv}) out of range")]
    PixelOutOfRange { iu: usize, iv: usize },
    #[error("view separation {0:.4} rad is below the minimum pair separation")]
    ViewsTooClose(f64),
    #[error("epipolar plane is degenerate (point collinear with the source baseline)")]
    DegenerateGeometry,
    #[error("epipolar line segment too short on the detector")]
    LineOutsideDetector,
    #[error("need at least two samples per epipolar line")]
    TooFewLineSamples,
}

/// Source/detector layout and trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeBeamGeometry {
    pub dso: f64,
    pub dsd: f64,
    pub n_u: usize,
    pub n_v: usize,
    pub pitch_u: f64,
    pub pitch_v: f64,
    /// View angles in radians.
    pub angles: Vec<f64>,
    pub volume_radius: f64,
}

/// On-disk form; angles are stored in degrees.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeometryDocument {
    dso: f64,
    dsd: f64,
    n_u: usize,
    n_v: usize,
    pitch_u: f64,
    pitch_v: f64,
    angles_deg: Vec<f64>,
    volume_radius: f64,
}

impl Serialize for ConeBeamGeometry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GeometryDocument {
            dso: self.dso,
            dsd: self.dsd,
            n_u: self.n_u,
            n_v: self.n_v,
            pitch_u: self.pitch_u,
            pitch_v: self.pitch_v,
            angles_deg: self.angles.iter().map(|a| a.to_degrees()).collect(),
            volume_radius: self.volume_radius,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConeBeamGeometry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = GeometryDocument::deserialize(d)?;
        Ok(ConeBeamGeometry {
            dso: doc.dso,
            dsd: doc.dsd,
            n_u: doc.n_u,
            n_v: doc.n_v,
            pitch_u: doc.pitch_u,
            pitch_v: doc.pitch_v,
            angles: doc.angles_deg.iter().map(|a| a.to_radians()).collect(),
            volume_radius: doc.volume_radius,
        })
    }
}

/// A ray `origin + s·direction`, clipped to the bounding sphere by
/// `[s_near, s_far]`. A ray that misses the sphere has `s_near == s_far == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub s_near: f64,
    pub s_far: f64,
}

impl Ray {
    pub fn at(&self, s: f64) -> Vec3 {
        self.origin + self.direction * s
    }

    pub fn hits_volume(&self) -> bool {
        self.s_far > self.s_near
    }

    pub fn length(&self) -> f64 {
        (self.s_far - self.s_near).max(0.0)
    }
}

/// Evenly spaced view angles (radians) covering an arc of `range_deg`
/// centred on 90°. Angles sit at bin centres so the list is symmetric about
/// 90° and stays inside `[90° − range/2, 90° + range/2)`.
pub fn centered_arc(range_deg: f64, n_views: usize) -> Vec<f64> {
    let start = 90.0 - range_deg / 2.0;
    let step = range_deg / n_views as f64;
    (0..n_views)
        .map(|k| (start + (k as f64 + 0.5) * step).to_radians())
        .collect()
}

/// Nominal arc covered by an evenly spaced angle list, in degrees: the span
/// between first and last view plus one angular step.
pub fn arc_range_deg(angles: &[f64]) -> f64 {
    match angles.len() {
        0 => 0.0,
        1 => 0.0,
        n => {
            let span = (angles[n - 1] - angles[0]).to_degrees();
            let r = span * n as f64 / (n - 1) as f64;
            (r * 1e6).round() / 1e6
        }
    }
}

impl ConeBeamGeometry {
    /// Desk-scale default: 64×64 detector sized to see the whole bounding
    /// sphere of a 64 mm half-extent volume.
    pub fn desk_default(angles: Vec<f64>) -> Self {
        ConeBeamGeometry {
            dso: 1000.0,
            dsd: 1500.0,
            n_u: 64,
            n_v: 64,
            pitch_u: 5.4,
            pitch_v: 5.4,
            angles,
            volume_radius: 112.0,
        }
    }

    pub fn detector_half_width(&self) -> f64 {
        self.n_u as f64 * self.pitch_u / 2.0
    }

    pub fn detector_half_height(&self) -> f64 {
        self.n_v as f64 * self.pitch_v / 2.0
    }

    /// Radius of the bounding sphere's shadow on the detector. The sphere's
    /// silhouette cone has half-angle `asin(R/dso)` for every view.
    pub fn sphere_shadow_radius(&self) -> f64 {
        let r = self.volume_radius;
        self.dsd * r / (self.dso * self.dso - r * r).sqrt()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.dso, self.dsd, self.volume_radius]
            .iter()
            .all(|x| x.is_finite());
        if !(finite && self.dsd > self.dso && self.dso > self.volume_radius && self.volume_radius > 0.0)
        {
            return Err(GeometryError::InvalidDistances {
                dso: self.dso,
                dsd: self.dsd,
                radius: self.volume_radius,
            });
        }
        if self.n_u == 0 || self.n_v == 0 || !(self.pitch_u > 0.0) || !(self.pitch_v > 0.0) {
            return Err(GeometryError::InvalidDetector);
        }
        // Everything inside the sphere (and so the volume box it encloses)
        // must project onto the detector for every view.
        let shadow = self.sphere_shadow_radius();
        let half = self.detector_half_width().min(self.detector_half_height());
        if half < shadow {
            return Err(GeometryError::DetectorTooSmall {
                half_size: half,
                shadow,
            });
        }
        check_angles(&self.angles)
    }

    /// Source location for view angle `angle`.
    pub fn source_position(&self, angle: f64) -> Vec3 {
        Vec3::new(self.dso * angle.cos(), self.dso * angle.sin(), 0.0)
    }

    fn frame(&self, angle: f64) -> DetectorFrame {
        let (s, c) = angle.sin_cos();
        let source = Vec3::new(self.dso * c, self.dso * s, 0.0);
        let principal = Vec3::new(-c, -s, 0.0);
        DetectorFrame {
            source,
            origin: source + principal * self.dsd,
            principal,
            axis_u: Vec3::new(-s, c, 0.0),
            axis_v: Vec3::new(0.0, 0.0, 1.0),
        }
    }

    pub fn contains_detector_point(&self, u: f64, v: f64) -> bool {
        let tol = 1e-9 * (self.detector_half_width() + self.detector_half_height());
        u.abs() <= self.detector_half_width() + tol && v.abs() <= self.detector_half_height() + tol
    }

    /// World position of detector coordinate `(u, v)` for view `angle`.
    pub fn detector_point_to_world(&self, angle: f64, u: f64, v: f64) -> Result<Vec3, GeometryError> {
        if !self.contains_detector_point(u, v) {
            return Err(GeometryError::OutsideDetector { u, v });
        }
        let f = self.frame(angle);
        Ok(f.origin + f.axis_u * u + f.axis_v * v)
    }

    /// Detector coordinates of a pixel centre.
    pub fn pixel_center(&self, iu: usize, iv: usize) -> (f64, f64) {
        (
            (iu as f64 + 0.5 - self.n_u as f64 / 2.0) * self.pitch_u,
            (iv as f64 + 0.5 - self.n_v as f64 / 2.0) * self.pitch_v,
        )
    }

    /// Ray from the source through the centre of pixel `(iu, iv)`.
    pub fn pixel_ray(&self, angle: f64, iu: usize, iv: usize) -> Result<Ray, GeometryError> {
        if iu >= self.n_u || iv >= self.n_v {
            return Err(GeometryError::PixelOutOfRange { iu, iv });
        }
        let (u, v) = self.pixel_center(iu, iv);
        Ok(self.detector_ray(angle, u, v))
    }

    /// Ray from the source through an arbitrary detector coordinate. No range
    /// check: callers pass coordinates already known to be on the detector.
    pub fn detector_ray(&self, angle: f64, u: f64, v: f64) -> Ray {
        let f = self.frame(angle);
        let target = f.origin + f.axis_u * u + f.axis_v * v;
        let direction = (target - f.source).normalize();
        self.clip_to_sphere(f.source, direction)
    }

    pub fn clip_to_sphere(&self, origin: Vec3, direction: Vec3) -> Ray {
        let b = origin.dot(&direction);
        let c = origin.norm_squared() - self.volume_radius * self.volume_radius;
        let disc = b * b - c;
        let (s_near, s_far) = if disc > 0.0 {
            let root = disc.sqrt();
            ((-b - root).max(0.0), (-b + root).max(0.0))
        } else {
            (0.0, 0.0)
        };
        Ray {
            origin,
            direction,
            s_near,
            s_far,
        }
    }

    /// `cos β` for detector coordinate `(u, v)`: the cosine of the angle at the
    /// source between the ray to `(u, v)` and the principal ray.
    pub fn cosine_weight(&self, u: f64, v: f64) -> f64 {
        self.dsd / (self.dsd * self.dsd + u * u + v * v).sqrt()
    }

    /// Project a world point onto the detector of view `angle`.
    pub fn project(&self, angle: f64, q: &Vec3) -> (f64, f64) {
        let f = self.frame(angle);
        let d = q - f.source;
        let depth = d.dot(&f.principal);
        let scale = self.dsd / depth;
        (d.dot(&f.axis_u) * scale, d.dot(&f.axis_v) * scale)
    }

    /// Intersection line of a plane through the source of view `angle` with
    /// that view's detector, as `(α, t, orientation)`. `orientation` is ±1
    /// and tells whether `+t` moves along `+normal` or `−normal` in the world.
    pub fn plane_line(&self, angle: f64, normal: &Vec3) -> Result<(f64, f64, f64), GeometryError> {
        let f = self.frame(angle);
        let a = normal.dot(&f.axis_u);
        let b = normal.dot(&f.axis_v);
        let k = normal.dot(&(f.origin - f.source));
        let len = (a * a + b * b).sqrt();
        if len < 1e-12 {
            return Err(GeometryError::DegenerateGeometry);
        }
        let (mu, mv) = (a / len, b / len);
        // Pick the sign s so that s·(mu, mv) = (−sin α, cos α) with α ∈ [0, π).
        let s = if mu < 0.0 {
            1.0
        } else if mu > 0.0 {
            -1.0
        } else if mv > 0.0 {
            1.0
        } else {
            -1.0
        };
        let mut alpha = (-s * mu).atan2(s * mv);
        if alpha >= PI {
            alpha -= PI;
        }
        if alpha < 0.0 {
            alpha = 0.0;
        }
        let t = s * (-k / len);
        Ok((alpha, t, s))
    }

    /// Corresponding epipolar lines in views `angle_a` and `angle_b` for the
    /// plane through both sources and the point `p`.
    pub fn epipolar_pair(
        &self,
        angle_a: f64,
        angle_b: f64,
        p: &Vec3,
        n_s: usize,
        epsilon: f64,
    ) -> Result<EpipolarSample, GeometryError> {
        let sep = (angle_a - angle_b).abs();
        if sep < MIN_PAIR_SEPARATION {
            return Err(GeometryError::ViewsTooClose(sep));
        }
        if n_s < 2 {
            return Err(GeometryError::TooFewLineSamples);
        }
        let ca = self.source_position(angle_a);
        let cb = self.source_position(angle_b);
        let cross = (cb - ca).cross(&(p - ca));
        if cross.norm() < 1e-6 * self.dso * self.dso {
            return Err(GeometryError::DegenerateGeometry);
        }
        let normal = cross.normalize();
        let (alpha_a, t_a, sign_a) = self.plane_line(angle_a, &normal)?;
        let (alpha_b, t_b, sign_b) = self.plane_line(angle_b, &normal)?;
        let line_a = self.sample_line(angle_a, alpha_a, t_a, n_s, epsilon)?;
        let line_b = self.sample_line(angle_b, alpha_b, t_b, n_s, epsilon)?;
        Ok(EpipolarSample {
            a: line_a,
            b: line_b,
            epsilon,
            orientation: sign_a * sign_b,
            plane_normal: normal,
        })
    }

    /// Build the `t ± ε` offset lines of `(α, t)`, clip both to the detector
    /// over a common parameter range and place `n_s` samples on each.
    fn sample_line(
        &self,
        view: f64,
        alpha: f64,
        t: f64,
        n_s: usize,
        epsilon: f64,
    ) -> Result<EpipolarLine, GeometryError> {
        let dir = [alpha.cos(), alpha.sin()];
        let nrm = [-alpha.sin(), alpha.cos()];
        let hw = self.detector_half_width();
        let hh = self.detector_half_height();
        let mut range = (f64::NEG_INFINITY, f64::INFINITY);
        for off in [t + epsilon, t - epsilon] {
            let base = [nrm[0] * off, nrm[1] * off];
            match clip_line_to_rect(base, dir, hw, hh) {
                Some((lo, hi)) => {
                    range.0 = range.0.max(lo);
                    range.1 = range.1.min(hi);
                }
                None => return Err(GeometryError::LineOutsideDetector),
            }
        }
        let length = range.1 - range.0;
        let half_diag = (hw * hw + hh * hh).sqrt();
        if !(length >= half_diag) {
            return Err(GeometryError::LineOutsideDetector);
        }
        let delta = length / (n_s - 1) as f64;
        let make = |off: f64| -> Vec<DetectorSample> {
            (0..n_s)
                .map(|j| {
                    let tau = range.0 + j as f64 * delta;
                    let u = (nrm[0] * off + dir[0] * tau).clamp(-hw, hw);
                    let v = (nrm[1] * off + dir[1] * tau).clamp(-hh, hh);
                    DetectorSample {
                        u,
                        v,
                        weight: self.cosine_weight(u, v),
                    }
                })
                .collect()
        };
        Ok(EpipolarLine {
            view,
            alpha,
            t,
            delta,
            plus: make(t + epsilon),
            minus: make(t - epsilon),
        })
    }
}

struct DetectorFrame {
    source: Vec3,
    origin: Vec3,
    principal: Vec3,
    axis_u: Vec3,
    axis_v: Vec3,
}

fn check_angles(angles: &[f64]) -> Result<(), GeometryError> {
    let in_range = angles.iter().all(|a| a.is_finite() && *a >= 0.0 && *a < PI);
    let increasing = angles.windows(2).all(|w| w[1] > w[0]);
    if in_range && increasing {
        Ok(())
    } else {
        Err(GeometryError::InvalidAngles)
    }
}

/// Liang–Barsky clip of the infinite line `base + τ·dir` against the
/// rectangle `|u| ≤ hw, |v| ≤ hh`.
fn clip_line_to_rect(base: [f64; 2], dir: [f64; 2], hw: f64, hh: f64) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (b, d, h) in [(base[0], dir[0], hw), (base[1], dir[1], hh)] {
        if d.abs() < 1e-15 {
            if b.abs() > h {
                return None;
            }
            continue;
        }
        let t0 = (-h - b) / d;
        let t1 = (h - b) / d;
        lo = lo.max(t0.min(t1));
        hi = hi.min(t0.max(t1));
    }
    (hi > lo).then_some((lo, hi))
}

/// One detector-plane sample on an epipolar line, with its cosine weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorSample {
    pub u: f64,
    pub v: f64,
    pub weight: f64,
}

/// The two offset copies `(α, t ± ε)` of an epipolar line in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarLine {
    pub view: f64,
    pub alpha: f64,
    pub t: f64,
    /// Spacing between consecutive samples along the line (mm).
    pub delta: f64,
    pub plus: Vec<DetectorSample>,
    pub minus: Vec<DetectorSample>,
}

impl EpipolarLine {
    pub fn n_s(&self) -> usize {
        self.plus.len()
    }

    /// Same line with the sample order reversed on both offsets.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        out.plus.reverse();
        out.minus.reverse();
        out
    }
}

/// A resolved epipolar correspondence between two views.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarSample {
    pub a: EpipolarLine,
    pub b: EpipolarLine,
    pub epsilon: f64,
    /// +1 when `+t` on both detectors moves the plane to the same side, −1
    /// when view b's `t` axis runs against view a's.
    pub orientation: f64,
    pub plane_normal: Vec3,
}

impl EpipolarSample {
    pub fn swapped(&self) -> Self {
        EpipolarSample {
            a: self.b.clone(),
            b: self.a.clone(),
            epsilon: self.epsilon,
            orientation: self.orientation,
            plane_normal: self.plane_normal,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom() -> ConeBeamGeometry {
        ConeBeamGeometry::desk_default(centered_arc(180.0, 20))
    }

    #[test]
    fn source_position_examples() {
        let g = geom();
        let c = g.source_position(0.0);
        assert!((c - Vec3::new(1000.0, 0.0, 0.0)).norm() < 1e-12);
        let c = g.source_position(PI / 2.0);
        assert!((c - Vec3::new(0.0, 1000.0, 0.0)).norm() < 1e-9);
        let c = g.source_position(PI / 3.0);
        assert!((c.x - 500.0).abs() < 1e-9);
        assert!((c.y - 866.025_403_784_438_6).abs() < 1e-9);
        assert_eq!(c.z, 0.0);
    }

    #[test]
    fn source_traces_circle() {
        let g = geom();
        for k in 0..100 {
            let c = g.source_position(k as f64 * 0.0317);
            assert!((c.norm() - g.dso).abs() < 1e-9);
            assert_eq!(c.z, 0.0);
        }
    }

    #[test]
    fn detector_point_examples() {
        let g = geom();
        let d = g.dso - g.dsd;
        let p = g.detector_point_to_world(0.0, 0.0, 0.0).unwrap();
        assert!((p - Vec3::new(d, 0.0, 0.0)).norm() < 1e-12);
        let p = g.detector_point_to_world(0.0, 10.0, 0.0).unwrap();
        assert!((p - Vec3::new(d, 10.0, 0.0)).norm() < 1e-12);
        let p = g.detector_point_to_world(PI / 2.0, 0.0, 5.0).unwrap();
        assert!((p - Vec3::new(0.0, d, 5.0)).norm() < 1e-9);
        assert!(matches!(
            g.detector_point_to_world(0.0, 1e4, 0.0),
            Err(GeometryError::OutsideDetector { .. })
        ));
    }

    #[test]
    fn pixel_ray_principal_and_bounds() {
        let mut g = geom();
        g.n_u = 65;
        g.n_v = 65;
        let r = g.pixel_ray(0.0, 32, 32).unwrap();
        assert!((r.direction - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((r.length() - 2.0 * g.volume_radius).abs() < 1e-9);
        for (iu, iv) in [(0, 0), (64, 0), (13, 50), (64, 64)] {
            let r = g.pixel_ray(1.1, iu, iv).unwrap();
            assert!((r.direction.norm() - 1.0).abs() < 1e-9);
            assert!(r.s_far - r.s_near <= 2.0 * g.volume_radius + 1e-9);
        }
        assert!(matches!(
            g.pixel_ray(0.0, 65, 0),
            Err(GeometryError::PixelOutOfRange { .. })
        ));
    }

    #[test]
    fn cosine_weight_examples() {
        let g = geom();
        assert_eq!(g.cosine_weight(0.0, 0.0), 1.0);
        assert!((g.cosine_weight(1500.0, 0.0) - 0.5f64.sqrt()).abs() < 1e-12);
        let w = g.cosine_weight(30.0, 40.0);
        assert!((w - 1500.0 / (1500.0f64.powi(2) + 2500.0).sqrt()).abs() < 1e-15);
        assert!((w - 0.99944).abs() < 1e-5);
        let mut last = 1.0;
        for k in 1..50 {
            let r = k as f64 * 3.0;
            let w = g.cosine_weight(r * 0.6, r * 0.8);
            assert!(w < last && w > 0.0);
            last = w;
        }
    }

    #[test]
    fn validation() {
        assert!(geom().validate().is_ok());
        let mut g = geom();
        g.dsd = 900.0;
        assert!(matches!(g.validate(), Err(GeometryError::InvalidDistances { .. })));
        let mut g = geom();
        g.pitch_u = 1.0;
        assert!(matches!(g.validate(), Err(GeometryError::DetectorTooSmall { .. })));
        let mut g = geom();
        g.angles = vec![0.3, 0.2];
        assert_eq!(g.validate(), Err(GeometryError::InvalidAngles));
        g.angles = vec![0.1, 3.5];
        assert_eq!(g.validate(), Err(GeometryError::InvalidAngles));
    }

    #[test]
    fn centered_arc_convention() {
        let a = centered_arc(90.0, 50);
        assert_eq!(a.len(), 50);
        let deg: Vec<f64> = a.iter().map(|x| x.to_degrees()).collect();
        assert!(deg[0] > 45.0 && deg[49] < 135.0);
        assert!((deg[0] + deg[49] - 180.0).abs() < 1e-9);
        assert_eq!(arc_range_deg(&a), 90.0);
        assert_eq!(arc_range_deg(&centered_arc(120.0, 50)), 120.0);
    }

    #[test]
    fn geometry_json_uses_degrees() {
        let g = ConeBeamGeometry::desk_default(vec![PI / 4.0, PI / 2.0]);
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.contains("\"angles_deg\":[45.0,90.0]"));
        let back: ConeBeamGeometry = serde_json::from_str(&text).unwrap();
        assert!((back.angles[1] - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_in_plane_pair() {
        let g = geom();
        let th = 0.4;
        let s = g
            .epipolar_pair(th, PI - th, &Vec3::zeros(), 64, 0.5 * g.pitch_u)
            .unwrap();
        assert!(s.a.alpha.abs() < 1e-12 && s.b.alpha.abs() < 1e-12);
        assert!(s.a.t.abs() < 1e-9 && s.b.t.abs() < 1e-9);
        for p in &s.a.plus {
            assert!((p.v - 0.5 * g.pitch_u).abs() < 1e-9);
        }
    }

    #[test]
    fn midpoint_of_sources_is_degenerate() {
        let g = geom();
        let (a, b) = (0.3, 1.4);
        let mid = (g.source_position(a) + g.source_position(b)) * 0.5;
        // The midpoint of the baseline lies outside the volume sphere, but the
        // collinearity test fires before any radius check.
        assert_eq!(
            g.epipolar_pair(a, b, &mid, 16, 1.0),
            Err(GeometryError::DegenerateGeometry)
        );
    }

    #[test]
    fn close_views_rejected() {
        let g = geom();
        assert!(matches!(
            g.epipolar_pair(1.0, 1.01, &Vec3::new(0.0, 0.0, 10.0), 16, 1.0),
            Err(GeometryError::ViewsTooClose(_))
        ));
    }

    fn random_sample(g: &ConeBeamGeometry, rng: &mut ChaCha8Rng) -> (EpipolarSample, Vec3) {
        loop {
            let a = rng.gen_range(0.0..PI);
            let b = rng.gen_range(0.0..PI);
            let p = Vec3::new(
                rng.gen_range(-60.0..60.0),
                rng.gen_range(-60.0..60.0),
                rng.gen_range(-60.0..60.0),
            );
            if let Ok(s) = g.epipolar_pair(a, b, &p, 32, 0.5 * g.pitch_u) {
                return (s, p);
            }
        }
    }

    #[test]
    fn samples_lie_on_the_epipolar_plane() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (s, p) = random_sample(&g, &mut rng);
            let ca = g.source_position(s.a.view);
            let n = s.plane_normal;
            assert!(n.dot(&(p - ca)).abs() < 1e-9 * g.dso);
            for line in [&s.a, &s.b] {
                // The central line (α, t) lies on the plane exactly; the offset
                // lines are ε away on the detector.
                for (pp, pm) in line.plus.iter().zip(&line.minus) {
                    let (u, v) = ((pp.u + pm.u) / 2.0, (pp.v + pm.v) / 2.0);
                    let w = g.detector_point_to_world(line.view, u, v).unwrap();
                    assert!(n.dot(&(w - ca)).abs() < 1e-6 * g.dso);
                }
            }
        }
    }

    #[test]
    fn line_samples_are_evenly_spaced_inside_detector() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (s, _) = random_sample(&g, &mut rng);
            for line in [&s.a, &s.b] {
                assert_eq!(line.plus.len(), 32);
                assert!(line.alpha >= 0.0 && line.alpha < PI);
                for pts in [&line.plus, &line.minus] {
                    for w in pts.windows(2) {
                        let d = ((w[1].u - w[0].u).powi(2) + (w[1].v - w[0].v).powi(2)).sqrt();
                        assert!((d - line.delta).abs() < 1e-9 * line.delta.max(1.0));
                    }
                    for q in pts.iter() {
                        assert!(g.contains_detector_point(q.u, q.v));
                        assert!(q.weight > 0.0 && q.weight <= 1.0);
                    }
                }
                for (pp, pm) in line.plus.iter().zip(&line.minus) {
                    let d = ((pp.u - pm.u).powi(2) + (pp.v - pm.v).powi(2)).sqrt();
                    assert!((d - 2.0 * s.epsilon).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn reprojection_consistency() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (s, _) = random_sample(&g, &mut rng);
            let ca = g.source_position(s.a.view);
            let cb = g.source_position(s.b.view);
            for j in [0, 10, 31] {
                let (pp, pm) = (&s.a.plus[j], &s.a.minus[j]);
                let q = g
                    .detector_point_to_world(s.a.view, (pp.u + pm.u) / 2.0, (pp.v + pm.v) / 2.0)
                    .unwrap();
                let n = (cb - ca).cross(&(q - ca)).normalize();
                let (alpha, t, _) = g.plane_line(s.b.view, &n).unwrap();
                let da = (alpha - s.b.alpha).abs().min(PI - (alpha - s.b.alpha).abs());
                assert!(da < 1e-9, "alpha {alpha} vs {}", s.b.alpha);
                assert!((t - s.b.t).abs() < 1e-9 * s.b.t.abs().max(1.0));
            }
        }
    }

    #[test]
    fn projection_matches_detector_mapping() {
        let g = geom();
        let q = Vec3::new(10.0, -20.0, 30.0);
        for th in [0.0, 0.7, 2.9] {
            let (u, v) = g.project(th, &q);
            let w = g.detector_point_to_world(th, u, v).unwrap();
            let c = g.source_position(th);
            let a = (q - c).normalize();
            let b = (w - c).normalize();
            assert!((a - b).norm() < 1e-12);
        }
    }
}

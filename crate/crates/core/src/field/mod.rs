//! Neural attenuation field: coordinate encoding followed by a small dense
//! network with softplus activations, plus the reverse-mode machinery needed
//! to train it.

mod adam;
mod checkpoint;
mod encoding;
mod tape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_model, save_model, CHECKPOINT_MAGIC};
pub use encoding::EncodingConfig;
pub use tape::{Tape, TapeError, Var};

use crate::geometry::Vec3;
use crate::projector::AttenuationSampler;
use encoding::{fourier_features, GridLayout};

/// Initial attenuation everywhere, set through the output bias.
pub const INITIAL_ATTENUATION: f64 = 0.01;
const TABLE_INIT: f64 = 1e-4;
const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("expected {expected} parameters, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("parameters contain non-finite values")]
    NonFinite,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub hidden: Vec<usize>,
    /// World half-size mapped onto the encoding's `[−1, 1]³`.
    pub bound: f64,
}

impl FieldConfig {
    pub fn new(bound: f64) -> Self {
        FieldConfig {
            encoding: EncodingConfig::default(),
            hidden: vec![64; 3],
            bound,
        }
    }

    pub fn fourier(bound: f64) -> Self {
        FieldConfig {
            encoding: EncodingConfig::fourier_default(),
            hidden: vec![128; 4],
            bound,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        self.encoding.validate()?;
        if self.hidden.contains(&0) {
            return Err(FieldError::InvalidConfig("hidden widths must be positive"));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(FieldError::InvalidConfig("bound must be positive"));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<Layer> {
        let mut dims = vec![self.encoding.output_dim()];
        dims.extend(&self.hidden);
        dims.push(1);
        let mut off = self.encoding.param_count();
        dims.windows(2)
            .map(|w| {
                let l = Layer {
                    n_in: w[0],
                    n_out: w[1],
                    weights: off,
                    bias: off + w[0] * w[1],
                };
                off += w[0] * w[1] + w[1];
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.encoding.param_count()
            + self
                .layer_shapes()
                .iter()
                .map(|l| l.n_in * l.n_out + l.n_out)
                .sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    n_in: usize,
    n_out: usize,
    /// Row-major `n_out × n_in` block.
    weights: usize,
    bias: usize,
}

/// `(softplus(z), sigmoid(z))` from a single exponential.
#[inline]
fn softplus_and_slope(z: f64) -> (f64, f64) {
    let e = (-z.abs()).exp();
    let sig = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (z.max(0.0) + e.ln_1p(), sig)
}

#[derive(Debug, Clone)]
pub struct FieldModel {
    config: FieldConfig,
    params: Vec<f64>,
    layers: Vec<Layer>,
    grid: Option<GridLayout>,
}

/// Cached intermediate values of a batched forward pass, enough to run the
/// backward pass without re-evaluating the encoding.
pub(crate) struct FieldBatch {
    pub mu: Vec<f64>,
    feats: Vec<f64>,
    corner_idx: Vec<usize>,
    corner_w: Vec<f64>,
    /// Softplus outputs of every unit.
    act: Vec<f64>,
    /// Softplus derivatives of every unit.
    slope: Vec<f64>,
}

impl FieldModel {
    /// Fresh model: tables uniform in ±1e-4, weights and hidden biases
    /// uniform in ±1/√fan_in, output bias giving μ ≈ 0.01.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self, FieldError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.param_count();
        let mut params = vec![0.0; n];
        let table = config.encoding.param_count();
        for p in &mut params[..table] {
            *p = rng.gen_range(-TABLE_INIT..TABLE_INIT);
        }
        let layers = config.layer_shapes();
        let last = layers.len() - 1;
        for (li, l) in layers.iter().enumerate() {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for p in &mut params[l.weights..l.bias] {
                *p = rng.gen_range(-bound..bound);
            }
            for p in &mut params[l.bias..l.bias + l.n_out] {
                *p = if li == last {
                    INITIAL_ATTENUATION.exp_m1().ln()
                } else {
                    rng.gen_range(-bound..bound)
                };
            }
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: FieldConfig, params: Vec<f64>) -> Result<Self, FieldError> {
        config.validate()?;
        let expected = config.param_count();
        if params.len() != expected {
            return Err(FieldError::ShapeMismatch {
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FieldError::NonFinite);
        }
        Ok(FieldModel {
            layers: config.layer_shapes(),
            grid: GridLayout::new(&config.encoding),
            config,
            params,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn enc_dim(&self) -> usize {
        self.config.encoding.output_dim()
    }

    fn corners_per_point(&self) -> usize {
        self.grid.as_ref().map_or(0, |g| 8 * g.n_levels())
    }

    fn units(&self) -> usize {
        self.layers.iter().map(|l| l.n_out).sum()
    }

    fn widest(&self) -> usize {
        self.layers.iter().map(|l| l.n_in.max(l.n_out)).max().unwrap_or(1)
    }

    #[inline]
    fn normalize(&self, q: &Vec3) -> [f64; 3] {
        [0, 1, 2].map(|a| (q[a] / self.config.bound).clamp(-1.0, 1.0))
    }

    fn encode(&self, q: &Vec3, feats: &mut [f64], idx: &mut [usize], w: &mut [f64]) {
        let x = self.normalize(q);
        match (&self.config.encoding, &self.grid) {
            (EncodingConfig::Fourier {
                n_frequencies,
                base_frequency,
            }, _) => fourier_features(&x, *n_frequencies, *base_frequency, feats),
            (_, Some(grid)) => {
                let f = grid.features;
                for level in 0..grid.n_levels() {
                    let ci = &mut idx[8 * level..8 * level + 8];
                    let cw = &mut w[8 * level..8 * level + 8];
                    grid.corners(level, &x, ci, cw);
                    let out = &mut feats[level * f..(level + 1) * f];
                    out.iter_mut().for_each(|o| *o = 0.0);
                    for c in 0..8 {
                        let table = &self.params[ci[c]..ci[c] + f];
                        for (o, t) in out.iter_mut().zip(table) {
                            *o += cw[c] * t;
                        }
                    }
                }
            }
            _ => unreachable!("hashgrid config without layout"),
        }
    }

    /// Runs the dense layers on `feats`, storing each unit's activation and
    /// slope. Returns the output unit's activation.
    fn mlp(&self, feats: &[f64], act: &mut [f64], slope: &mut [f64]) -> f64 {
        let mut off = 0;
        for (li, l) in self.layers.iter().enumerate() {
            let w = &self.params[l.weights..l.bias];
            let b = &self.params[l.bias..l.bias + l.n_out];
            let (done, rest) = act.split_at_mut(off);
            let input = if li == 0 { feats } else { &done[off - l.n_in..] };
            for o in 0..l.n_out {
                let row = &w[o * l.n_in..(o + 1) * l.n_in];
                let z = b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
                let (a, s) = softplus_and_slope(z);
                rest[o] = a;
                slope[off + o] = s;
            }
            off += l.n_out;
        }
        act[off - 1]
    }

    /// Attenuation at a world point; always ≥ 0.
    pub fn evaluate(&self, q: &Vec3) -> f64 {
        let mut feats = vec![0.0; self.enc_dim()];
        let mut idx = vec![0usize; self.corners_per_point()];
        let mut w = vec![0.0; self.corners_per_point()];
        let mut act = vec![0.0; self.units()];
        let mut slope = vec![0.0; self.units()];
        self.encode(q, &mut feats, &mut idx, &mut w);
        self.mlp(&feats, &mut act, &mut slope)
    }

    pub(crate) fn forward_batch(&self, points: &[Vec3]) -> FieldBatch {
        let n = points.len();
        let (ed, cp, pl) = (self.enc_dim(), self.corners_per_point(), self.units());
        let mut batch = FieldBatch {
            mu: vec![0.0; n],
            feats: vec![0.0; n * ed],
            // One dummy slot per point keeps the chunked zip aligned when the
            // encoding has no corners.
            corner_idx: vec![0; n * cp.max(1)],
            corner_w: vec![0.0; n * cp.max(1)],
            act: vec![0.0; n * pl],
            slope: vec![0.0; n * pl],
        };
        points
            .par_chunks(CHUNK)
            .zip(batch.mu.par_chunks_mut(CHUNK))
            .zip(batch.feats.par_chunks_mut(CHUNK * ed))
            .zip(batch.corner_idx.par_chunks_mut(CHUNK * cp.max(1)))
            .zip(batch.corner_w.par_chunks_mut(CHUNK * cp.max(1)))
            .zip(batch.act.par_chunks_mut(CHUNK * pl))
            .zip(batch.slope.par_chunks_mut(CHUNK * pl))
            .for_each(|((((((pts, mu), feats), idx), w), act), slope)| {
                for (p, q) in pts.iter().enumerate() {
                    let f = &mut feats[p * ed..(p + 1) * ed];
                    let ci = &mut idx[p * cp..(p + 1) * cp];
                    let cw = &mut w[p * cp..(p + 1) * cp];
                    self.encode(q, f, ci, cw);
                    let r = p * pl..(p + 1) * pl;
                    mu[p] = self.mlp(f, &mut act[r.clone()], &mut slope[r]);
                }
            });
        batch
    }

    /// Accumulates `Σ_p dmu[p]·∂μ_p/∂θ` into `grad`. Chunks are reduced in a
    /// fixed order, so the result does not depend on the thread count.
    pub(crate) fn backward_batch(&self, batch: &FieldBatch, dmu: &[f64], grad: &mut [f64]) {
        let n = dmu.len();
        let (ed, cp, pl) = (self.enc_dim(), self.corners_per_point(), self.units());
        let mlp_start = self.config.encoding.param_count();
        let mlp_len = self.params.len() - mlp_start;
        let want_feat = self.grid.is_some();
        let widest = self.widest();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(n);
                let mut g = vec![0.0; mlp_len];
                let mut dfeat = if want_feat { vec![0.0; (hi - lo) * ed] } else { Vec::new() };
                let mut dz = vec![0.0; widest];
                let mut da = vec![0.0; widest];
                for p in lo..hi {
                    if dmu[p] == 0.0 {
                        continue;
                    }
                    let act = &batch.act[p * pl..(p + 1) * pl];
                    let slope = &batch.slope[p * pl..(p + 1) * pl];
                    let feats = &batch.feats[p * ed..(p + 1) * ed];
                    let mut z_off = pl;
                    dz[0] = dmu[p] * slope[pl - 1];
                    for li in (0..self.layers.len()).rev() {
                        let l = self.layers[li];
                        z_off -= l.n_out;
                        let w = &self.params[l.weights..l.bias];
                        let gw = l.weights - mlp_start;
                        let gb = l.bias - mlp_start;
                        let input = if li == 0 { feats } else { &act[z_off - l.n_in..z_off] };
                        let da = &mut da[..l.n_in];
                        da.iter_mut().for_each(|x| *x = 0.0);
                        for o in 0..l.n_out {
                            let d = dz[o];
                            if d == 0.0 {
                                continue;
                            }
                            g[gb + o] += d;
                            let grow = &mut g[gw + o * l.n_in..gw + (o + 1) * l.n_in];
                            for (gg, x) in grow.iter_mut().zip(input) {
                                *gg += d * x;
                            }
                            let wrow = &w[o * l.n_in..(o + 1) * l.n_in];
                            for (a, ww) in da.iter_mut().zip(wrow) {
                                *a += d * ww;
                            }
                        }
                        if li > 0 {
                            let prev = self.layers[li - 1];
                            let sp = &slope[z_off - prev.n_out..z_off];
                            for i in 0..prev.n_out {
                                dz[i] = da[i] * sp[i];
                            }
                        } else if want_feat {
                            dfeat[(p - lo) * ed..(p - lo + 1) * ed].copy_from_slice(da);
                        }
                    }
                }
                (g, dfeat)
            })
            .collect();
        for (c, (g, dfeat)) in partials.iter().enumerate() {
            for (t, x) in grad[mlp_start..].iter_mut().zip(g) {
                *t += x;
            }
            if let Some(grid) = &self.grid {
                let f = grid.features;
                let lo = c * CHUNK;
                for (pp, df) in dfeat.chunks(ed).enumerate() {
                    let p = lo + pp;
                    let idx = &batch.corner_idx[p * cp..(p + 1) * cp];
                    let w = &batch.corner_w[p * cp..(p + 1) * cp];
                    for level in 0..grid.n_levels() {
                        let d = &df[level * f..(level + 1) * f];
                        for k in 8 * level..8 * level + 8 {
                            for (j, dj) in d.iter().enumerate() {
                                grad[idx[k] + j] += w[k] * dj;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl AttenuationSampler for FieldModel {
    fn attenuation(&self, q: &Vec3) -> f64 {
        self.evaluate(q)
    }
}

/// Rasterizes the field at voxel centres.
pub fn render_volume(model: &FieldModel, spec: crate::volume::GridSpec) -> crate::volume::VoxelVolume {
    let [nx, ny, nz] = spec.dims;
    let points: Vec<Vec3> = (0..nz)
        .flat_map(|k| (0..ny).flat_map(move |j| (0..nx).map(move |i| (i, j, k))))
        .map(|(i, j, k)| spec.center(i, j, k))
        .collect();
    let mu = points.par_chunks(4096).flat_map_iter(|c| c.iter().map(|q| model.evaluate(q)).collect::<Vec<_>>()).collect();
    crate::volume::VoxelVolume {
        dims: spec.dims,
        extent: spec.extent,
        data: mu,
    }
}

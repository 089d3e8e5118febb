//! Optimization loop for the attenuation field: shuffled pixel batches,
//! per-iteration epipolar sampling after a warm-up, Adam with exponential
//! learning-rate decay, JSONL logging and resumable checkpoints.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{adam_step, save_model, AdamConfig, AdamState, FieldError, FieldModel, Tape};
use crate::geometry::{arc_range_deg, ConeBeamGeometry, Vec3, MIN_PAIR_SEPARATION};
use crate::losses::{total_loss, EccBatch, EccDomain, PixelId, RayBatch};
use crate::projector::{ProjectionSet, Quadrature};

/// Rejected epipolar draws tolerated before an iteration gives up on ECC.
pub const ECC_MAX_TRIES: usize = 16;
/// Fraction of the bounding radius the epipolar anchor point is drawn from.
pub const ECC_POINT_RADIUS: f64 = 0.8;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_JITTER: u64 = 2;
const STREAM_ECC: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("epipolar sampling failed {0} times in a row")]
    EccSamplingExhausted(usize),
    #[error("non-finite loss at iteration {iteration}; diagnostic checkpoint: {checkpoint:?}")]
    NonFinite { iteration: u64, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("state file: {0}")]
    State(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// Use `TrainConfig::lambda` as given.
    Fixed,
    /// 1e-3 for arcs narrower than 120°, 1e-4 otherwise.
    ByRange,
}

/// λ for an input arc of `range_deg` under the by-range rule.
pub fn lambda_for_range(range_deg: f64) -> f64 {
    if range_deg < 120.0 {
        1e-3
    } else {
        1e-4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_epochs: usize,
    pub warmup_epochs: usize,
    pub rays_per_batch: usize,
    pub lambda: f64,
    pub lambda_rule: LambdaRule,
    pub lr: f64,
    /// Learning rate at the end of training relative to `lr`.
    pub lr_final_factor: f64,
    pub seed: u64,
    pub ecc_samples_per_iter: usize,
    /// Samples per training ray.
    pub n_samples: usize,
    /// Points per epipolar line; defaults to the detector width in pixels.
    pub n_s: Option<usize>,
    /// Central-difference offset (mm); defaults to half a pixel.
    pub epsilon: Option<f64>,
    pub ecc_domain: EccDomain,
    /// Save a resumable state every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_epochs: 300,
            warmup_epochs: 200,
            rays_per_batch: 1024,
            lambda: 0.0,
            lambda_rule: LambdaRule::ByRange,
            lr: 1e-3,
            lr_final_factor: 0.1,
            seed: 0,
            ecc_samples_per_iter: 1,
            n_samples: 192,
            n_s: None,
            epsilon: None,
            ecc_domain: EccDomain::LineIntegral,
            checkpoint_every: 50,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    /// Plain projection matching: no consistency term.
    pub fn naf() -> Self {
        TrainConfig {
            lambda: 0.0,
            lambda_rule: LambdaRule::Fixed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.n_epochs == 0 || self.warmup_epochs >= self.n_epochs {
            return bad("need warmup_epochs < n_epochs");
        }
        if self.rays_per_batch == 0 {
            return bad("rays_per_batch must be at least 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        if !(self.lr > 0.0) || !(self.lr_final_factor > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.n_samples < 2 {
            return bad("n_samples must be at least 2");
        }
        if self.n_s.is_some_and(|n| n < 2) {
            return bad("n_s must be at least 2");
        }
        if self.epsilon.is_some_and(|e| !(e > 0.0)) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }

    /// λ actually used for projections acquired over `angles`.
    pub fn effective_lambda(&self, angles: &[f64]) -> f64 {
        match self.lambda_rule {
            LambdaRule::Fixed => self.lambda,
            LambdaRule::ByRange => lambda_for_range(arc_range_deg(angles)),
        }
    }

    pub fn lr_at(&self, iteration: u64, total: u64) -> f64 {
        self.lr * self.lr_final_factor.powf(iteration as f64 / total.max(1) as f64)
    }
}

/// Independent generator for `(tag, index)` under one seed. Streams do not
/// depend on how much randomness earlier iterations consumed.
fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 56) | index);
    rng
}

/// Every pixel of every view, shuffled and cut into batches.
pub fn make_epoch_batches<R: Rng + ?Sized>(proj: &ProjectionSet, rays_per_batch: usize, rng: &mut R) -> Vec<RayBatch> {
    let g = &proj.geometry;
    let mut ids: Vec<PixelId> = (0..proj.n_views())
        .flat_map(|view| (0..g.n_v).flat_map(move |iv| (0..g.n_u).map(move |iu| PixelId { view, iu, iv })))
        .collect();
    ids.shuffle(rng);
    ids.chunks(rays_per_batch.max(1))
        .map(|chunk| RayBatch {
            rays: chunk
                .iter()
                .map(|p| g.pixel_ray(g.angles[p.view], p.iu, p.iv).expect("pixel in range"))
                .collect(),
            pixels: chunk.to_vec(),
            measured: chunk.iter().map(|p| proj.pixel(p.view, p.iu, p.iv)).collect(),
            i0: proj.i0,
        })
        .collect()
}

fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Vec3 {
    loop {
        let q = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if q.norm_squared() <= 1.0 {
            return q * radius;
        }
    }
}

/// Draws epipolar correspondences over the whole half circle of view angles,
/// independent of which views were acquired.
pub fn sample_ecc_batch<R: Rng + ?Sized>(
    geom: &ConeBeamGeometry,
    rng: &mut R,
    n_samples: usize,
    n_s: usize,
    epsilon: f64,
) -> Result<EccBatch, TrainError> {
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut found = None;
        for _ in 0..ECC_MAX_TRIES {
            let a = rng.gen_range(0.0..std::f64::consts::PI);
            let b = rng.gen_range(0.0..std::f64::consts::PI);
            let p = uniform_in_ball(rng, ECC_POINT_RADIUS * geom.volume_radius);
            if (a - b).abs() < MIN_PAIR_SEPARATION {
                continue;
            }
            if let Ok(s) = geom.epipolar_pair(a, b, &p, n_s, epsilon) {
                found = Some(s);
                break;
            }
        }
        samples.push(found.ok_or(TrainError::EccSamplingExhausted(ECC_MAX_TRIES))?);
    }
    Ok(EccBatch { samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub recon_loss: f64,
    pub ecc_loss: Option<f64>,
    pub lambda: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ecc_skipped: bool,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub iteration: u64,
    pub adam: AdamState,
    pub seed: u64,
    pub running_recon: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
    pub state: TrainState,
    pub lambda: f64,
    pub batches_per_epoch: usize,
    pub final_recon_loss: f64,
}

/// Where a run writes its artifacts; without an output directory nothing is
/// written and the log is kept in memory only.
#[derive(Debug, Clone, Default)]
pub struct RunFiles {
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
}

pub const STATE_FILE: &str = "train_state.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const MODEL_FILE: &str = "model.bin";
const STATE_MAGIC: &[u8; 8] = b"EPNFST01";

/// Writes counters as a JSON header followed by parameters and Adam moments
/// as little-endian f64, so resuming is exact.
pub fn save_state(path: &Path, model: &FieldModel, state: &TrainState) -> Result<(), TrainError> {
    #[derive(Serialize)]
    struct Header<'a> {
        config: &'a crate::field::FieldConfig,
        epoch: usize,
        iteration: u64,
        adam_step: u64,
        seed: u64,
        running_recon: f64,
        wall_ms: u64,
        n_params: usize,
    }
    let header = serde_json::to_vec(&Header {
        config: model.config(),
        epoch: state.epoch,
        iteration: state.iteration,
        adam_step: state.adam.step,
        seed: state.seed,
        running_recon: state.running_recon,
        wall_ms: state.wall_ms,
        n_params: model.param_count(),
    })
    .map_err(|e| TrainError::State(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(STATE_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for block in [model.params(), &state.adam.m[..], &state.adam.v[..]] {
            for x in block {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<(FieldModel, TrainState), TrainError> {
    #[derive(Deserialize)]
    struct Header {
        config: crate::field::FieldConfig,
        epoch: usize,
        iteration: u64,
        adam_step: u64,
        seed: u64,
        running_recon: f64,
        wall_ms: u64,
        n_params: usize,
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != STATE_MAGIC {
        return Err(TrainError::State("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut hbuf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut hbuf)?;
    let h: Header = serde_json::from_slice(&hbuf).map_err(|e| TrainError::State(e.to_string()))?;
    let mut read_block = |n: usize| -> Result<Vec<f64>, TrainError> {
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let params = read_block(h.n_params)?;
    let m = read_block(h.n_params)?;
    let v = read_block(h.n_params)?;
    let model = FieldModel::from_params(h.config, params)?;
    Ok((
        model,
        TrainState {
            epoch: h.epoch,
            iteration: h.iteration,
            adam: AdamState { m, v, step: h.adam_step },
            seed: h.seed,
            running_recon: h.running_recon,
            wall_ms: h.wall_ms,
        },
    ))
}

fn read_log(path: &Path, before: u64) -> Result<Vec<LogRecord>, TrainError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| TrainError::State(e.to_string()))?;
        if rec.iteration < before {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Trains `model` on `proj`. With `files.resume` and a saved state in the
/// output directory, continues from that state instead of starting over.
pub fn train(
    proj: &ProjectionSet,
    model: &mut FieldModel,
    config: &TrainConfig,
    files: &RunFiles,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let geom = &proj.geometry;
    let lambda = config.effective_lambda(&geom.angles);
    let use_ecc = lambda > 0.0;
    let n_s = config.n_s.unwrap_or(geom.n_u);
    let epsilon = config.epsilon.unwrap_or(0.5 * geom.pitch_u);
    let n_pixels = proj.data.len();
    let batches_per_epoch = n_pixels.div_ceil(config.rays_per_batch);
    let total_iters = (batches_per_epoch * config.n_epochs) as u64;

    let mut state = TrainState {
        epoch: 0,
        iteration: 0,
        adam: AdamState::new(model.param_count()),
        seed: config.seed,
        running_recon: 0.0,
        wall_ms: 0,
    };
    let mut log = Vec::new();
    let mut log_writer = None;
    if let Some(dir) = &files.out_dir {
        fs::create_dir_all(dir)?;
        let state_path = dir.join(STATE_FILE);
        if files.resume && state_path.exists() {
            let (m, s) = load_state(&state_path)?;
            if m.config() != model.config() || s.seed != config.seed {
                return Err(TrainError::State("saved state does not match this run".into()));
            }
            *model = m;
            state = s;
            log = read_log(&dir.join(LOG_FILE), state.iteration)?;
        }
        let mut w = BufWriter::new(File::create(dir.join(LOG_FILE))?);
        for rec in &log {
            writeln!(w, "{}", serde_json::to_string(rec).map_err(|e| TrainError::State(e.to_string()))?)?;
        }
        log_writer = Some(w);
    }

    let start = Instant::now();
    let wall_base = state.wall_ms;
    let adam = AdamConfig::default();
    for epoch in state.epoch..config.n_epochs {
        let mut shuffle = stream(config.seed, STREAM_SHUFFLE, epoch as u64);
        let batches = make_epoch_batches(proj, config.rays_per_batch, &mut shuffle);
        for batch in &batches {
            let it = state.iteration;
            let jitter = stream(config.seed, STREAM_JITTER, it).next_u64();
            let mut ecc_skipped = false;
            let ecc_batch = if use_ecc && epoch >= config.warmup_epochs {
                let mut rng = stream(config.seed, STREAM_ECC, it);
                match sample_ecc_batch(geom, &mut rng, config.ecc_samples_per_iter, n_s, epsilon) {
                    Ok(b) => Some(b),
                    Err(TrainError::EccSamplingExhausted(_)) => {
                        ecc_skipped = true;
                        None
                    }
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            let lr = config.lr_at(it, total_iters);
            let snapshot = &*model;
            let mut tape = Tape::new(snapshot);
            let terms = total_loss(
                &mut tape,
                geom,
                batch,
                ecc_batch.as_ref(),
                lambda,
                config.n_samples,
                Quadrature::Jittered { seed: jitter },
                config.ecc_domain,
            );
            let recon = tape.value(terms.recon);
            let ecc = terms.ecc.map(|e| tape.value(e));
            let total = tape.value(terms.total);
            if !total.is_finite() {
                drop(tape);
                let checkpoint = match &files.out_dir {
                    Some(dir) => {
                        let p = dir.join("diagnostic_state.bin");
                        save_state(&p, model, &state)?;
                        Some(p)
                    }
                    None => None,
                };
                return Err(TrainError::NonFinite { iteration: it, checkpoint });
            }
            let grad = tape.backward(terms.total).expect("fresh tape");
            adam_step(model.params_mut(), &grad, &mut state.adam, lr, adam)?;
            state.running_recon = if it == 0 { recon } else { 0.98 * state.running_recon + 0.02 * recon };
            state.iteration += 1;
            if it.is_multiple_of(config.log_every.max(1) as u64) || ecc_skipped {
                let rec = LogRecord {
                    iteration: it,
                    epoch,
                    recon_loss: recon,
                    ecc_loss: ecc,
                    lambda,
                    total_loss: total,
                    lr,
                    wall_ms: wall_base + start.elapsed().as_millis() as u64,
                    ecc_skipped,
                };
                if let Some(w) = log_writer.as_mut() {
                    writeln!(w, "{}", serde_json::to_string(&rec).map_err(|e| TrainError::State(e.to_string()))?)?;
                }
                log.push(rec);
            }
        }
        state.epoch = epoch + 1;
        state.wall_ms = wall_base + start.elapsed().as_millis() as u64;
        if let Some(dir) = &files.out_dir {
            let last = epoch + 1 == config.n_epochs;
            if last || (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
                if let Some(w) = log_writer.as_mut() {
                    w.flush()?;
                }
                save_state(&dir.join(STATE_FILE), model, &state)?;
            }
        }
    }
    if let Some(mut w) = log_writer {
        w.flush()?;
    }
    if let Some(dir) = &files.out_dir {
        save_model(&dir.join(MODEL_FILE), model)?;
    }
    let final_recon_loss = log.last().map_or(f64::NAN, |r| r.recon_loss);
    Ok(TrainReport {
        log,
        state,
        lambda,
        batches_per_epoch,
        final_recon_loss,
    })
}

/// Mean reconstruction loss of `model` over every pixel of `proj`, with
/// midpoint sampling.
pub fn full_recon_loss(proj: &ProjectionSet, model: &FieldModel, n_samples: usize, rays_per_batch: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches = make_epoch_batches(proj, rays_per_batch, &mut rng);
    let mut total = 0.0;
    let mut count = 0usize;
    for b in &batches {
        let mut tape = Tape::new(model);
        let l = crate::losses::recon_loss(&mut tape, b, n_samples, Quadrature::Midpoint);
        total += tape.value(l) * b.len() as f64;
        count += b.len();
    }
    total / count.max(1) as f64
}

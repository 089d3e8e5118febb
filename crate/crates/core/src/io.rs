//! On-disk formats: raw little-endian f32 arrays with JSON sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::ConeBeamGeometry;
use crate::projector::{ProjectionSet, ProjectorError};
use crate::volume::{GridSpec, VolumeError, VoxelVolume};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad sidecar: {msg}")]
    Sidecar { path: PathBuf, msg: String },
    #[error("{path}: expected {expected} bytes, found {got}")]
    Size { path: PathBuf, expected: usize, got: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
}

/// Provenance attached to every written artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
    pub extent: [f64; 3],
    pub units: String,
    pub layout: String,
    #[serde(flatten)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSidecar {
    pub geometry: ConeBeamGeometry,
    pub i0: f64,
    pub angles_deg: Vec<f64>,
    pub layout: String,
    #[serde(flatten)]
    pub provenance: Provenance,
}

/// SHA-256 of the compact JSON form of `value`, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// `foo.raw` → `foo.json`.
pub fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn write_f32(path: &Path, values: &[f64]) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(file_err(parent))?;
    }
    fs::write(path, bytes).map_err(file_err(path))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>, IoError> {
    let bytes = fs::read(path).map_err(file_err(path))?;
    if bytes.len() != expected * 4 {
        return Err(IoError::Size {
            path: path.to_path_buf(),
            expected: expected * 4,
            got: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| IoError::Sidecar {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(file_err(parent))?;
    }
    fs::write(path, text + "\n").map_err(file_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Sidecar {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_volume(path: &Path, vol: &VoxelVolume, provenance: Provenance) -> Result<(), IoError> {
    write_f32(path, &vol.data)?;
    write_json(
        &sidecar_path(path),
        &VolumeSidecar {
            dims: vol.dims,
            extent: vol.extent,
            units: "1/mm".into(),
            layout: "f32le, x fastest, z slowest".into(),
            provenance,
        },
    )
}

pub fn read_volume(path: &Path) -> Result<(VoxelVolume, VolumeSidecar), IoError> {
    let side: VolumeSidecar = read_json(&sidecar_path(path))?;
    let spec = GridSpec {
        dims: side.dims,
        extent: side.extent,
    };
    let data = read_f32(path, spec.len())?;
    Ok((VoxelVolume::from_data(spec, data)?, side))
}

pub fn write_projections(path: &Path, proj: &ProjectionSet, provenance: Provenance) -> Result<(), IoError> {
    write_f32(path, &proj.data)?;
    write_json(
        &sidecar_path(path),
        &ProjectionSidecar {
            geometry: proj.geometry.clone(),
            i0: proj.i0,
            angles_deg: proj.geometry.angles.iter().map(|a| a.to_degrees()).collect(),
            layout: "f32le, u fastest, then v, then view".into(),
            provenance,
        },
    )
}

pub fn read_projections(path: &Path) -> Result<(ProjectionSet, ProjectionSidecar), IoError> {
    let side: ProjectionSidecar = read_json(&sidecar_path(path))?;
    let g = &side.geometry;
    let data = read_f32(path, g.angles.len() * g.n_u * g.n_v)?;
    Ok((ProjectionSet::new(side.geometry.clone(), side.i0, data)?, side))
}

/// 16-bit binary PGM of a row-major image, linearly windowed to `[lo, hi]`.
pub fn encode_pgm16(width: usize, height: usize, pixels: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for &p in pixels {
        let x = ((p - lo) / span).clamp(0.0, 1.0);
        let q = (x * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

//! Model checkpoints: magic, JSON header with the field configuration, then
//! the parameters as little-endian f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FieldConfig, FieldError, FieldModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EPINAF01";

pub fn save_model(path: &Path, model: &FieldModel) -> Result<(), FieldError> {
    let header = serde_json::to_vec(model.config()).map_err(|e| FieldError::BadCheckpoint(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(model.param_count() as u64).to_le_bytes())?;
    for &p in model.params() {
        w.write_all(&(p as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FieldModel, FieldError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(FieldError::BadCheckpoint("bad magic".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let mut header = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut header)?;
    let config: FieldConfig =
        serde_json::from_slice(&header).map_err(|e| FieldError::BadCheckpoint(e.to_string()))?;
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let n = u64::from_le_bytes(len8) as usize;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FieldModel::from_params(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::EncodingConfig;

    #[test]
    fn round_trip_to_f32_precision() {
        let cfg = FieldConfig {
            encoding: EncodingConfig::Hashgrid {
                n_levels: 2,
                table_size: 64,
                features_per_level: 2,
                coarsest: 2,
                finest: 5,
            },
            hidden: vec![4],
            bound: 30.0,
        };
        let m = FieldModel::new(cfg, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&path, &m).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        std::fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(load_model(&path), Err(FieldError::BadCheckpoint(_))));
    }
}

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::FieldError;

const PRIME_Y: u64 = 2_654_435_761;
const PRIME_Z: u64 = 805_459_861;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncodingConfig {
    /// `[q, sin(f·2^k·π·q_d), cos(f·2^k·π·q_d)]` for `k < n_frequencies`.
    Fourier { n_frequencies: usize, base_frequency: f64 },
    /// Multiresolution grid of learned vertex features. Coarse levels whose
    /// vertex count fits the table are stored densely, finer ones hashed.
    Hashgrid {
        n_levels: usize,
        table_size: usize,
        features_per_level: usize,
        coarsest: usize,
        finest: usize,
    },
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig::Hashgrid {
            n_levels: 8,
            table_size: 1 << 16,
            features_per_level: 2,
            coarsest: 8,
            finest: 128,
        }
    }
}

impl EncodingConfig {
    pub fn fourier_default() -> Self {
        EncodingConfig::Fourier {
            n_frequencies: 8,
            base_frequency: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        match *self {
            EncodingConfig::Fourier {
                n_frequencies,
                base_frequency,
            } => {
                if n_frequencies == 0 || !(base_frequency > 0.0) {
                    return Err(FieldError::InvalidConfig("fourier encoding needs n_frequencies ≥ 1 and a positive base"));
                }
            }
            EncodingConfig::Hashgrid {
                n_levels,
                table_size,
                features_per_level,
                coarsest,
                finest,
            } => {
                if n_levels == 0 || table_size == 0 || features_per_level == 0 || coarsest == 0 {
                    return Err(FieldError::InvalidConfig("hashgrid sizes must be positive"));
                }
                let res = self.resolutions();
                if res.windows(2).any(|w| w[1] <= w[0]) || (n_levels > 1 && finest <= coarsest) {
                    return Err(FieldError::InvalidConfig("hashgrid resolutions must strictly increase"));
                }
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            EncodingConfig::Fourier { n_frequencies, .. } => 3 + 6 * n_frequencies,
            EncodingConfig::Hashgrid {
                n_levels,
                features_per_level,
                ..
            } => n_levels * features_per_level,
        }
    }

    /// Per-level grid resolutions, geometric from coarsest to finest.
    pub fn resolutions(&self) -> Vec<usize> {
        match *self {
            EncodingConfig::Fourier { .. } => Vec::new(),
            EncodingConfig::Hashgrid {
                n_levels,
                coarsest,
                finest,
                ..
            } => {
                if n_levels == 1 {
                    return vec![coarsest];
                }
                let growth = (finest as f64 / coarsest as f64).powf(1.0 / (n_levels - 1) as f64);
                (0..n_levels)
                    .map(|l| {
                        // Nudge so exact powers don't floor one below.
                        (coarsest as f64 * growth.powi(l as i32) + 1e-9).floor() as usize
                    })
                    .collect()
            }
        }
    }

    /// Number of stored feature vectors per level.
    pub fn level_entries(&self) -> Vec<usize> {
        match *self {
            EncodingConfig::Fourier { .. } => Vec::new(),
            EncodingConfig::Hashgrid { table_size, .. } => self
                .resolutions()
                .into_iter()
                .map(|n| (n + 1).pow(3).min(table_size))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            EncodingConfig::Fourier { .. } => 0,
            EncodingConfig::Hashgrid {
                features_per_level, ..
            } => self.level_entries().iter().sum::<usize>() * features_per_level,
        }
    }
}

/// Precomputed level layout for a hashgrid.
#[derive(Debug, Clone)]
pub(crate) struct GridLayout {
    pub resolutions: Vec<usize>,
    pub entries: Vec<usize>,
    /// Offset of each level's first parameter.
    pub offsets: Vec<usize>,
    pub features: usize,
    pub table_size: usize,
}

impl GridLayout {
    pub fn new(config: &EncodingConfig) -> Option<Self> {
        let EncodingConfig::Hashgrid {
            table_size,
            features_per_level,
            ..
        } = *config
        else {
            return None;
        };
        let resolutions = config.resolutions();
        let entries = config.level_entries();
        let mut offsets = Vec::with_capacity(entries.len());
        let mut acc = 0;
        for &e in &entries {
            offsets.push(acc);
            acc += e * features_per_level;
        }
        Some(GridLayout {
            resolutions,
            entries,
            offsets,
            features: features_per_level,
            table_size,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.resolutions.len()
    }

    #[inline]
    pub fn vertex_index(&self, level: usize, i: u64, j: u64, k: u64) -> usize {
        let n = self.resolutions[level] as u64 + 1;
        if (self.entries[level] as u64) == n * n * n {
            (i + n * (j + n * k)) as usize
        } else {
            let h = i ^ j.wrapping_mul(PRIME_Y) ^ k.wrapping_mul(PRIME_Z);
            let t = self.table_size as u64;
            (if t.is_power_of_two() { h & (t - 1) } else { h % t }) as usize
        }
    }

    /// Parameter index of feature 0 of each of the 8 corners around `q`
    /// (in `[−1, 1]³`) at `level`, with trilinear weights.
    #[inline]
    pub fn corners(&self, level: usize, q: &[f64; 3], idx: &mut [usize], w: &mut [f64]) {
        let n = self.resolutions[level];
        let mut base = [0u64; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let x = (q[a] + 1.0) * 0.5 * n as f64;
            let f = x.floor().min(n as f64 - 1.0).max(0.0);
            base[a] = f as u64;
            frac[a] = x - f;
        }
        for c in 0..8 {
            let (bi, bj, bk) = ((c & 1) as u64, ((c >> 1) & 1) as u64, ((c >> 2) & 1) as u64);
            let v = self.vertex_index(level, base[0] + bi, base[1] + bj, base[2] + bk);
            idx[c] = self.offsets[level] + v * self.features;
            w[c] = (if bi == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if bj == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if bk == 1 { frac[2] } else { 1.0 - frac[2] });
        }
    }
}

pub(crate) fn fourier_features(q: &[f64; 3], n_frequencies: usize, base: f64, out: &mut [f64]) {
    out[..3].copy_from_slice(q);
    let mut o = 3;
    for k in 0..n_frequencies {
        let f = base * (1u64 << k) as f64 * PI;
        for &x in q {
            let (s, c) = (f * x).sin_cos();
            out[o] = s;
            out[o + 1] = c;
            o += 2;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_resolutions_and_sizes() {
        let cfg = EncodingConfig::default();
        assert_eq!(cfg.resolutions(), vec![8, 11, 17, 26, 39, 57, 86, 128]);
        let entries = cfg.level_entries();
        assert_eq!(entries[0], 729);
        assert_eq!(entries[4], 64000);
        assert_eq!(entries[5], 65536);
        assert_eq!(cfg.output_dim(), 16);
        assert_eq!(cfg.param_count(), entries.iter().sum::<usize>() * 2);
    }

    #[test]
    fn fourier_at_origin() {
        let mut out = vec![0.0; 3 + 6 * 4];
        fourier_features(&[0.0; 3], 4, 1.0, &mut out);
        assert_eq!(&out[..3], &[0.0; 3]);
        for pair in out[3..].chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn corner_weights_sum_to_one() {
        let layout = GridLayout::new(&EncodingConfig::default()).unwrap();
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        for level in 0..layout.n_levels() {
            for q in [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], [0.123, -0.77, 0.5]] {
                layout.corners(level, &q, &mut idx, &mut w);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let end = layout.offsets[level] + layout.entries[level] * layout.features;
                assert!(idx.iter().all(|&i| i >= layout.offsets[level] && i < end));
            }
        }
    }

    #[test]
    fn rejects_non_increasing_levels() {
        let cfg = EncodingConfig::Hashgrid {
            n_levels: 8,
            table_size: 1024,
            features_per_level: 2,
            coarsest: 8,
            finest: 10,
        };
        assert!(cfg.validate().is_err());
    }
}

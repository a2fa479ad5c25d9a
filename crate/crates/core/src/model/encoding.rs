use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EncodingError {
    #[error("value {value} is not in the vocabulary of dimension {dim}")]
    OutOfVocabulary { dim: usize, value: f32 },
    #[error("index {index} out of range for dimension {dim}")]
    BadIndex { dim: usize, index: usize },
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vocabulary file: {0}")]
    File(String),
}

/// Per-dimension categorical vocabularies for observation values followed
/// by the reward. Each categorical variable is one-hot over `n` slots, `n`
/// being the largest vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    /// Sorted, deduplicated values; the last entry is the reward dimension.
    pub vocab: Vec<Vec<f32>>,
}

impl Encoding {
    pub fn new(mut vocab: Vec<Vec<f32>>) -> Self {
        for values in &mut vocab {
            values.sort_by(f32::total_cmp);
            values.dedup();
        }
        Self { vocab }
    }

    /// Number of observation dimensions (excluding the reward).
    pub fn obs_dims(&self) -> usize {
        self.vocab.len() - 1
    }

    /// One-hot width `n`.
    pub fn num_categories(&self) -> usize {
        self.vocab.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn vocab_size(&self, dim: usize) -> usize {
        self.vocab[dim].len()
    }

    pub fn encode_value(&self, dim: usize, value: f32) -> Result<u16, EncodingError> {
        self.vocab[dim]
            .binary_search_by(|v| v.total_cmp(&value))
            .map(|i| i as u16)
            .map_err(|_| EncodingError::OutOfVocabulary { dim, value })
    }

    pub fn decode_value(&self, dim: usize, index: u16) -> Result<f32, EncodingError> {
        self.vocab[dim]
            .get(index as usize)
            .copied()
            .ok_or(EncodingError::BadIndex { dim, index: index as usize })
    }

    /// Encodes observation values followed by the reward.
    pub fn encode(&self, values: &[f32]) -> Result<Vec<u16>, EncodingError> {
        if values.len() != self.vocab.len() {
            return Err(EncodingError::DimensionMismatch {
                expected: self.vocab.len(),
                got: values.len(),
            });
        }
        values.iter().enumerate().map(|(d, &v)| self.encode_value(d, v)).collect()
    }

    pub fn decode(&self, indices: &[u16]) -> Result<Vec<f32>, EncodingError> {
        if indices.len() != self.vocab.len() {
            return Err(EncodingError::DimensionMismatch {
                expected: self.vocab.len(),
                got: indices.len(),
            });
        }
        indices.iter().enumerate().map(|(d, &i)| self.decode_value(d, i)).collect()
    }

    /// Splits an observation + reward pair into observation tokens and a
    /// reward token.
    pub fn encode_step(&self, obs: &[f32], reward: f32) -> Result<(Vec<u16>, u16), EncodingError> {
        if obs.len() != self.obs_dims() {
            return Err(EncodingError::DimensionMismatch { expected: self.obs_dims(), got: obs.len() });
        }
        let tokens = obs
            .iter()
            .enumerate()
            .map(|(d, &v)| self.encode_value(d, v))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((tokens, self.encode_value(self.obs_dims(), reward)?))
    }

    /// One-hot tensor of shape `(values.len(), n)`, flattened row-major.
    pub fn one_hot(&self, values: &[f32]) -> Result<Vec<f32>, EncodingError> {
        let n = self.num_categories();
        let idx = self.encode(values)?;
        let mut out = vec![0.0; idx.len() * n];
        for (d, &i) in idx.iter().enumerate() {
            out[d * n + i as usize] = 1.0;
        }
        Ok(out)
    }

    /// Whether every value of `other` is already in this vocabulary.
    pub fn covers(&self, other: &Encoding) -> bool {
        self.vocab.len() == other.vocab.len()
            && other
                .vocab
                .iter()
                .enumerate()
                .all(|(d, vals)| vals.iter().all(|&v| self.encode_value(d, v).is_ok()))
    }

    pub fn save(&self, path: &Path) -> Result<(), EncodingError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| EncodingError::File(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| EncodingError::File(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EncodingError> {
        let text = std::fs::read_to_string(path).map_err(|e| EncodingError::File(e.to_string()))?;
        let enc: Encoding = serde_json::from_str(&text).map_err(|e| EncodingError::File(e.to_string()))?;
        Ok(Encoding::new(enc.vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_vocab_is_identity_like() {
        let enc = Encoding::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(enc.encode(&[0.0, 1.0]).unwrap(), vec![0, 1]);
    }

    #[test]
    fn round_trip_and_miss() {
        let enc = Encoding::new(vec![vec![-1.0, 1.0], vec![0.0, 1.0, 2.0], vec![-3.0, 15.0, 1.0]]);
        let v = [1.0, 2.0, 15.0];
        assert_eq!(enc.decode(&enc.encode(&v).unwrap()).unwrap(), v);
        assert_eq!(enc.num_categories(), 3);
        assert!(matches!(
            enc.encode(&[0.5, 2.0, 1.0]),
            Err(EncodingError::OutOfVocabulary { dim: 0, .. })
        ));
        assert!(enc.encode(&[1.0]).is_err());
    }

    #[test]
    fn one_hot_layout() {
        let enc = Encoding::new(vec![vec![0.0, 1.0, 2.0], vec![5.0]]);
        assert_eq!(enc.one_hot(&[2.0, 5.0]).unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}

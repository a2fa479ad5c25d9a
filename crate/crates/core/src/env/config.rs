use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EnvError;

/// Environment parameters. Every field has a default and can be overridden
/// from a TOML key-value file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_feature_axes: usize,
    pub num_stones_per_trial: usize,
    pub num_potions_per_trial: usize,
    pub num_trials: usize,
    pub steps_per_trial: usize,
    /// Stone reward keyed by the number of latent axes at their positive extreme.
    #[serde(with = "string_keys")]
    pub reward_table: BTreeMap<usize, f64>,
    pub edge_deletion_enabled: bool,
    /// Perceptual value shown for the low and high end of every feature axis.
    pub feature_values: [f32; 2],
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_feature_axes: 3,
            num_stones_per_trial: 3,
            num_potions_per_trial: 12,
            num_trials: 10,
            steps_per_trial: 20,
            reward_table: BTreeMap::from([(0, -3.0), (1, -1.0), (2, 1.0), (3, 15.0)]),
            edge_deletion_enabled: true,
            feature_values: [-1.0, 1.0],
            seed: 0,
        }
    }
}

impl EnvConfig {
    /// The two-axis "square" scale, small enough to enumerate every chemistry.
    pub fn reduced() -> Self {
        Self {
            num_feature_axes: 2,
            num_stones_per_trial: 2,
            num_potions_per_trial: 4,
            num_trials: 10,
            steps_per_trial: 10,
            reward_table: BTreeMap::from([(0, -3.0), (1, 1.0), (2, 15.0)]),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, EnvError> {
        let config: Self = toml::from_str(text).map_err(|e| EnvError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnvError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Applies the keys set in `text` on top of this config.
    pub fn with_overrides(&self, text: &str) -> Result<Self, EnvError> {
        let err = |e: &dyn std::fmt::Display| EnvError::Config(e.to_string());
        let mut merged: toml::Table = toml::from_str(&self.to_toml_string()).map_err(|e| err(&e))?;
        let overrides: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        merged.extend(overrides);
        Self::from_toml_str(&toml::to_string(&merged).map_err(|e| err(&e))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |msg: String| Err(EnvError::Config(msg));
        if !(2..=3).contains(&self.num_feature_axes) {
            return fail(format!(
                "num_feature_axes must be 2 or 3, got {}",
                self.num_feature_axes
            ));
        }
        if self.num_trials == 0 {
            return fail("num_trials must be >= 1".into());
        }
        if self.steps_per_trial == 0 {
            return fail("steps_per_trial must be >= 1".into());
        }
        if self.num_stones_per_trial == 0 {
            return fail("num_stones_per_trial must be >= 1".into());
        }
        for count in 0..=self.num_feature_axes {
            if !self.reward_table.contains_key(&count) {
                return fail(format!("reward_table is missing an entry for {count}"));
            }
        }
        if let Some(key) = self.reward_table.keys().find(|&&k| k > self.num_feature_axes) {
            return fail(format!("reward_table key {key} exceeds num_feature_axes"));
        }
        if self.feature_values[0] == self.feature_values[1] {
            return fail("feature_values must be two distinct values".into());
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        1 << self.num_feature_axes
    }

    pub fn num_colors(&self) -> usize {
        2 * self.num_feature_axes
    }

    pub fn num_edges(&self) -> usize {
        self.num_feature_axes << (self.num_feature_axes - 1)
    }

    pub fn num_actions(&self) -> usize {
        1 + self.num_stones_per_trial + self.num_stones_per_trial * self.num_potions_per_trial
    }

    pub fn episode_length(&self) -> usize {
        self.num_trials * self.steps_per_trial
    }

    /// Length of the flat observation vector.
    pub fn observation_dim(&self) -> usize {
        self.num_stones_per_trial * (self.num_feature_axes + 2) + self.num_potions_per_trial * 2 + 1
    }

    pub fn vertex_reward(&self, vertex: usize) -> f64 {
        self.reward_table[&(vertex.count_ones() as usize)]
    }

    /// Upper bound on the reward collectable within one trial.
    pub fn max_trial_reward(&self) -> f64 {
        let best = self.reward_table.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        best.max(0.0) * self.num_stones_per_trial as f64
    }

    /// Stable 64-bit digest of the canonical serialized config.
    pub fn hash64(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// TOML table keys are strings; the reward table is keyed by counts.
mod string_keys {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        let keyed: BTreeMap<String, f64> = map.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        keyed.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("reward_table key {k:?} is not a count")))
            })
            .collect()
    }
}

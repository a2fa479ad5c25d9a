//! Offline trajectories under a uniform random policy.
//!
//! ATD1 file layout, all integers and floats little-endian:
//!
//! ```text
//! "ATD1"                      magic
//! u32                         header length
//! [u8]                        UTF-8 JSON header (see DatasetHeader)
//! per episode:
//!   u32                       record length in bytes (excluding this field)
//!   u64                       episode seed
//!   u64                       config hash
//!   u32                       number of steps T
//!   T times:
//!     f32 * obs_dim           observation o_t
//!     f32                     reward received entering step t
//!     u32                     action a_t
//!   f32 * obs_dim             final observation o_T
//!   f32                       final reward r_T
//! ```
//!
//! Observations follow the environment layout: per stone slot the feature
//! values, reward and collected flag; per potion slot the color and used
//! flag; then the step index within the trial.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{derive_seed, Action, EnvConfig, EnvError, EpisodeState};
use crate::model::{Encoding, EncodingError};

pub const MAGIC: &[u8; 4] = b"ATD1";
pub const FORMAT_VERSION: u32 = 1;

/// Episodes generated per parallel batch before they are written out.
const WRITE_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"ATD1\"")]
    BadMagic,
    #[error("bad header: {0}")]
    Header(String),
    #[error("malformed record {index}: {reason}")]
    Malformed { index: usize, reason: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("replay of episode seed {seed} diverges at step {step}")]
    ReplayMismatch { seed: u64, step: usize },
    #[error("dataset is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub config: EnvConfig,
    pub num_episodes: usize,
    pub obs_dim: usize,
    pub seed: u64,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub observation: Vec<f32>,
    /// Reward received on entering this step (0 for the first step).
    pub reward: f32,
    pub action: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub config_hash: u64,
    pub steps: Vec<TrajectoryStep>,
    pub final_observation: Vec<f32>,
    pub final_reward: f32,
}

impl TrajectoryRecord {
    pub fn actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|s| s.action as usize)
    }

    /// Observation and reward at position `t` in `0..=steps.len()`.
    pub fn observation_at(&self, t: usize) -> (&[f32], f32) {
        match self.steps.get(t) {
            Some(s) => (&s.observation, s.reward),
            None => (&self.final_observation, self.final_reward),
        }
    }

    /// Sum of rewards collected over the episode.
    pub fn score(&self) -> f64 {
        self.steps.iter().skip(1).map(|s| s.reward as f64).sum::<f64>() + self.final_reward as f64
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&[0; 4]);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.steps.len() as u32).to_le_bytes());
        for s in &self.steps {
            for v in &s.observation {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&s.reward.to_le_bytes());
            out.extend_from_slice(&s.action.to_le_bytes());
        }
        for v in &self.final_observation {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.final_reward.to_le_bytes());
        let len = (out.len() - start - 4) as u32;
        out[start..start + 4].copy_from_slice(&len.to_le_bytes());
    }

    fn decode(buf: &[u8], obs_dim: usize, index: usize) -> Result<Self, DatasetError> {
        let bad = |reason: &str| DatasetError::Malformed { index, reason: reason.to_string() };
        if buf.len() < 20 {
            return Err(bad("record shorter than its fixed fields"));
        }
        let mut words = buf.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()));
        let mut word = move || words.next().unwrap();
        let seed = word() as u64 | (word() as u64) << 32;
        let config_hash = word() as u64 | (word() as u64) << 32;
        let num_steps = word() as usize;
        let expected = 20 + num_steps * (obs_dim + 2) * 4 + (obs_dim + 1) * 4;
        if buf.len() != expected {
            return Err(bad("record length does not match its step count"));
        }
        let mut word_f32 = || f32::from_bits(word());
        let mut steps = Vec::with_capacity(num_steps);
        for _ in 0..num_steps {
            let observation = (0..obs_dim).map(|_| word_f32()).collect();
            let reward = word_f32();
            let action = word_f32().to_bits();
            steps.push(TrajectoryStep { observation, reward, action });
        }
        let final_observation = (0..obs_dim).map(|_| word_f32()).collect();
        let final_reward = word_f32();
        Ok(Self { seed, config_hash, steps, final_observation, final_reward })
    }
}

/// Seed of episode `index` in a dataset generated with `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// One full episode under a uniform policy. The policy draws from its own
/// stream so that environment randomness depends on the seed alone.
pub fn rollout(config: &EnvConfig, seed: u64) -> Result<TrajectoryRecord, DatasetError> {
    let (mut env, obs) = EpisodeState::reset(config, seed)?;
    let mut policy = ChaCha8Rng::seed_from_u64(seed);
    policy.set_stream(1);
    let num_actions = config.num_actions();
    let mut steps = Vec::with_capacity(config.episode_length());
    let mut current = (obs.0, 0.0f32);
    loop {
        let action = policy.gen_range(0..num_actions);
        let outcome = env.step(Action::from_index(action, config)?)?;
        steps.push(TrajectoryStep { observation: current.0, reward: current.1, action: action as u32 });
        current = (outcome.observation.0, outcome.reward as f32);
        if outcome.done {
            break;
        }
    }
    Ok(TrajectoryRecord {
        seed,
        config_hash: config.hash64(),
        steps,
        final_observation: current.0,
        final_reward: current.1,
    })
}

/// Re-runs the environment from the record's seed and action list and
/// checks every observation and reward bit for bit.
pub fn replay(record: &TrajectoryRecord, config: &EnvConfig) -> Result<(), DatasetError> {
    let mismatch = |step| DatasetError::ReplayMismatch { seed: record.seed, step };
    if record.config_hash != config.hash64() || record.steps.len() != config.episode_length() {
        return Err(mismatch(0));
    }
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let (mut env, obs) = EpisodeState::reset(config, record.seed)?;
    let mut current = (obs.0, 0.0f32);
    for (t, step) in record.steps.iter().enumerate() {
        if bits(&current.0) != bits(&step.observation) || current.1.to_bits() != step.reward.to_bits() {
            return Err(mismatch(t));
        }
        let outcome = env.step(Action::from_index(step.action as usize, config)?)?;
        current = (outcome.observation.0, outcome.reward as f32);
    }
    if bits(&current.0) != bits(&record.final_observation)
        || current.1.to_bits() != record.final_reward.to_bits()
    {
        return Err(mismatch(record.steps.len()));
    }
    Ok(())
}

fn write_header<W: Write>(w: &mut W, header: &DatasetHeader) -> Result<(), DatasetError> {
    let json = serde_json::to_vec(header).map_err(|e| DatasetError::Header(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

/// Writes `num_episodes` uniform-policy episodes to `path`. Output bytes
/// depend only on the arguments.
pub fn generate(
    config: &EnvConfig,
    num_episodes: usize,
    seed: u64,
    path: &Path,
) -> Result<DatasetHeader, DatasetError> {
    config.validate()?;
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        config: config.clone(),
        num_episodes,
        obs_dim: config.observation_dim(),
        seed,
        policy: "uniform".into(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, &header)?;
    let mut buf = Vec::new();
    for start in (0..num_episodes).step_by(WRITE_CHUNK) {
        let end = (start + WRITE_CHUNK).min(num_episodes);
        let records = (start..end)
            .into_par_iter()
            .map(|i| rollout(config, episode_seed(seed, i)))
            .collect::<Result<Vec<_>, _>>()?;
        for r in &records {
            buf.clear();
            r.encode(&mut buf);
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(header)
}

/// Streaming reader over an ATD1 file.
pub struct DatasetReader<R> {
    pub header: DatasetHeader,
    inner: R,
    next_index: usize,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut inner: R) -> Result<Self, DatasetError> {
        let mut magic = [0u8; 4];
        inner.read_exact(&mut magic).map_err(|_| DatasetError::BadMagic)?;
        if &magic != MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let mut len = [0u8; 4];
        inner.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        inner.read_exact(&mut json)?;
        let header: DatasetHeader =
            serde_json::from_slice(&json).map_err(|e| DatasetError::Header(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(DatasetError::Header(format!("unsupported version {}", header.version)));
        }
        if header.obs_dim != header.config.observation_dim() {
            return Err(DatasetError::Header("obs_dim does not match config".into()));
        }
        Ok(Self { header, inner, next_index: 0 })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<TrajectoryRecord, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_index >= self.header.num_episodes {
            return None;
        }
        let index = self.next_index;
        self.next_index += 1;
        let mut read = || -> Result<TrajectoryRecord, DatasetError> {
            let mut len = [0u8; 4];
            self.inner.read_exact(&mut len).map_err(|_| DatasetError::Malformed {
                index,
                reason: "file ends before the declared episode count".into(),
            })?;
            let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
            self.inner.read_exact(&mut buf).map_err(|_| DatasetError::Malformed {
                index,
                reason: "truncated record".into(),
            })?;
            TrajectoryRecord::decode(&buf, self.header.obs_dim, index)
        };
        Some(read())
    }
}

/// Dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<TrajectoryRecord>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let reader = DatasetReader::open(path)?;
        let header = reader.header.clone();
        let records = reader.collect::<Result<Vec<_>, _>>()?;
        Ok(Self { header, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Per-dimension sorted sets of every observation value seen, plus the
/// reward dimension last.
pub fn extract_vocab<'a>(
    records: impl IntoIterator<Item = &'a TrajectoryRecord>,
) -> Result<Encoding, DatasetError> {
    let mut sets: Option<Vec<Vec<f32>>> = None;
    let add = |sets: &mut Vec<Vec<f32>>, obs: &[f32], reward: f32| {
        for (set, &v) in sets.iter_mut().zip(obs.iter().chain(std::iter::once(&reward))) {
            if !set.iter().any(|x| x.to_bits() == v.to_bits()) {
                set.push(v);
            }
        }
    };
    for r in records {
        let sets = sets.get_or_insert_with(|| vec![Vec::new(); r.final_observation.len() + 1]);
        for s in &r.steps {
            add(sets, &s.observation, s.reward);
        }
        add(sets, &r.final_observation, r.final_reward);
    }
    Ok(Encoding::new(sets.ok_or(DatasetError::Empty)?))
}

/// Tokens of one episode: `obs` and `rewards` have `T + 1` entries,
/// `actions` has `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTokens {
    pub obs: Vec<Vec<u16>>,
    pub rewards: Vec<u16>,
    pub actions: Vec<u16>,
}

impl EpisodeTokens {
    pub fn from_record(record: &TrajectoryRecord, encoding: &Encoding) -> Result<Self, DatasetError> {
        let t = record.steps.len();
        let mut obs = Vec::with_capacity(t + 1);
        let mut rewards = Vec::with_capacity(t + 1);
        for i in 0..=t {
            let (o, r) = record.observation_at(i);
            let (tokens, reward) = encoding.encode_step(o, r)?;
            obs.push(tokens);
            rewards.push(reward);
        }
        let actions = record.steps.iter().map(|s| s.action as u16).collect();
        Ok(Self { obs, rewards, actions })
    }

    /// Model inputs and teacher-forcing targets for a full forward pass.
    pub fn model_inputs(&self) -> (Vec<crate::model::StepTokens>, Vec<Vec<u16>>) {
        let steps = self
            .actions
            .iter()
            .enumerate()
            .map(|(t, &a)| crate::model::StepTokens {
                obs: self.obs[t].clone(),
                reward: self.rewards[t],
                action: a,
            })
            .collect();
        (steps, self.obs[1..].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// Record indices in this batch.
    pub indices: Vec<usize>,
    pub episodes: Vec<EpisodeTokens>,
}

/// Record order for one epoch: a permutation of `0..len` fixed by `seed`.
pub fn epoch_order(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Token batches covering every record exactly once, in the order given by
/// `seed`. The last batch may be short.
pub fn iterate<'a>(
    dataset: &'a Dataset,
    encoding: &'a Encoding,
    batch_size: usize,
    seed: u64,
) -> impl Iterator<Item = Result<TokenBatch, DatasetError>> + 'a {
    let order = epoch_order(dataset.len(), seed);
    let size = batch_size.max(1);
    order
        .chunks(size)
        .map(|c| c.to_vec())
        .collect::<Vec<_>>()
        .into_iter()
        .map(move |indices| {
            let episodes = indices
                .iter()
                .map(|&i| EpisodeTokens::from_record(&dataset.records[i], encoding))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(TokenBatch { indices, episodes })
        })
}

/// Every value each observation dimension (and the reward, last) can take
/// under `config`, derived from the rules rather than from data.
pub fn admissible_values(config: &EnvConfig) -> Vec<Vec<f32>> {
    let mut rewards: Vec<f32> = config.reward_table.values().map(|&r| r as f32).collect();
    let mut dims = Vec::with_capacity(config.observation_dim() + 1);
    for _ in 0..config.num_stones_per_trial {
        for _ in 0..config.num_feature_axes {
            dims.push(config.feature_values.to_vec());
        }
        dims.push(rewards.clone());
        dims.push(vec![0.0, 1.0]);
    }
    for _ in 0..config.num_potions_per_trial {
        dims.push((0..config.num_colors()).map(|c| c as f32).collect());
        dims.push(vec![0.0, 1.0]);
    }
    dims.push((0..config.steps_per_trial).map(|s| s as f32).collect());
    rewards.push(0.0);
    dims.push(rewards);
    Encoding::new(dims).vocab
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let config = EnvConfig::reduced();
        let r = rollout(&config, 3).unwrap();
        let mut buf = Vec::new();
        r.encode(&mut buf);
        let back = TrajectoryRecord::decode(&buf[4..], config.observation_dim(), 0).unwrap();
        assert_eq!(back, r);
        assert!(TrajectoryRecord::decode(&buf[4..buf.len() - 1], config.observation_dim(), 0).is_err());
    }

    #[test]
    fn rollout_has_full_length_and_replays() {
        let config = EnvConfig::reduced();
        let r = rollout(&config, 11).unwrap();
        assert_eq!(r.steps.len(), config.episode_length());
        assert_eq!(r.steps[0].reward, 0.0);
        replay(&r, &config).unwrap();
        let mut bad = r.clone();
        bad.steps[7].observation[0] += 1.0;
        assert!(matches!(replay(&bad, &config), Err(DatasetError::ReplayMismatch { .. })));
    }

    #[test]
    fn batches_cover_every_record_once() {
        let order = epoch_order(37, 5);
        assert_eq!(order, epoch_order(37, 5));
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..37).collect::<Vec<_>>());
        assert_ne!(order, epoch_order(37, 6));
    }

    #[test]
    fn admissible_reduced_values() {
        let v = admissible_values(&EnvConfig::reduced());
        assert_eq!(v.len(), EnvConfig::reduced().observation_dim() + 1);
        assert_eq!(v[0], vec![-1.0, 1.0]);
        assert_eq!(v[2], vec![-3.0, 1.0, 15.0]);
        assert_eq!(v.last().unwrap(), &vec![-3.0, 0.0, 1.0, 15.0]);
    }
}

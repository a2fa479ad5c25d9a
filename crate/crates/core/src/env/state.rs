use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Chemistry, EnvConfig, EnvError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stone {
    pub vertex: usize,
    pub features: Vec<f32>,
    pub reward_value: f64,
    pub collected: bool,
}

impl Stone {
    fn at(vertex: usize, chemistry: &Chemistry, config: &EnvConfig) -> Stone {
        Stone {
            vertex,
            features: chemistry.features(vertex, config.feature_values),
            reward_value: config.vertex_reward(vertex),
            collected: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Potion {
    pub color: usize,
    pub used: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    NoOp,
    CollectStone(usize),
    ApplyPotion { stone: usize, potion: usize },
}

impl Action {
    /// Dense index: 0 is NoOp, then one Collect per stone, then stone-major
    /// potion applications.
    pub fn index(&self, config: &EnvConfig) -> usize {
        let stones = config.num_stones_per_trial;
        match *self {
            Action::NoOp => 0,
            Action::CollectStone(s) => 1 + s,
            Action::ApplyPotion { stone, potion } => {
                1 + stones + stone * config.num_potions_per_trial + potion
            }
        }
    }

    pub fn from_index(index: usize, config: &EnvConfig) -> Result<Action, EnvError> {
        let stones = config.num_stones_per_trial;
        let potions = config.num_potions_per_trial;
        if index >= config.num_actions() {
            return Err(EnvError::InvalidAction(format!(
                "action index {index} out of range 0..{}",
                config.num_actions()
            )));
        }
        Ok(match index {
            0 => Action::NoOp,
            i if i <= stones => Action::CollectStone(i - 1),
            i => {
                let k = i - 1 - stones;
                Action::ApplyPotion { stone: k / potions, potion: k % potions }
            }
        })
    }
}

/// Flat observation vector. Layout per stone slot: feature values, reward,
/// collected flag; per potion slot: color, used flag; then the step index
/// within the trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f32>);

impl Observation {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Observable part of a trial, as decoded from an [`Observation`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedTrial {
    pub stones: Vec<ObservedStone>,
    pub potions: Vec<Potion>,
    pub step_in_trial: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedStone {
    pub features: Vec<f32>,
    pub reward_value: f32,
    pub collected: bool,
}

impl ObservedTrial {
    pub fn decode(obs: &Observation, config: &EnvConfig) -> Result<ObservedTrial, EnvError> {
        let v = obs.as_slice();
        if v.len() != config.observation_dim() {
            return Err(EnvError::Observation(format!(
                "expected {} values, got {}",
                config.observation_dim(),
                v.len()
            )));
        }
        let axes = config.num_feature_axes;
        let mut at = 0;
        let mut stones = Vec::with_capacity(config.num_stones_per_trial);
        for _ in 0..config.num_stones_per_trial {
            stones.push(ObservedStone {
                features: v[at..at + axes].to_vec(),
                reward_value: v[at + axes],
                collected: v[at + axes + 1] != 0.0,
            });
            at += axes + 2;
        }
        let mut potions = Vec::with_capacity(config.num_potions_per_trial);
        for _ in 0..config.num_potions_per_trial {
            potions.push(Potion { color: v[at] as usize, used: v[at + 1] != 0.0 });
            at += 2;
        }
        Ok(ObservedTrial { stones, potions, step_in_trial: v[at] as usize })
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub config: EnvConfig,
    pub chemistry: Chemistry,
    pub stones: Vec<Stone>,
    pub potions: Vec<Potion>,
    pub trial_index: usize,
    pub step_in_trial: usize,
    pub done: bool,
    pub rng: ChaCha8Rng,
}

impl EpisodeState {
    /// Samples a chemistry and the first trial from `seed`.
    pub fn reset(config: &EnvConfig, seed: u64) -> Result<(EpisodeState, Observation), EnvError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chemistry = Chemistry::sample(config, &mut rng);
        let mut state = EpisodeState {
            config: config.clone(),
            chemistry,
            stones: Vec::new(),
            potions: Vec::new(),
            trial_index: 0,
            step_in_trial: 0,
            done: false,
            rng,
        };
        let mut rng = state.rng.clone();
        state.resample_trial(&mut rng);
        state.rng = rng;
        let obs = state.observe();
        Ok((state, obs))
    }

    /// Builds a state from a known chemistry and explicit stone vertices and
    /// potion colors.
    pub fn from_parts(
        config: &EnvConfig,
        chemistry: Chemistry,
        vertices: &[usize],
        colors: &[usize],
        seed: u64,
    ) -> Result<EpisodeState, EnvError> {
        config.validate()?;
        if vertices.len() != config.num_stones_per_trial
            || colors.len() != config.num_potions_per_trial
        {
            return Err(EnvError::Config("stone/potion count does not match config".into()));
        }
        let stones = vertices.iter().map(|&v| Stone::at(v, &chemistry, config)).collect();
        let potions = colors.iter().map(|&color| Potion { color, used: false }).collect();
        Ok(EpisodeState {
            config: config.clone(),
            chemistry,
            stones,
            potions,
            trial_index: 0,
            step_in_trial: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Rebuilds the full state from an observation under a known chemistry.
    /// The trial index is not part of the observation and must be supplied.
    pub fn from_observation(
        config: &EnvConfig,
        chemistry: Chemistry,
        obs: &Observation,
        trial_index: usize,
    ) -> Result<EpisodeState, EnvError> {
        let trial = ObservedTrial::decode(obs, config)?;
        let mut stones = Vec::with_capacity(trial.stones.len());
        for s in &trial.stones {
            let vertex = chemistry
                .vertex_from_features(&s.features, config.feature_values)
                .ok_or_else(|| EnvError::Observation("feature outside vocabulary".into()))?;
            stones.push(Stone { collected: s.collected, ..Stone::at(vertex, &chemistry, config) });
        }
        Ok(EpisodeState {
            config: config.clone(),
            chemistry,
            stones,
            potions: trial.potions,
            trial_index,
            step_in_trial: trial.step_in_trial,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    fn resample_trial<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let config = &self.config;
        self.stones = (0..config.num_stones_per_trial)
            .map(|_| Stone::at(rng.gen_range(0..config.num_vertices()), &self.chemistry, config))
            .collect();
        self.potions = (0..config.num_potions_per_trial)
            .map(|_| Potion { color: rng.gen_range(0..config.num_colors()), used: false })
            .collect();
    }

    /// Starts the next trial with fresh stones and potions; the chemistry is
    /// kept.
    pub fn reset_trial_with<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Observation, EnvError> {
        if self.trial_index + 1 >= self.config.num_trials {
            self.done = true;
            return Err(EnvError::EpisodeComplete);
        }
        self.trial_index += 1;
        self.step_in_trial = 0;
        self.resample_trial(rng);
        Ok(self.observe())
    }

    pub fn reset_trial(&mut self) -> Result<Observation, EnvError> {
        let mut rng = self.rng.clone();
        let out = self.reset_trial_with(&mut rng);
        self.rng = rng;
        out
    }

    pub fn observe(&self) -> Observation {
        let mut v = Vec::with_capacity(self.config.observation_dim());
        for s in &self.stones {
            v.extend_from_slice(&s.features);
            v.push(s.reward_value as f32);
            v.push(s.collected as u8 as f32);
        }
        for p in &self.potions {
            v.push(p.color as f32);
            v.push(p.used as u8 as f32);
        }
        v.push(self.step_in_trial as f32);
        Observation(v)
    }

    /// Global step counter, `trial_index * steps_per_trial + step_in_trial`.
    pub fn global_step(&self) -> usize {
        self.trial_index * self.config.steps_per_trial + self.step_in_trial
    }

    /// Whether the next step ends a trial (its outcome shows a fresh trial).
    pub fn at_trial_boundary(&self) -> bool {
        self.step_in_trial + 1 == self.config.steps_per_trial
    }

    /// Applies an action without advancing counters; returns the reward.
    pub fn apply_action(&mut self, action: Action) -> Result<f64, EnvError> {
        match action {
            Action::NoOp => Ok(0.0),
            Action::CollectStone(s) => {
                let stone = self
                    .stones
                    .get_mut(s)
                    .ok_or_else(|| EnvError::InvalidAction(format!("stone {s} out of range")))?;
                if stone.collected {
                    Ok(0.0)
                } else {
                    stone.collected = true;
                    Ok(stone.reward_value)
                }
            }
            Action::ApplyPotion { stone: s, potion: p } => {
                if s >= self.stones.len() || p >= self.potions.len() {
                    return Err(EnvError::InvalidAction(format!(
                        "stone {s} / potion {p} out of range"
                    )));
                }
                if self.potions[p].used {
                    return Ok(0.0);
                }
                self.potions[p].used = true;
                let stone = &self.stones[s];
                // a collected stone is gone; the potion is still consumed
                if !stone.collected {
                    if let Some(next) = self.chemistry.apply(stone.vertex, self.potions[p].color) {
                        self.stones[s] = Stone::at(next, &self.chemistry, &self.config);
                    }
                }
                Ok(0.0)
            }
        }
    }

    /// Steps with the episode's own generator.
    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        let mut rng = self.rng.clone();
        let out = self.step_with(action, &mut rng);
        self.rng = rng;
        out
    }

    /// Steps using `rng` for any trial resampling. Used by models that need
    /// independent draws of the next trial from a cloned state.
    pub fn step_with<R: Rng + ?Sized>(
        &mut self,
        action: Action,
        rng: &mut R,
    ) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeComplete);
        }
        let reward = self.apply_action(action)?;
        if self.at_trial_boundary() {
            if self.trial_index + 1 >= self.config.num_trials {
                self.done = true;
            } else {
                self.reset_trial_with(rng)?;
            }
        } else {
            self.step_in_trial += 1;
        }
        Ok(StepOutcome { observation: self.observe(), reward, done: self.done })
    }
}

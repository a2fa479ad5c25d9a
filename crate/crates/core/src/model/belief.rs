//! Exact Bayesian filter over an enumerable chemistry space.
//!
//! Every transition is deterministic given the chemistry, and trial
//! resampling draws stones and potions uniformly regardless of it. The
//! posterior is therefore the prior restricted to chemistries that explain
//! the history: chemistry-independent likelihood factors cancel on
//! normalization.

use std::sync::Arc;

use rand::Rng;

use super::{DynamicsModel, EnvModel, EnvOutcome, ModelError};
use crate::env::{Action, Chemistry, EnvConfig, EpisodeState, Observation, StepOutcome};

/// Above this size the per-step filter stops being cheap.
pub const MAX_CHEMISTRIES: usize = 100_000;

struct Tables {
    /// Latent vertex shown by each perceptual pattern.
    vertex_of: Vec<u8>,
    /// Perceptual pattern of each latent vertex.
    pattern_of: Vec<u8>,
    /// `apply[vertex * colors + color]`, 0xff when the potion has no effect.
    apply: Vec<u8>,
}

#[derive(Clone)]
pub struct BeliefModel {
    config: EnvConfig,
    chemistries: Arc<Vec<Chemistry>>,
    tables: Arc<Vec<Tables>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    /// (chemistry index, posterior weight), weights summing to one.
    pub support: Vec<(u32, f64)>,
    pub observation: Observation,
    pub trial_index: usize,
}

impl BeliefState {
    pub fn weight_of(&self, chemistry: usize) -> f64 {
        self.support
            .iter()
            .find(|(i, _)| *i as usize == chemistry)
            .map_or(0.0, |(_, w)| *w)
    }
}

impl std::fmt::Debug for BeliefModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BeliefModel")
            .field("chemistries", &self.chemistries.len())
            .finish()
    }
}

impl BeliefModel {
    pub fn new(config: EnvConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let chemistries = Chemistry::enumerate(&config);
        if chemistries.len() > MAX_CHEMISTRIES {
            return Err(ModelError::SpaceTooLarge(chemistries.len()));
        }
        let axes = config.num_feature_axes;
        let colors = config.num_colors();
        let tables = chemistries
            .iter()
            .map(|c| {
                let vertices = config.num_vertices();
                let mut apply = vec![0xff; vertices * colors];
                for v in 0..vertices {
                    for color in 0..colors {
                        if let Some(u) = c.apply(v, color) {
                            apply[v * colors + color] = u as u8;
                        }
                    }
                }
                Tables {
                    vertex_of: (0..vertices).map(|p| c.rotation.vertex_of(p, axes) as u8).collect(),
                    pattern_of: (0..vertices).map(|v| c.rotation.pattern(v, axes) as u8).collect(),
                    apply,
                }
            })
            .collect();
        Ok(Self { config, chemistries: Arc::new(chemistries), tables: Arc::new(tables) })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn chemistries(&self) -> &[Chemistry] {
        &self.chemistries
    }

    pub fn index_of(&self, chemistry: &Chemistry) -> Option<usize> {
        self.chemistries.iter().position(|c| c == chemistry)
    }

    fn stride(&self) -> usize {
        self.config.num_feature_axes + 2
    }

    fn pattern(&self, features: &[f32]) -> Option<usize> {
        let values = self.config.feature_values;
        let mut p = 0;
        for (j, &f) in features.iter().enumerate() {
            if f == values[1] {
                p |= 1 << j;
            } else if f != values[0] {
                return None;
            }
        }
        Some(p)
    }

    /// Whether every stone in `obs` shows a reward consistent with its
    /// features under chemistry `i`.
    fn stones_consistent(&self, i: usize, obs: &[f32]) -> bool {
        let axes = self.config.num_feature_axes;
        let t = &self.tables[i];
        (0..self.config.num_stones_per_trial).all(|s| {
            let slot = &obs[s * self.stride()..];
            match self.pattern(&slot[..axes]) {
                Some(p) => self.config.vertex_reward(t.vertex_of[p] as usize) as f32 == slot[axes],
                None => false,
            }
        })
    }

    fn normalize(mut support: Vec<(u32, f64)>) -> Result<Vec<(u32, f64)>, ModelError> {
        support.retain(|&(_, w)| w > 0.0);
        let total: f64 = support.iter().map(|(_, w)| w).sum();
        if support.is_empty() || total <= 0.0 {
            return Err(ModelError::InconsistentHistory);
        }
        for (_, w) in support.iter_mut() {
            *w /= total;
        }
        Ok(support)
    }

    /// Posterior before any action: uniform prior restricted to chemistries
    /// consistent with the first observation.
    pub fn prior(&self, observation: &Observation) -> Result<BeliefState, ModelError> {
        let support = (0..self.chemistries.len())
            .filter(|&i| self.stones_consistent(i, observation.as_slice()))
            .map(|i| (i as u32, 1.0))
            .collect();
        Ok(BeliefState {
            support: Self::normalize(support)?,
            observation: observation.clone(),
            trial_index: 0,
        })
    }

    /// Chemistry-independent part of the next observation: counters, used
    /// and collected flags. The slot of a stone that received a potion is
    /// left as before.
    fn common_prediction(&self, prev: &[f32], action: Action) -> (Vec<f32>, f64) {
        let mut next = prev.to_vec();
        let axes = self.config.num_feature_axes;
        let potion_base = self.config.num_stones_per_trial * self.stride();
        let mut reward = 0.0;
        match action {
            Action::NoOp => {}
            Action::CollectStone(s) => {
                let at = s * self.stride();
                if next[at + axes + 1] == 0.0 {
                    next[at + axes + 1] = 1.0;
                    reward = next[at + axes] as f64;
                }
            }
            Action::ApplyPotion { potion, .. } => {
                next[potion_base + 2 * potion + 1] = 1.0;
            }
        }
        *next.last_mut().unwrap() += 1.0;
        (next, reward)
    }

    /// Stone slot after a potion under chemistry `i`, or `None` when the
    /// stone cannot move.
    fn moved_stone(&self, i: usize, prev: &[f32], stone: usize, potion: usize) -> Option<usize> {
        let axes = self.config.num_feature_axes;
        let at = stone * self.stride();
        let potion_at = self.config.num_stones_per_trial * self.stride() + 2 * potion;
        if prev[potion_at + 1] != 0.0 || prev[at + axes + 1] != 0.0 {
            return None;
        }
        let t = &self.tables[i];
        let p = self.pattern(&prev[at..at + axes])?;
        let color = prev[potion_at] as usize;
        let u = t.apply[t.vertex_of[p] as usize * self.config.num_colors() + color];
        (u != 0xff).then_some(u as usize)
    }

    fn write_stone(&self, i: usize, obs: &mut [f32], stone: usize, vertex: usize) {
        let axes = self.config.num_feature_axes;
        let at = stone * self.stride();
        let p = self.tables[i].pattern_of[vertex] as usize;
        let values = self.config.feature_values;
        for j in 0..axes {
            obs[at + j] = values[p >> j & 1];
        }
        obs[at + axes] = self.config.vertex_reward(vertex) as f32;
    }

    /// Exact posterior update after observing `outcome` for `action`.
    pub fn update(
        &self,
        belief: &BeliefState,
        action: usize,
        outcome: &EnvOutcome,
    ) -> Result<BeliefState, ModelError> {
        let action = Action::from_index(action, &self.config)?;
        let prev = belief.observation.as_slice();
        let observed = outcome.observation.as_slice();
        if observed.len() != prev.len() {
            return Err(ModelError::Other("observation length mismatch".into()));
        }
        let step_in_trial = *prev.last().unwrap() as usize;
        let boundary = step_in_trial + 1 == self.config.steps_per_trial;
        let final_step = boundary && belief.trial_index + 1 == self.config.num_trials;
        let (mut common, reward) = self.common_prediction(prev, action);
        if final_step {
            // counters stop at the last step
            *common.last_mut().unwrap() -= 1.0;
        }
        if reward as f32 != outcome.reward as f32 {
            return Err(ModelError::InconsistentHistory);
        }

        let support = if boundary && !final_step {
            // the new trial hides the last transition; only stone rewards
            // in the fresh trial carry information
            belief
                .support
                .iter()
                .map(|&(i, w)| {
                    let ok = self.stones_consistent(i as usize, observed);
                    (i, if ok { w } else { 0.0 })
                })
                .collect()
        } else if let Action::ApplyPotion { stone, potion } = action {
            let mut predicted = common.clone();
            belief
                .support
                .iter()
                .map(|&(i, w)| {
                    predicted.copy_from_slice(&common);
                    if let Some(v) = self.moved_stone(i as usize, prev, stone, potion) {
                        self.write_stone(i as usize, &mut predicted, stone, v);
                    }
                    (i, if predicted == observed { w } else { 0.0 })
                })
                .collect()
        } else {
            if common != observed {
                return Err(ModelError::InconsistentHistory);
            }
            belief.support.clone()
        };

        Ok(BeliefState {
            support: Self::normalize(support)?,
            observation: outcome.observation.clone(),
            trial_index: belief.trial_index + (boundary && !final_step) as usize,
        })
    }

    /// Draws a chemistry from the posterior.
    pub fn draw_chemistry<R: Rng + ?Sized>(&self, belief: &BeliefState, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(i, w) in &belief.support {
            acc += w;
            if u < acc {
                return i as usize;
            }
        }
        belief.support.last().expect("non-empty support").0 as usize
    }
}

impl DynamicsModel for BeliefModel {
    type State = BeliefState;
    type Outcome = EnvOutcome;

    fn num_actions(&self) -> usize {
        self.config.num_actions()
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        belief: &BeliefState,
        action: usize,
        rng: &mut R,
    ) -> Result<EnvOutcome, ModelError> {
        let i = self.draw_chemistry(belief, rng);
        let act = Action::from_index(action, &self.config)?;
        let prev = belief.observation.as_slice();
        let step_in_trial = *prev.last().unwrap() as usize;
        let boundary = step_in_trial + 1 == self.config.steps_per_trial;
        if boundary {
            let mut env = EpisodeState::from_observation(
                &self.config,
                self.chemistries[i].clone(),
                &belief.observation,
                belief.trial_index,
            )?;
            return Ok(env.step_with(act, rng)?.into());
        }
        let (mut next, mut reward) = self.common_prediction(prev, act);
        match act {
            Action::ApplyPotion { stone, potion } => {
                if let Some(v) = self.moved_stone(i, prev, stone, potion) {
                    self.write_stone(i, &mut next, stone, v);
                }
            }
            Action::CollectStone(s) if reward != 0.0 => {
                // exact table value rather than its f32 rendering
                let axes = self.config.num_feature_axes;
                let at = s * self.stride();
                let p = self.pattern(&prev[at..at + axes]).ok_or(ModelError::InconsistentHistory)?;
                reward = self.config.vertex_reward(self.tables[i].vertex_of[p] as usize);
            }
            _ => {}
        }
        Ok(EnvOutcome { observation: Observation(next), reward, terminal: false })
    }

    fn advance(
        &self,
        belief: &BeliefState,
        action: usize,
        outcome: &EnvOutcome,
    ) -> Result<BeliefState, ModelError> {
        self.update(belief, action, outcome)
    }

    fn reward(&self, outcome: &EnvOutcome) -> f64 {
        outcome.reward
    }

    fn is_terminal(&self, outcome: &EnvOutcome) -> bool {
        outcome.terminal
    }
}

impl EnvModel for BeliefModel {
    fn initial_state(&self, observation: &Observation) -> Result<BeliefState, ModelError> {
        self.prior(observation)
    }

    fn outcome_from_step(&self, step: &StepOutcome) -> Result<EnvOutcome, ModelError> {
        Ok(step.clone().into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reduced_space_size() {
        let model = BeliefModel::new(EnvConfig::reduced()).unwrap();
        // 8 rotations x 8 direction maps x 5 connected edge sets
        assert_eq!(model.chemistries().len(), 320);
    }

    #[test]
    fn full_scale_with_deletion_is_rejected() {
        assert!(matches!(
            BeliefModel::new(EnvConfig::default()),
            Err(ModelError::SpaceTooLarge(_))
        ));
    }

    #[test]
    fn prior_is_uniform_on_consistent_set() {
        let config = EnvConfig::reduced();
        let model = BeliefModel::new(config.clone()).unwrap();
        let (_, obs) = EpisodeState::reset(&config, 9).unwrap();
        let b = model.prior(&obs).unwrap();
        let w0 = b.support[0].1;
        assert!(b.support.iter().all(|&(_, w)| (w - w0).abs() < 1e-15));
        assert!((b.support.iter().map(|s| s.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn observed_transition_is_explained_by_every_survivor() {
        let config = EnvConfig { edge_deletion_enabled: false, ..EnvConfig::reduced() };
        let model = BeliefModel::new(config.clone()).unwrap();
        let mut moves = 0;
        for seed in 0..40 {
            let (mut env, obs) = EpisodeState::reset(&config, seed).unwrap();
            let belief = model.prior(&obs).unwrap();
            let before = env.stones[0].features.clone();
            let a = Action::ApplyPotion { stone: 0, potion: 0 };
            let step = env.step(a).unwrap();
            let after = env.stones[0].features.clone();
            let color = env.potions[0].color;
            let moved = model.update(&belief, a.index(&config), &step.into()).unwrap();
            assert!(moved.support.len() <= belief.support.len());
            if before != after {
                moves += 1;
                assert!(moved.support.len() < belief.support.len());
            }
            for &(i, _) in &moved.support {
                let c = &model.chemistries()[i as usize];
                let v = c.vertex_from_features(&before, config.feature_values).unwrap();
                let w = c.apply(v, color).unwrap_or(v);
                assert_eq!(c.features(w, config.feature_values), after);
            }
        }
        assert!(moves > 5);
    }

    #[test]
    fn collapsed_posterior_is_deterministic_mid_trial() {
        let config = EnvConfig::reduced();
        let model = BeliefModel::new(config.clone()).unwrap();
        let (env, obs) = EpisodeState::reset(&config, 4).unwrap();
        let truth = model.index_of(&env.chemistry).unwrap() as u32;
        let belief = BeliefState { support: vec![(truth, 1.0)], ..model.prior(&obs).unwrap() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Action::ApplyPotion { stone: 1, potion: 2 }.index(&config);
        let first = model.sample(&belief, a, &mut rng).unwrap();
        for _ in 0..20 {
            assert_eq!(model.sample(&belief, a, &mut rng).unwrap(), first);
        }
        let mut e = env.clone();
        let real = e.step(Action::from_index(a, &config).unwrap()).unwrap();
        assert_eq!(first, EnvOutcome::from(real));
    }
}

use rand::Rng;

use super::{DynamicsModel, EnvModel, ModelError};
use crate::env::{Action, Chemistry, EnvConfig, EpisodeState, Observation, StepOutcome};

/// Next observation and reward as produced by the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub terminal: bool,
}

impl From<StepOutcome> for EnvOutcome {
    fn from(s: StepOutcome) -> Self {
        EnvOutcome { observation: s.observation, reward: s.reward, terminal: s.done }
    }
}

/// Ground-truth model: steps a copy of the environment with the true
/// chemistry. Trial resampling draws from the caller's generator.
#[derive(Debug, Clone)]
pub struct OracleModel {
    config: EnvConfig,
    chemistry: Chemistry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleState(pub EpisodeState);

impl OracleModel {
    pub fn new(config: EnvConfig, chemistry: Chemistry) -> Self {
        Self { config, chemistry }
    }

    pub fn chemistry(&self) -> &Chemistry {
        &self.chemistry
    }

    /// Wraps a live environment state, keeping its exact counters.
    pub fn state_from_env(&self, env: &EpisodeState) -> OracleState {
        OracleState(env.clone())
    }
}

impl DynamicsModel for OracleModel {
    type State = OracleState;
    type Outcome = EnvOutcome;

    fn num_actions(&self) -> usize {
        self.config.num_actions()
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        state: &OracleState,
        action: usize,
        rng: &mut R,
    ) -> Result<EnvOutcome, ModelError> {
        let action = Action::from_index(action, &self.config)?;
        let mut env = state.0.clone();
        Ok(env.step_with(action, rng)?.into())
    }

    fn advance(
        &self,
        state: &OracleState,
        action: usize,
        outcome: &EnvOutcome,
    ) -> Result<OracleState, ModelError> {
        let prev = &state.0;
        if prev.at_trial_boundary() && prev.trial_index + 1 < self.config.num_trials {
            let mut next = EpisodeState::from_observation(
                &self.config,
                self.chemistry.clone(),
                &outcome.observation,
                prev.trial_index + 1,
            )?;
            next.rng = prev.rng.clone();
            return Ok(OracleState(next));
        }
        let mut next = prev.clone();
        let action = Action::from_index(action, &self.config)?;
        // mid-trial steps are deterministic and never touch the generator
        let step = next.step_with(action, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        if step.observation != outcome.observation {
            return Err(ModelError::Other("outcome impossible under the true chemistry".into()));
        }
        Ok(OracleState(next))
    }

    fn reward(&self, outcome: &EnvOutcome) -> f64 {
        outcome.reward
    }

    fn is_terminal(&self, outcome: &EnvOutcome) -> bool {
        outcome.terminal
    }
}

impl EnvModel for OracleModel {
    fn initial_state(&self, observation: &Observation) -> Result<OracleState, ModelError> {
        Ok(OracleState(EpisodeState::from_observation(
            &self.config,
            self.chemistry.clone(),
            observation,
            0,
        )?))
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
    use std::collections::HashSet;

    fn setup(seed: u64) -> (EnvConfig, EpisodeState, Observation, OracleModel) {
        let config = EnvConfig::reduced();
        let (env, obs) = EpisodeState::reset(&config, seed).unwrap();
        let model = OracleModel::new(config.clone(), env.chemistry.clone());
        (config, env, obs, model)
    }

    #[test]
    fn noop_mid_trial_is_deterministic() {
        let (_, _, obs, model) = setup(1);
        let root = model.initial_state(&obs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let outcomes: HashSet<_> = (0..50)
            .map(|_| format!("{:?}", model.sample(&root, 0, &mut rng).unwrap()))
            .collect();
        assert_eq!(outcomes.len(), 1);
    }

    #[test]
    fn boundary_sampling_is_stochastic() {
        let (config, mut env, _, model) = setup(2);
        for _ in 0..config.steps_per_trial - 1 {
            env.step(Action::NoOp).unwrap();
        }
        let state = model.state_from_env(&env);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let outcomes: HashSet<_> = (0..50)
            .map(|_| format!("{:?}", model.sample(&state, 0, &mut rng).unwrap()))
            .collect();
        assert!(outcomes.len() > 1);
    }

    #[test]
    fn advance_tracks_real_environment() {
        let (config, mut env, obs, model) = setup(3);
        let mut state = model.initial_state(&obs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        loop {
            let a = rng.gen_range(0..config.num_actions());
            let step = env.step(Action::from_index(a, &config).unwrap()).unwrap();
            let outcome = model.outcome_from_step(&step).unwrap();
            if outcome.terminal {
                break;
            }
            state = model.advance(&state, a, &outcome).unwrap();
            assert_eq!(state.0.stones, env.stones);
            assert_eq!(state.0.potions, env.potions);
            assert_eq!(state.0.global_step(), env.global_step());
        }
    }

    #[test]
    fn advance_is_deterministic() {
        let (_, _, obs, model) = setup(4);
        let root = model.initial_state(&obs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = model.sample(&root, 3, &mut rng).unwrap();
        assert_eq!(model.advance(&root, 3, &o).unwrap(), model.advance(&root, 3, &o).unwrap());
    }
}

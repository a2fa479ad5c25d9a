use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Agent, HarnessError, PlannerStats};
use crate::env::{Action, EnvConfig, EpisodeState, Observation, ObservedTrial, StepOutcome};
use crate::model::{BeliefModel, DynamicsModel, EnvModel, NeuralModel, OracleModel};
use crate::planner::{plan_observed, ExpansionEvent, SearchConfig};

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Always takes the no-op action.
#[derive(Debug, Clone, Copy, Default)]
pub struct CollectNothingAgent;

impl Agent for CollectNothingAgent {
    fn name(&self) -> String {
        "nothing".into()
    }

    fn reset(&mut self, _: &EpisodeState, _: u64) -> Result<(), HarnessError> {
        Ok(())
    }

    fn act(&mut self) -> Result<usize, HarnessError> {
        Ok(0)
    }

    fn observe(&mut self, _: &StepOutcome) -> Result<(), HarnessError> {
        Ok(())
    }
}

/// Uniform over the action space; the same policy that generates datasets.
#[derive(Debug, Clone)]
pub struct RandomAgent {
    num_actions: usize,
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(config: &EnvConfig) -> Self {
        Self { num_actions: config.num_actions(), rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Agent for RandomAgent {
    fn name(&self) -> String {
        "random".into()
    }

    fn reset(&mut self, _: &EpisodeState, seed: u64) -> Result<(), HarnessError> {
        self.rng = stream(seed, 1);
        Ok(())
    }

    fn act(&mut self) -> Result<usize, HarnessError> {
        Ok(self.rng.gen_range(0..self.num_actions))
    }

    fn observe(&mut self, _: &StepOutcome) -> Result<(), HarnessError> {
        Ok(())
    }
}

/// Scripted baseline: for the first `potion_fraction` of every trial it
/// pours random unused potions on random uncollected stones, then collects
/// every stone whose shown reward is nonnegative.
#[derive(Debug, Clone)]
pub struct HeuristicAgent {
    config: EnvConfig,
    pub potion_fraction: f64,
    trial: Option<ObservedTrial>,
    rng: ChaCha8Rng,
}

impl HeuristicAgent {
    pub fn new(config: &EnvConfig) -> Self {
        Self::with_fraction(config, 0.5)
    }

    pub fn with_fraction(config: &EnvConfig, potion_fraction: f64) -> Self {
        Self { config: config.clone(), potion_fraction, trial: None, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    fn see(&mut self, obs: &Observation) -> Result<(), HarnessError> {
        self.trial = Some(ObservedTrial::decode(obs, &self.config)?);
        Ok(())
    }
}

impl Agent for HeuristicAgent {
    fn name(&self) -> String {
        "heuristic".into()
    }

    fn reset(&mut self, env: &EpisodeState, seed: u64) -> Result<(), HarnessError> {
        self.rng = stream(seed, 3);
        self.see(&env.observe())
    }

    fn act(&mut self) -> Result<usize, HarnessError> {
        let trial = self.trial.as_ref().ok_or_else(|| HarnessError::Other("act before reset".into()))?;
        let potion_steps = (self.potion_fraction * self.config.steps_per_trial as f64).floor() as usize;
        let open: Vec<usize> = (0..trial.stones.len()).filter(|&s| !trial.stones[s].collected).collect();
        if trial.step_in_trial < potion_steps {
            let unused: Vec<usize> = (0..trial.potions.len()).filter(|&p| !trial.potions[p].used).collect();
            if let (Some(&potion), Some(&stone)) = (unused.choose(&mut self.rng), open.choose(&mut self.rng)) {
                return Ok(Action::ApplyPotion { stone, potion }.index(&self.config));
            }
        }
        let action = open
            .iter()
            .find(|&&s| trial.stones[s].reward_value >= 0.0)
            .map_or(Action::NoOp, |&s| Action::CollectStone(s));
        Ok(action.index(&self.config))
    }

    fn observe(&mut self, outcome: &StepOutcome) -> Result<(), HarnessError> {
        self.see(&outcome.observation)
    }
}

/// Builds the dynamics model a planner agent uses for one episode.
pub trait ModelFactory: Clone + Send + Sync {
    type Model: EnvModel + Send + Sync;

    fn name(&self) -> String;

    fn build(&self, env: &EpisodeState) -> Result<Arc<Self::Model>, HarnessError>;
}

/// Ground truth: a model that knows the episode's chemistry.
#[derive(Debug, Clone)]
pub struct OracleFactory {
    pub config: EnvConfig,
}

impl ModelFactory for OracleFactory {
    type Model = OracleModel;

    fn name(&self) -> String {
        "oracle".into()
    }

    fn build(&self, env: &EpisodeState) -> Result<Arc<OracleModel>, HarnessError> {
        Ok(Arc::new(OracleModel::new(self.config.clone(), env.chemistry.clone())))
    }
}

/// Exact posterior over the enumerated chemistry space.
#[derive(Debug, Clone)]
pub struct BeliefFactory {
    model: Arc<BeliefModel>,
}

impl BeliefFactory {
    pub fn new(config: &EnvConfig) -> Result<Self, HarnessError> {
        Ok(Self { model: Arc::new(BeliefModel::new(config.clone())?) })
    }
}

impl ModelFactory for BeliefFactory {
    type Model = BeliefModel;

    fn name(&self) -> String {
        "belief".into()
    }

    fn build(&self, _: &EpisodeState) -> Result<Arc<BeliefModel>, HarnessError> {
        Ok(self.model.clone())
    }
}

/// A loaded neural model, shared read-only by all episodes.
#[derive(Debug, Clone)]
pub struct NeuralFactory {
    pub model: Arc<NeuralModel>,
}

impl ModelFactory for NeuralFactory {
    type Model = NeuralModel;

    fn name(&self) -> String {
        "neural".into()
    }

    fn build(&self, _: &EpisodeState) -> Result<Arc<NeuralModel>, HarnessError> {
        Ok(self.model.clone())
    }
}

type Observer = Arc<dyn Fn(&ExpansionEvent) + Send + Sync>;

/// Plans from scratch before every action and feeds real outcomes back into
/// its model state.
pub struct PlannerAgent<F: ModelFactory> {
    factory: F,
    pub search: SearchConfig,
    model: Option<Arc<F::Model>>,
    state: Option<<F::Model as DynamicsModel>::State>,
    last_action: Option<usize>,
    rng: ChaCha8Rng,
    stats: PlannerStats,
    observer: Option<Observer>,
}

impl<F: ModelFactory> PlannerAgent<F> {
    pub fn new(factory: F, search: SearchConfig) -> Self {
        Self {
            factory,
            search,
            model: None,
            state: None,
            last_action: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            stats: PlannerStats::default(),
            observer: None,
        }
    }

    /// Calls `observer` after every expansion of every search.
    pub fn with_observer(mut self, observer: impl Fn(&ExpansionEvent) + Send + Sync + 'static) -> Self {
        self.observer = Some(Arc::new(observer));
        self
    }
}

impl<F: ModelFactory> Agent for PlannerAgent<F> {
    fn name(&self) -> String {
        format!("planner-{}-{}", self.factory.name(), self.search.num_expansions)
    }

    fn reset(&mut self, env: &EpisodeState, seed: u64) -> Result<(), HarnessError> {
        let model = self.factory.build(env)?;
        self.state = Some(model.initial_state(&env.observe())?);
        self.model = Some(model);
        self.last_action = None;
        self.rng = stream(seed, 2);
        self.stats = PlannerStats::default();
        Ok(())
    }

    fn act(&mut self) -> Result<usize, HarnessError> {
        let (model, state) = match (&self.model, &self.state) {
            (Some(m), Some(s)) => (m, s),
            _ => return Err(HarnessError::Other("act before reset".into())),
        };
        let observer = self.observer.clone();
        let mut hook = |e: &ExpansionEvent| {
            if let Some(o) = &observer {
                o(e)
            }
        };
        let result = plan_observed(model.as_ref(), state.clone(), &self.search, &mut self.rng, &mut hook)?;
        self.stats.record(&result);
        self.last_action = Some(result.action);
        Ok(result.action)
    }

    fn observe(&mut self, outcome: &StepOutcome) -> Result<(), HarnessError> {
        if outcome.done {
            return Ok(());
        }
        let (model, state, action) = match (&self.model, &self.state, self.last_action) {
            (Some(m), Some(s), Some(a)) => (m, s, a),
            _ => return Err(HarnessError::Other("observe before act".into())),
        };
        let real = model.outcome_from_step(outcome)?;
        self.state = Some(model.advance(state, action, &real)?);
        Ok(())
    }

    fn planner_stats(&self) -> Option<PlannerStats> {
        Some(self.stats.clone())
    }
}

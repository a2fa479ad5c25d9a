//! Generative dynamics models the planner simulates with.
//!
//! A model state stands for the complete observation history, which turns
//! the partially observable problem into a (stochastic) fully observable
//! one. Three implementations are provided: [`OracleModel`] knows the true
//! chemistry, [`BeliefModel`] keeps the exact posterior over an enumerable
//! chemistry space, and [`NeuralModel`] runs a trained sequence model.

mod belief;
mod encoding;
mod neural;
mod oracle;
mod weights;

use rand::Rng;

use crate::env::{EnvError, Observation, StepOutcome};

pub use belief::{BeliefModel, BeliefState};
pub use encoding::{Encoding, EncodingError};
pub use neural::{
    entropy_decomposition, Architecture, EntropySplit, ForwardOutput, NeuralModel, NeuralState,
    NeuralOutcome, StepTokens,
};
pub use oracle::{EnvOutcome, OracleModel, OracleState};
pub use weights::{load_weights, Manifest, ModelWeights, Tensor, WeightsError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error("inconsistent history: no chemistry explains the observations")]
    InconsistentHistory,
    #[error("chemistry space too large to enumerate ({0} chemistries)")]
    SpaceTooLarge(usize),
    #[error("history exceeds the model context of {0} steps")]
    ContextOverflow(usize),
    #[error("{0}")]
    Other(String),
}

/// Sampling-based generative model over (next observation, reward).
///
/// `sample` must not mutate the state, and `advance` must be deterministic:
/// equal arguments give equal states.
pub trait DynamicsModel {
    type State: Clone;
    type Outcome: Clone + PartialEq + std::fmt::Debug;

    fn num_actions(&self) -> usize;

    fn sample<R: Rng + ?Sized>(
        &self,
        state: &Self::State,
        action: usize,
        rng: &mut R,
    ) -> Result<Self::Outcome, ModelError>;

    /// Draws `k` independent outcomes. Models that share work across draws
    /// override this.
    fn sample_many<R: Rng + ?Sized>(
        &self,
        state: &Self::State,
        action: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<Self::Outcome>, ModelError> {
        (0..k).map(|_| self.sample(state, action, rng)).collect()
    }

    fn advance(
        &self,
        state: &Self::State,
        action: usize,
        outcome: &Self::Outcome,
    ) -> Result<Self::State, ModelError>;

    fn reward(&self, outcome: &Self::Outcome) -> f64;

    fn is_terminal(&self, outcome: &Self::Outcome) -> bool;
}

/// A dynamics model that can be driven by the real environment: it builds a
/// root state from the first observation and converts real step results
/// into its own outcome type.
pub trait EnvModel: DynamicsModel {
    fn initial_state(&self, observation: &Observation) -> Result<Self::State, ModelError>;

    fn outcome_from_step(&self, step: &StepOutcome) -> Result<Self::Outcome, ModelError>;
}

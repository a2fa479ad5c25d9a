//! Online tree search with chance nodes.
//!
//! Decision nodes keep per-action Q and visit statistics. Below every
//! (decision node, action) pair sits a chance node holding the distinct
//! outcomes of `branching_k` model samples, each weighted by its
//! multiplicity. No policy prior or value function is used: the prior is
//! uniform and leaf values are zero.

pub mod fixtures;
mod tree;

pub use tree::{
    BackupRecord, Branch, ChanceId, ChanceNode, DecisionNode, ExpansionEvent, NodeId, PathStep,
    SearchTree, Selection,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{DynamicsModel, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub gamma: f64,
    pub branching_k: usize,
    pub c1: f64,
    pub c2: f64,
    pub temperature: f64,
    pub num_expansions: usize,
    /// Act on argmax visit count instead of sampling the action distribution.
    pub greedy: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            branching_k: 3,
            c1: 0.57,
            c2: 16.15,
            temperature: 0.55,
            num_expansions: 1250,
            greedy: false,
        }
    }
}

impl SearchConfig {
    pub fn with_expansions(num_expansions: usize) -> Self {
        Self { num_expansions, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.branching_k == 0 {
            return bad("branching_k must be >= 1");
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature must be > 0");
        }
        if self.num_expansions == 0 {
            return bad("num_expansions must be >= 1");
        }
        if self.c2.is_nan() || self.c2 <= 0.0 {
            return bad("c2 must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("root has no visits; run at least one expansion")]
    NotSearched,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Selection score of one action at a decision node.
pub fn puct_score(q: f64, n_a: u32, n_total: u32, num_actions: usize, c1: f64, c2: f64) -> f64 {
    let n_total = n_total as f64;
    let bonus = n_total.sqrt() / (1.0 + n_a as f64) * (c1 + ((c2 + 1.0 + n_total) / c2).ln());
    q + bonus / num_actions as f64
}

/// `N(a)^(1/T)` normalized over actions, evaluated in log space.
pub fn action_probabilities(visit_counts: &[u32], temperature: f64) -> Result<Vec<f64>, PlanError> {
    let max = visit_counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(PlanError::NotSearched);
    }
    let log_max = (max as f64).ln();
    let weights: Vec<f64> = visit_counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { (((n as f64).ln() - log_max) / temperature).exp() })
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// One line of root statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootStat {
    pub action: usize,
    pub visits: u32,
    pub q: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanResult {
    pub action: usize,
    pub probabilities: Vec<f64>,
    pub root: Vec<RootStat>,
    pub expansions: usize,
    pub mean_depth: f64,
    pub max_depth: usize,
    pub decision_nodes: usize,
}

/// Runs `num_expansions` select/expand/backup cycles from `root_state` and
/// picks an action.
pub fn plan<M, R>(
    model: &M,
    root_state: M::State,
    config: &SearchConfig,
    rng: &mut R,
) -> Result<PlanResult, PlanError>
where
    M: DynamicsModel,
    R: Rng + ?Sized,
{
    plan_observed(model, root_state, config, rng, &mut |_| {})
}

/// Like [`plan`], calling `observer` after every expansion.
pub fn plan_observed<M, R>(
    model: &M,
    root_state: M::State,
    config: &SearchConfig,
    rng: &mut R,
    observer: &mut dyn FnMut(&ExpansionEvent),
) -> Result<PlanResult, PlanError>
where
    M: DynamicsModel,
    R: Rng + ?Sized,
{
    let mut tree = SearchTree::new(root_state, model.num_actions(), config.clone())?;
    tree.run(model, rng, observer)?;
    tree.result(rng)
}

//! Small hand-built models with known answers.

use std::sync::Arc;

use rand::Rng;

use super::SearchTree;
use crate::model::{DynamicsModel, ModelError};

/// Reward of taking the last action of a path, given the whole path.
pub type RewardFn = Arc<dyn Fn(&[usize]) -> f64 + Send + Sync>;

/// Deterministic finite-horizon model whose state is the action sequence
/// taken so far. The outcome after `horizon` actions is terminal.
#[derive(Clone)]
pub struct DeterministicTree {
    pub num_actions: usize,
    pub horizon: usize,
    pub reward: RewardFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub path: Vec<usize>,
    pub reward: f64,
    pub terminal: bool,
}

impl DeterministicTree {
    pub fn new(num_actions: usize, horizon: usize, reward: impl Fn(&[usize]) -> f64 + Send + Sync + 'static) -> Self {
        Self { num_actions, horizon, reward: Arc::new(reward) }
    }

    /// Rewards drawn once per path from a seeded generator, in `[0, 1)`.
    pub fn random(num_actions: usize, horizon: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut table = std::collections::HashMap::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut paths: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..horizon {
            paths = paths
                .iter()
                .flat_map(|p| (0..num_actions).map(move |a| [p.as_slice(), &[a]].concat()))
                .collect();
            for p in &paths {
                table.insert(p.clone(), rng.gen::<f64>());
            }
        }
        Self::new(num_actions, horizon, move |p| table[p])
    }
}

impl DynamicsModel for DeterministicTree {
    type State = Vec<usize>;
    type Outcome = PathOutcome;

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn sample<R: Rng + ?Sized>(&self, state: &Vec<usize>, action: usize, _: &mut R) -> Result<PathOutcome, ModelError> {
        let mut path = state.clone();
        path.push(action);
        let reward = (self.reward)(&path);
        let terminal = path.len() >= self.horizon;
        Ok(PathOutcome { path, reward, terminal })
    }

    fn advance(&self, _: &Vec<usize>, _: usize, outcome: &PathOutcome) -> Result<Vec<usize>, ModelError> {
        Ok(outcome.path.clone())
    }

    fn reward(&self, outcome: &PathOutcome) -> f64 {
        outcome.reward
    }

    fn is_terminal(&self, outcome: &PathOutcome) -> bool {
        outcome.terminal
    }
}

/// Root Q values of a tree built over a [`DeterministicTree`], recomputed
/// by enumerating every action path up to the horizon: each backup through
/// a root action a contributes the discounted rewards along the path it
/// followed, so
/// `Q(a) N(a) = sum over paths p starting with a of gamma^(|p|-1) r(p) N(p)`
/// where `N(p)` is the visit count of the last edge of `p`.
pub fn enumerate_root_q(tree: &SearchTree<Vec<usize>>, model: &DeterministicTree, gamma: f64) -> Vec<f64> {
    fn walk(
        tree: &SearchTree<Vec<usize>>,
        model: &DeterministicTree,
        gamma: f64,
        node: usize,
        path: &mut Vec<usize>,
        acc: &mut f64,
    ) {
        for a in 0..model.num_actions {
            let n = tree.nodes[node].visit_counts[a];
            if n == 0 {
                continue;
            }
            path.push(a);
            *acc += gamma.powi(path.len() as i32 - 1) * (model.reward)(path) * n as f64;
            if let Some(c) = tree.nodes[node].children[a] {
                let child = tree.chances[c].branches[0].child;
                walk(tree, model, gamma, child, path, acc);
            }
            path.pop();
        }
    }
    let root = &tree.nodes[0];
    (0..model.num_actions)
        .map(|a| {
            let n = root.visit_counts[a];
            if n == 0 {
                return 0.0;
            }
            let mut acc = (model.reward)(&[a]) * n as f64;
            if let Some(c) = root.children[a] {
                let child = tree.chances[c].branches[0].child;
                walk(tree, model, gamma, child, &mut vec![a], &mut acc);
            }
            acc / n as f64
        })
        .collect()
}

/// Number of decision nodes in the complete tree of a horizon-`h` model.
pub fn full_tree_size(num_actions: usize, horizon: usize) -> usize {
    (0..=horizon).map(|d| num_actions.pow(d as u32)).sum()
}

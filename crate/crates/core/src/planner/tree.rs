use rand::Rng;

use super::{action_probabilities, puct_score, PlanError, PlanResult, RootStat, SearchConfig};
use crate::model::DynamicsModel;

pub type NodeId = usize;
pub type ChanceId = usize;

#[derive(Debug, Clone)]
pub struct DecisionNode<S> {
    /// `None` once the episode has ended at this node.
    pub state: Option<S>,
    pub q_values: Vec<f64>,
    pub visit_counts: Vec<u32>,
    pub total_visits: u32,
    pub children: Vec<Option<ChanceId>>,
    pub depth: usize,
}

impl<S> DecisionNode<S> {
    fn new(state: Option<S>, num_actions: usize, depth: usize) -> Self {
        Self {
            state,
            q_values: vec![0.0; num_actions],
            visit_counts: vec![0; num_actions],
            total_visits: 0,
            children: vec![None; num_actions],
            depth,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub child: NodeId,
    pub reward: f64,
    pub weight: u32,
}

#[derive(Debug, Clone)]
pub struct ChanceNode {
    pub branches: Vec<Branch>,
}

impl ChanceNode {
    pub fn total_weight(&self) -> u32 {
        self.branches.iter().map(|b| b.weight).sum()
    }

    /// Weight-averaged immediate reward.
    pub fn mean_reward(&self) -> f64 {
        let weighted: f64 = self.branches.iter().map(|b| b.weight as f64 * b.reward).sum();
        weighted / self.total_weight() as f64
    }

    pub fn sample_branch<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut ticket = rng.gen_range(0..self.total_weight());
        for (i, b) in self.branches.iter().enumerate() {
            if ticket < b.weight {
                return i;
            }
            ticket -= b.weight;
        }
        unreachable!("ticket below total weight")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub node: NodeId,
    pub action: usize,
    pub chance: ChanceId,
    pub branch: usize,
}

/// Output of the selection phase: the traversed path and where it stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub path: Vec<PathStep>,
    pub leaf: NodeId,
    /// Action to expand at the leaf; `None` when the leaf is terminal.
    pub action: Option<usize>,
}

/// Reported after each expansion: the raw sample rewards next to the merged
/// branches built from them.
#[derive(Debug, Clone)]
pub struct ExpansionEvent {
    pub raw_rewards: Vec<f64>,
    pub branches: Vec<(f64, u32)>,
    pub merged_mean: f64,
}

impl ExpansionEvent {
    pub fn raw_mean(&self) -> f64 {
        self.raw_rewards.iter().sum::<f64>() / self.raw_rewards.len() as f64
    }
}

/// One (node, action, return) update applied during backup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackupRecord {
    pub node: NodeId,
    pub action: usize,
    pub value: f64,
}

pub struct SearchTree<S> {
    pub nodes: Vec<DecisionNode<S>>,
    pub chances: Vec<ChanceNode>,
    pub config: SearchConfig,
    num_actions: usize,
    expansions: usize,
    depth_sum: usize,
    max_depth: usize,
    backup_log: Option<Vec<BackupRecord>>,
}

impl<S: Clone> SearchTree<S> {
    pub fn new(root: S, num_actions: usize, config: SearchConfig) -> Result<Self, PlanError> {
        config.validate()?;
        if num_actions == 0 {
            return Err(PlanError::InvalidConfig("model has no actions".into()));
        }
        Ok(Self {
            nodes: vec![DecisionNode::new(Some(root), num_actions, 0)],
            chances: Vec::new(),
            config,
            num_actions,
            expansions: 0,
            depth_sum: 0,
            max_depth: 0,
            backup_log: None,
        })
    }

    /// Keeps every backup update for later inspection.
    pub fn with_backup_log(mut self) -> Self {
        self.backup_log = Some(Vec::new());
        self
    }

    pub fn backup_log(&self) -> Option<&[BackupRecord]> {
        self.backup_log.as_deref()
    }

    pub fn root(&self) -> &DecisionNode<S> {
        &self.nodes[0]
    }

    pub fn expansions(&self) -> usize {
        self.expansions
    }

    /// Highest-scoring action; ties go to the lowest index.
    pub fn best_action(&self, node: NodeId) -> usize {
        let n = &self.nodes[node];
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for a in 0..self.num_actions {
            let score = puct_score(
                n.q_values[a],
                n.visit_counts[a],
                n.total_visits,
                self.num_actions,
                self.config.c1,
                self.config.c2,
            );
            if score > best_score {
                best = a;
                best_score = score;
            }
        }
        best
    }

    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> Selection {
        let mut path = Vec::new();
        let mut node = 0;
        loop {
            if self.nodes[node].is_terminal() {
                return Selection { path, leaf: node, action: None };
            }
            let action = self.best_action(node);
            match self.nodes[node].children[action] {
                None => return Selection { path, leaf: node, action: Some(action) },
                Some(chance) => {
                    let branch = self.chances[chance].sample_branch(rng);
                    path.push(PathStep { node, action, chance, branch });
                    node = self.chances[chance].branches[branch].child;
                }
            }
        }
    }

    /// Samples `branching_k` outcomes at (leaf, action), merges equal ones
    /// and attaches the resulting chance node.
    pub fn expand<M, R>(
        &mut self,
        model: &M,
        leaf: NodeId,
        action: usize,
        rng: &mut R,
    ) -> Result<(ChanceId, ExpansionEvent), PlanError>
    where
        M: DynamicsModel<State = S>,
        R: Rng + ?Sized,
    {
        assert!(self.nodes[leaf].children[action].is_none(), "leaf already expanded");
        let k = self.config.branching_k;
        let state = self.nodes[leaf].state.as_ref().expect("expanding a terminal node");
        let samples = model.sample_many(state, action, k, rng)?;
        debug_assert_eq!(samples.len(), k);

        let mut distinct: Vec<(M::Outcome, u32)> = Vec::with_capacity(k);
        for s in &samples {
            match distinct.iter_mut().find(|(o, _)| o == s) {
                Some((_, w)) => *w += 1,
                None => distinct.push((s.clone(), 1)),
            }
        }

        let mut children = Vec::with_capacity(distinct.len());
        for (outcome, weight) in &distinct {
            let child_state = if model.is_terminal(outcome) {
                None
            } else {
                Some(model.advance(state, action, outcome)?)
            };
            children.push((child_state, model.reward(outcome), *weight));
        }

        let depth = self.nodes[leaf].depth + 1;
        let mut branches = Vec::with_capacity(children.len());
        for (child_state, reward, weight) in children {
            let child = self.nodes.len();
            self.nodes.push(DecisionNode::new(child_state, self.num_actions, depth));
            branches.push(Branch { child, reward, weight });
        }
        let chance = ChanceNode { branches };
        let event = ExpansionEvent {
            raw_rewards: samples.iter().map(|o| model.reward(o)).collect(),
            branches: chance.branches.iter().map(|b| (b.reward, b.weight)).collect(),
            merged_mean: chance.mean_reward(),
        };
        let id = self.chances.len();
        self.chances.push(chance);
        self.nodes[leaf].children[action] = Some(id);
        Ok((id, event))
    }

    /// Propagates the return of a fresh chance node (or of a terminal leaf
    /// when `new_chance` is `None`) back to the root.
    pub fn backup(&mut self, selection: &Selection, new_chance: Option<ChanceId>) {
        let gamma = self.config.gamma;
        let mut g = 0.0;
        if let (Some(chance), Some(action)) = (new_chance, selection.action) {
            g = self.chances[chance].mean_reward();
            self.update(selection.leaf, action, g);
        }
        for step in selection.path.iter().rev() {
            let r = self.chances[step.chance].branches[step.branch].reward;
            g = r + gamma * g;
            self.update(step.node, step.action, g);
        }
        self.expansions += 1;
        let depth = self.nodes[selection.leaf].depth;
        self.depth_sum += depth;
        self.max_depth = self.max_depth.max(depth);
    }

    fn update(&mut self, node: NodeId, action: usize, g: f64) {
        let n = &mut self.nodes[node];
        let visits = n.visit_counts[action] as f64;
        n.q_values[action] = (n.q_values[action] * visits + g) / (visits + 1.0);
        n.visit_counts[action] += 1;
        n.total_visits += 1;
        if let Some(log) = self.backup_log.as_mut() {
            log.push(BackupRecord { node, action, value: g });
        }
    }

    /// One select, expand, backup cycle.
    pub fn iterate<M, R>(
        &mut self,
        model: &M,
        rng: &mut R,
        observer: &mut dyn FnMut(&ExpansionEvent),
    ) -> Result<(), PlanError>
    where
        M: DynamicsModel<State = S>,
        R: Rng + ?Sized,
    {
        let selection = self.select(rng);
        let chance = match selection.action {
            Some(action) => {
                let (id, event) = self.expand(model, selection.leaf, action, rng)?;
                observer(&event);
                Some(id)
            }
            None => None,
        };
        self.backup(&selection, chance);
        Ok(())
    }

    pub fn run<M, R>(
        &mut self,
        model: &M,
        rng: &mut R,
        observer: &mut dyn FnMut(&ExpansionEvent),
    ) -> Result<(), PlanError>
    where
        M: DynamicsModel<State = S>,
        R: Rng + ?Sized,
    {
        for _ in 0..self.config.num_expansions {
            self.iterate(model, rng, observer)?;
        }
        Ok(())
    }

    /// Action probabilities from root visits plus the chosen action.
    pub fn result<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PlanResult, PlanError> {
        let root = self.root();
        let probabilities = action_probabilities(&root.visit_counts, self.config.temperature)?;
        let action = if self.config.greedy {
            let max = *root.visit_counts.iter().max().unwrap();
            root.visit_counts.iter().position(|&n| n == max).unwrap()
        } else {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = probabilities.iter().rposition(|&p| p > 0.0).unwrap();
            for (a, &p) in probabilities.iter().enumerate() {
                acc += p;
                if u < acc && p > 0.0 {
                    chosen = a;
                    break;
                }
            }
            chosen
        };
        let stats = (0..self.num_actions)
            .map(|a| RootStat {
                action: a,
                visits: root.visit_counts[a],
                q: root.q_values[a],
                probability: probabilities[a],
            })
            .collect();
        Ok(PlanResult {
            action,
            probabilities,
            root: stats,
            expansions: self.expansions,
            mean_depth: if self.expansions == 0 {
                0.0
            } else {
                self.depth_sum as f64 / self.expansions as f64
            },
            max_depth: self.max_depth,
            decision_nodes: self.nodes.len(),
        })
    }
}

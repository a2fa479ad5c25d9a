//! Test oracles written against the environment's observable behaviour
//! rather than the internals they check.
#![allow(dead_code)]

use alchemy_core::env::{Action, Chemistry, EnvConfig, EpisodeState, Observation, StepOutcome};

/// Checks one chemistry against the structural constraints. Returns the
/// first violation.
pub fn check_chemistry(config: &EnvConfig, c: &Chemistry) -> Result<(), String> {
    let axes = config.num_feature_axes;
    let vertices = 1usize << axes;
    let colors = 2 * axes;
    if c.potion_effects.len() != colors {
        return Err(format!("{} potion effects", c.potion_effects.len()));
    }

    // pairing: colors 2p and 2p+1 share an axis with opposite signs, and
    // every axis has exactly one pair
    let mut pair_axes = Vec::new();
    for p in 0..axes {
        let (a, b) = (c.potion_effects[2 * p], c.potion_effects[2 * p + 1]);
        if a.axis != b.axis || a.sign != -b.sign || a.sign.abs() != 1 {
            return Err(format!("colors {} and {} do not form a pair", 2 * p, 2 * p + 1));
        }
        pair_axes.push(a.axis as usize);
    }
    pair_axes.sort();
    if pair_axes != (0..axes).collect::<Vec<_>>() {
        return Err(format!("pair axes {pair_axes:?}"));
    }

    // parallel edges: a color moves along its own axis, in the same
    // direction on every present edge, and never elsewhere
    let present = |v: usize, axis: usize| -> bool {
        let low = v & !(1 << axis);
        (0..colors).any(|col| c.apply(low, col) == Some(low | 1 << axis))
    };
    for col in 0..colors {
        let effect = c.potion_effects[col];
        for v in 0..vertices {
            let got = c.apply(v, col);
            let axis = effect.axis as usize;
            let bit = v >> axis & 1;
            let wants_move = (effect.sign > 0 && bit == 0) || (effect.sign < 0 && bit == 1);
            let expected = (wants_move && present(v, axis)).then_some(v ^ 1 << axis);
            if got != expected {
                return Err(format!("color {col} at vertex {v}: {got:?} vs {expected:?}"));
            }
        }
    }

    // connectivity, by union-find over edges seen through potions
    let mut parent: Vec<usize> = (0..vertices).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        if p[x] != x {
            let r = find(p, p[x]);
            p[x] = r;
        }
        p[x]
    }
    for v in 0..vertices {
        for axis in 0..axes {
            if v >> axis & 1 == 0 && present(v, axis) {
                let (a, b) = (find(&mut parent, v), find(&mut parent, v | 1 << axis));
                parent[a] = b;
            }
        }
    }
    let root = find(&mut parent, 0);
    if (0..vertices).any(|v| find(&mut parent, v) != root) {
        return Err(format!("edge set {:#b} is disconnected", c.edges));
    }
    if !config.edge_deletion_enabled && (0..vertices).any(|v| (0..axes).any(|a| !present(v, a))) {
        return Err("edge missing with deletion disabled".into());
    }

    // vocabulary: features draw from the two declared values and the map
    // from vertices to feature vectors is one-to-one
    let mut seen = Vec::new();
    for v in 0..vertices {
        let f = c.features(v, config.feature_values);
        if f.len() != axes || f.iter().any(|x| !config.feature_values.contains(x)) {
            return Err(format!("vertex {v} shows {f:?}"));
        }
        if seen.contains(&f) {
            return Err(format!("two vertices show {f:?}"));
        }
        if c.vertex_from_features(&f, config.feature_values) != Some(v) {
            return Err(format!("vertex {v} does not round-trip"));
        }
        seen.push(f);
    }
    Ok(())
}

/// Whether `obs` is exactly what a trial under chemistry `c` can show.
fn explains_trial(config: &EnvConfig, c: &Chemistry, obs: &Observation, trial: usize) -> Option<EpisodeState> {
    let state = EpisodeState::from_observation(config, c.clone(), obs, trial).ok()?;
    (state.observe() == *obs).then_some(state)
}

/// Brute-force posterior over `Chemistry::enumerate(config)`: the uniform
/// prior restricted to chemistries under which the true environment rules
/// reproduce every observation and reward of the history.
pub fn brute_force_posterior(
    config: &EnvConfig,
    initial: &Observation,
    history: &[(usize, StepOutcome)],
) -> Vec<f64> {
    let space = Chemistry::enumerate(config);
    let consistent: Vec<bool> = space
        .iter()
        .map(|c| {
            let Some(mut state) = explains_trial(config, c, initial, 0) else { return false };
            for (action, outcome) in history {
                let boundary = state.at_trial_boundary();
                let mut sim = state.clone();
                let Ok(step) = sim.step(Action::from_index(*action, config).unwrap()) else { return false };
                if step.reward != outcome.reward || step.done != outcome.done {
                    return false;
                }
                if boundary && !step.done {
                    match explains_trial(config, c, &outcome.observation, state.trial_index + 1) {
                        Some(next) => state = next,
                        None => return false,
                    }
                } else {
                    if step.observation != outcome.observation {
                        return false;
                    }
                    state = sim;
                }
            }
            true
        })
        .collect();
    let total = consistent.iter().filter(|&&b| b).count() as f64;
    consistent.iter().map(|&b| if b { 1.0 / total } else { 0.0 }).collect()
}

/// Plays `steps` actions from `policy` in the episode of `seed`, returning
/// the initial observation and the (action, outcome) history.
pub fn random_history(
    config: &EnvConfig,
    seed: u64,
    steps: usize,
    mut policy: impl FnMut() -> usize,
) -> (EpisodeState, Observation, Vec<(usize, StepOutcome)>) {
    let (mut env, initial) = EpisodeState::reset(config, seed).unwrap();
    let mut history = Vec::new();
    for _ in 0..steps {
        if env.done {
            break;
        }
        let a = policy();
        let outcome = env.step(Action::from_index(a, config).unwrap()).unwrap();
        history.push((a, outcome));
    }
    (env, initial, history)
}

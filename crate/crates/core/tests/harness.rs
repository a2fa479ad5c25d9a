use std::collections::HashMap;
use std::sync::Arc;

use alchemy_core::dataset::admissible_values;
use alchemy_core::env::{Action, EnvConfig, EpisodeState};
use alchemy_core::harness::{
    evaluate, run_episode, Agent, BeliefFactory, CollectNothingAgent, HeuristicAgent, NeuralFactory,
    OracleFactory, PlannerAgent, RandomAgent,
};
use alchemy_core::model::{Architecture, Encoding, NeuralModel};
use alchemy_core::planner::SearchConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Best total reward reachable from `env` by exhaustive search with
/// memoisation; valid within a single trial, where steps are deterministic.
fn optimum(env: &EpisodeState, memo: &mut HashMap<Vec<u32>, f64>) -> f64 {
    if env.done {
        return 0.0;
    }
    let key: Vec<u32> = env.observe().0.iter().map(|v| v.to_bits()).collect();
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let config = &env.config;
    let mut best = f64::NEG_INFINITY;
    for a in 0..config.num_actions() {
        let mut next = env.clone();
        let o = next.step(Action::from_index(a, config).unwrap()).unwrap();
        best = best.max(o.reward + optimum(&next, memo));
    }
    memo.insert(key, best);
    best
}

#[test]
fn oracle_planner_finds_the_single_trial_optimum() {
    let config = EnvConfig { num_trials: 1, steps_per_trial: 5, ..EnvConfig::reduced() };
    let search = SearchConfig { gamma: 1.0, greedy: true, num_expansions: 1500, ..SearchConfig::default() };
    let mut optimal = 0;
    let seeds = 20;
    for seed in 0..seeds {
        let (env, _) = EpisodeState::reset(&config, seed).unwrap();
        let best = optimum(&env, &mut HashMap::new());
        let mut agent = PlannerAgent::new(OracleFactory { config: config.clone() }, search.clone());
        let score = run_episode(&mut agent, &config, seed).unwrap().score;
        assert!(score <= best + 1e-9, "seed {seed}: {score} beats the optimum {best}");
        optimal += (score == best) as usize;
    }
    assert!(optimal >= 17, "optimal on {optimal}/{seeds} trials");
}

#[test]
fn heuristic_never_collects_a_negative_stone() {
    let config = EnvConfig::default();
    for seed in 0..100 {
        let mut agent = HeuristicAgent::new(&config);
        let result = run_episode(&mut agent, &config, seed).unwrap();
        let (mut env, _) = EpisodeState::reset(&config, seed).unwrap();
        for &a in &result.actions {
            let action = Action::from_index(a, &config).unwrap();
            if let Action::CollectStone(s) = action {
                if !env.stones[s].collected {
                    assert!(env.stones[s].reward_value >= 0.0, "seed {seed}");
                }
            }
            env.step(action).unwrap();
        }
    }
}

#[test]
fn random_beats_doing_nothing_at_full_scale() {
    let config = EnvConfig::default();
    let random = evaluate(|| RandomAgent::new(&config), &config, 200, 0).unwrap();
    let nothing = evaluate(|| CollectNothingAgent, &config, 200, 0).unwrap();
    assert_eq!(nothing.mean, 0.0);
    assert!(random.beats(&nothing, 3.0), "{} ± {}", random.mean, random.stderr);
}

#[test]
fn belief_agent_needs_the_reduced_scale() {
    assert!(BeliefFactory::new(&EnvConfig::default()).is_err());
}

#[test]
fn neural_planner_runs_an_episode() {
    let config = EnvConfig { num_trials: 2, steps_per_trial: 4, ..EnvConfig::reduced() };
    let encoding = Encoding::new(admissible_values(&config));
    let arch = Architecture { model_dim: 16, num_heads: 2, num_layers: 1, ff_dim: 16, head_dim: 16, gru_hidden: 8, ..Architecture::default() };
    let weights = arch.init_weights(
        encoding.obs_dims(),
        encoding.num_categories(),
        config.num_actions(),
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    let model = NeuralModel::for_env(&weights, arch, encoding, &config).unwrap();
    let factory = NeuralFactory { model: Arc::new(model) };
    let make = || PlannerAgent::new(factory.clone(), SearchConfig::with_expansions(20));
    let a = evaluate(make, &config, 3, 1).unwrap();
    let b = evaluate(make, &config, 3, 1).unwrap();
    assert_eq!(a.scores, b.scores);
    let stats = a.planner.unwrap();
    assert_eq!(stats.decisions, 3 * config.episode_length());
    assert_eq!(stats.expansions, 20 * stats.decisions);
    assert_eq!(make().name(), "planner-neural-20");
}

#[test]
fn failures_name_the_episode() {
    struct Broken;
    impl Agent for Broken {
        fn name(&self) -> String {
            "broken".into()
        }
        fn reset(&mut self, _: &EpisodeState, _: u64) -> Result<(), alchemy_core::harness::HarnessError> {
            Ok(())
        }
        fn act(&mut self) -> Result<usize, alchemy_core::harness::HarnessError> {
            Ok(10_000)
        }
        fn observe(&mut self, _: &alchemy_core::env::StepOutcome) -> Result<(), alchemy_core::harness::HarnessError> {
            Ok(())
        }
    }
    let config = EnvConfig::reduced();
    let err = evaluate(|| Broken, &config, 2, 0).unwrap_err().to_string();
    assert!(err.starts_with("episode "), "{err}");
}

#[test]
fn entropy_split_of_a_flat_model() {
    use alchemy_core::dataset::{generate, Dataset};
    use alchemy_core::harness::entropy_split;
    use alchemy_core::model::Tensor;

    let config = EnvConfig::reduced();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.atd");
    generate(&config, 6, 0, &path).unwrap();
    let data = Dataset::load(&path).unwrap();
    let encoding = Encoding::new(admissible_values(&config));
    let arch = Architecture { model_dim: 16, num_heads: 2, num_layers: 1, ff_dim: 16, head_dim: 16, gru_hidden: 8, ..Architecture::default() };
    let (d, n) = (encoding.obs_dims(), encoding.num_categories());
    let mut weights = arch.init_weights(d, n, config.num_actions(), &mut ChaCha8Rng::seed_from_u64(0));

    let random = NeuralModel::for_env(&weights, arch.clone(), encoding.clone(), &config).unwrap();
    let split = entropy_split(&random, &config, &data.records).unwrap();
    assert_eq!(split.boundary_steps, 6 * (config.num_trials - 1));
    assert_eq!(split.boundary_steps + split.within_steps, 6 * config.episode_length());
    let weighted = (split.boundary * split.boundary_steps as f64 + split.within * split.within_steps as f64)
        / (split.boundary_steps + split.within_steps) as f64;
    assert!((weighted - split.total).abs() < 1e-9);

    // zero output layers give uniform predictions over each vocabulary
    for name in ["reward_head.2.weight", "reward_head.2.bias", "obs_gru_out.weight", "obs_gru_out.bias", "obs_linear.weight", "obs_linear.bias"] {
        let shape = weights.get(name).unwrap().shape.clone();
        weights.insert(name, Tensor::zeros(shape));
    }
    let flat = NeuralModel::for_env(&weights, arch, encoding.clone(), &config).unwrap();
    let split = entropy_split(&flat, &config, &data.records).unwrap();
    let expected = (0..=d).map(|i| (encoding.vocab_size(i) as f64).ln()).sum::<f64>() / (d + 1) as f64;
    assert!((split.boundary - expected).abs() < 1e-9, "{split:?}");
    assert!((split.within - expected).abs() < 1e-9);
}

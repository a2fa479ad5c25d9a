//! Command-line interface of the `alchemy` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset};
use crate::env::{Action, EnvConfig, EpisodeState};
use crate::harness::{
    evaluate, BeliefFactory, CollectNothingAgent, EvalReport, HeuristicAgent, ModelFactory,
    NeuralFactory, OracleFactory, PlannerAgent, RandomAgent,
};
use crate::model::{
    Architecture, Encoding, EnvModel, ModelWeights, NeuralModel, OracleModel, StepTokens,
};
use crate::planner::{plan, SearchConfig};

#[derive(Parser, Debug)]
#[command(name = "alchemy", version, about = "Symbolic Alchemy environment, planner and models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a uniform-policy trajectory dataset (ATD1).
    GenData {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, default_value_t = 10_000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data.atd")]
        out: PathBuf,
    },
    /// Extract per-dimension value vocabularies from a dataset.
    ExtractVocab {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "vocab.json")]
        out: PathBuf,
    },
    /// Evaluate an agent over paired episodes.
    Eval {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, value_enum, default_value_t = AgentKind::Random)]
        agent: AgentKind,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long, default_value_t = 250)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Jsonl)]
        format: Format,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay actions from a fresh episode, then run one search and print
    /// the root statistics.
    PlanStep {
        #[command(flatten)]
        env: EnvArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        search: SearchArgs,
        /// Episode seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated action indices taken before planning.
        #[arg(long, value_delimiter = ',')]
        history: Vec<usize>,
    },
    /// Print the hidden chemistry and first observation of an episode.
    InspectChemistry {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the neural model on a token fixture and print (or compare) logits.
    ParityCheck {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Architecture JSON; defaults to the standard architecture.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        num_actions: usize,
        /// JSON `{"steps": [{"obs", "reward", "action"}], "next_obs": [[..]]}`.
        #[arg(long)]
        fixture: PathBuf,
        /// JSON `{"logits": [[[..]]]}` to compare against.
        #[arg(long)]
        expected: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct EnvArgs {
    /// TOML file overriding any config field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset the config file is applied on top of.
    #[arg(long, value_enum, default_value_t = Scale::Reduced)]
    scale: Scale,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Belief)]
    model: ModelKind,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Sampling temperature of the neural model; 0 is argmax.
    #[arg(long, default_value_t = 1.0)]
    model_temperature: f32,
}

#[derive(Args, Debug, Clone)]
struct SearchArgs {
    #[arg(long, default_value_t = 1250)]
    expansions: usize,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 3)]
    branching_k: usize,
    #[arg(long, default_value_t = 0.57)]
    c1: f64,
    #[arg(long, default_value_t = 16.15)]
    c2: f64,
    #[arg(long, default_value_t = 0.55)]
    temperature: f64,
    /// Act on the most visited root action instead of sampling.
    #[arg(long)]
    greedy: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Scale {
    Full,
    Reduced,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum AgentKind {
    Nothing,
    Random,
    Heuristic,
    Planner,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModelKind {
    Oracle,
    Belief,
    Neural,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Jsonl,
    Csv,
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

impl EnvArgs {
    fn load(&self) -> Result<EnvConfig, BoxError> {
        let base = match self.scale {
            Scale::Full => EnvConfig::default(),
            Scale::Reduced => EnvConfig::reduced(),
        };
        let Some(path) = &self.config else { return Ok(base) };
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(base.with_overrides(&text)?)
    }
}

impl SearchArgs {
    fn config(&self) -> SearchConfig {
        SearchConfig {
            gamma: self.gamma,
            branching_k: self.branching_k,
            c1: self.c1,
            c2: self.c2,
            temperature: self.temperature,
            num_expansions: self.expansions,
            greedy: self.greedy,
        }
    }
}

impl ModelArgs {
    fn neural(&self, config: &EnvConfig) -> Result<NeuralModel, BoxError> {
        let (Some(weights), Some(vocab)) = (&self.weights, &self.vocab) else {
            return Err("--model neural needs --weights and --vocab".into());
        };
        let arch = load_arch(self.arch.as_deref())?;
        let encoding = Encoding::load(vocab)?;
        let w = ModelWeights::load_unchecked(weights)?;
        let mut model = NeuralModel::for_env(&w, arch, encoding, config)?;
        model.temperature = self.model_temperature;
        Ok(model)
    }
}

fn load_arch(path: Option<&Path>) -> Result<Architecture, BoxError> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(Architecture::default()),
    }
}

fn write_to(out: &Option<PathBuf>, stdout: &mut dyn Write, f: &dyn Fn(&mut dyn Write) -> std::io::Result<()>) -> Result<(), BoxError> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            f(&mut w)?;
            w.flush()?;
        }
        None => f(stdout)?,
    }
    Ok(())
}

fn emit_report(report: &EvalReport, format: Format, out: &Option<PathBuf>, stdout: &mut dyn Write) -> Result<(), BoxError> {
    write_to(out, stdout, &|w| match format {
        Format::Jsonl => report.write_jsonl(w),
        Format::Csv => report.write_csv(w, true),
    })
}

fn eval_planner<F: ModelFactory>(factory: F, search: SearchConfig, config: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalReport, BoxError> {
    Ok(evaluate(|| PlannerAgent::new(factory.clone(), search.clone()), config, episodes, seed)?)
}

#[derive(Serialize)]
struct PlanStepOutput<'a> {
    observation: &'a [f32],
    result: crate::planner::PlanResult,
}

fn plan_step<M: EnvModel>(
    model: &M,
    history: &[(usize, crate::env::StepOutcome)],
    search: &SearchConfig,
    seed: u64,
    initial: &crate::env::Observation,
) -> Result<crate::planner::PlanResult, BoxError> {
    let mut state = model.initial_state(initial)?;
    for (action, outcome) in history {
        state = model.advance(&state, *action, &model.outcome_from_step(outcome)?)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(plan(model, state, search, &mut rng)?)
}

#[derive(Deserialize)]
struct Fixture {
    steps: Vec<StepTokens>,
    next_obs: Vec<Vec<u16>>,
}

#[derive(Serialize, Deserialize)]
struct Logits {
    logits: Vec<Vec<Vec<f32>>>,
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<(), BoxError> {
    match command {
        Command::GenData { env, episodes, seed, out } => {
            let config = env.load()?;
            let header = dataset::generate(&config, episodes, seed, &out)?;
            writeln!(stdout, "{}", serde_json::to_string(&header)?)?;
        }
        Command::ExtractVocab { data, out } => {
            let ds = Dataset::load(&data)?;
            let enc = dataset::extract_vocab(&ds.records)?;
            enc.save(&out)?;
            writeln!(
                stdout,
                "{}",
                serde_json::json!({"dims": enc.vocab.len(), "categories": enc.num_categories(), "out": out})
            )?;
        }
        Command::Eval { env, agent, model, search, episodes, seed, format, out } => {
            let config = env.load()?;
            let search = search.config();
            let report = match agent {
                AgentKind::Nothing => evaluate(|| CollectNothingAgent, &config, episodes, seed)?,
                AgentKind::Random => evaluate(|| RandomAgent::new(&config), &config, episodes, seed)?,
                AgentKind::Heuristic => evaluate(|| HeuristicAgent::new(&config), &config, episodes, seed)?,
                AgentKind::Planner => match model.model {
                    ModelKind::Oracle => eval_planner(OracleFactory { config: config.clone() }, search, &config, episodes, seed)?,
                    ModelKind::Belief => eval_planner(BeliefFactory::new(&config)?, search, &config, episodes, seed)?,
                    ModelKind::Neural => {
                        let factory = NeuralFactory { model: std::sync::Arc::new(model.neural(&config)?) };
                        eval_planner(factory, search, &config, episodes, seed)?
                    }
                },
            };
            emit_report(&report, format, &out, stdout)?;
        }
        Command::PlanStep { env, model, search, seed, history } => {
            let config = env.load()?;
            let search = search.config();
            let (mut state, initial) = EpisodeState::reset(&config, seed)?;
            let mut steps = Vec::with_capacity(history.len());
            for &a in &history {
                let outcome = state.step(Action::from_index(a, &config)?)?;
                let done = outcome.done;
                steps.push((a, outcome));
                if done {
                    return Err("history runs past the end of the episode".into());
                }
            }
            let result = match model.model {
                ModelKind::Oracle => {
                    let m = OracleModel::new(config.clone(), state.chemistry.clone());
                    plan_step(&m, &steps, &search, seed, &initial)?
                }
                ModelKind::Belief => {
                    let m = crate::model::BeliefModel::new(config.clone())?;
                    plan_step(&m, &steps, &search, seed, &initial)?
                }
                ModelKind::Neural => {
                    let m = model.neural(&config)?;
                    plan_step(&m, &steps, &search, seed, &initial)?
                }
            };
            let obs = state.observe();
            let line = PlanStepOutput { observation: obs.as_slice(), result };
            writeln!(stdout, "{}", serde_json::to_string(&line)?)?;
        }
        Command::InspectChemistry { env, seed } => {
            let config = env.load()?;
            let (state, obs) = EpisodeState::reset(&config, seed)?;
            let out = serde_json::json!({
                "seed": seed,
                "chemistry": state.chemistry,
                "stones": state.stones,
                "potions": state.potions,
                "observation": obs.0,
            });
            writeln!(stdout, "{out}")?;
        }
        Command::ParityCheck { weights, vocab, arch, num_actions, fixture, expected, tolerance, out } => {
            let arch = load_arch(arch.as_deref())?;
            let encoding = Encoding::load(&vocab)?;
            let w = ModelWeights::load_unchecked(&weights)?;
            let fx: Fixture = serde_json::from_str(&std::fs::read_to_string(&fixture)?)?;
            let model = NeuralModel::new(&w, arch, encoding, num_actions, fx.steps.len().max(1))?;
            let logits = model.forward(&fx.steps, &fx.next_obs)?.logits;
            let nested = Logits {
                logits: logits
                    .outer_iter()
                    .map(|t| t.outer_iter().map(|d| d.to_vec()).collect())
                    .collect(),
            };
            write_to(&out, stdout, &|w| {
                serde_json::to_writer(&mut *w, &nested)?;
                writeln!(w)
            })?;
            if let Some(path) = expected {
                let want: Logits = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                let got = nested.logits.iter().flatten().flatten();
                let exp = want.logits.iter().flatten().flatten();
                if nested.logits.len() != want.logits.len() || got.clone().count() != exp.clone().count() {
                    return Err("expected logits have a different shape".into());
                }
                let max_diff = got.zip(exp).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
                if max_diff > tolerance {
                    return Err(format!("max abs logit difference {max_diff} exceeds {tolerance}").into());
                }
                eprintln!("parity ok: max abs logit difference {max_diff}");
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

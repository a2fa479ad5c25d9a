//! C interface to the alchemy environment and tree-search planner.
//!
//! Handles are opaque pointers created by `*_new` and released by the
//! matching `*_free`. Every fallible function returns an [`AlchemyStatus`];
//! on failure a description is available from
//! [`alchemy_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use alchemy_core::env::{Action, EnvConfig, EnvError, EpisodeState, Observation, StepOutcome};
use alchemy_core::model::{BeliefModel, EnvModel, ModelError, OracleModel};
use alchemy_core::planner::{plan, PlanError, PlanResult, SearchConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlchemyStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    InvalidAction = 3,
    EpisodeComplete = 4,
    BufferTooSmall = 5,
    NotReset = 6,
    ModelError = 7,
    PlanError = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlchemyScale {
    Full = 0,
    Reduced = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlchemyModelKind {
    /// Knows the episode's hidden chemistry.
    Oracle = 0,
    /// Exact posterior over chemistries; reduced scale only.
    Belief = 1,
}

/// Environment episode plus the history a planner needs.
pub struct AlchemyEnv {
    config: EnvConfig,
    state: Option<EpisodeState>,
    initial: Option<Observation>,
    history: Vec<(usize, StepOutcome)>,
}

pub struct AlchemyPlanner {
    kind: AlchemyModelKind,
    search: SearchConfig,
    belief: Option<BeliefModel>,
    rng: ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: AlchemyStatus, message: impl Into<String>) -> AlchemyStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn env_status(e: EnvError) -> AlchemyStatus {
    let status = match e {
        EnvError::Config(_) => AlchemyStatus::InvalidConfig,
        EnvError::InvalidAction(_) => AlchemyStatus::InvalidAction,
        EnvError::EpisodeComplete => AlchemyStatus::EpisodeComplete,
        EnvError::Observation(_) => AlchemyStatus::ModelError,
    };
    fail(status, e.to_string())
}

fn model_status(e: ModelError) -> AlchemyStatus {
    match e {
        ModelError::Env(e) => env_status(e),
        e => fail(AlchemyStatus::ModelError, e.to_string()),
    }
}

fn plan_status(e: PlanError) -> AlchemyStatus {
    match e {
        PlanError::Model(e) => model_status(e),
        e => fail(AlchemyStatus::PlanError, e.to_string()),
    }
}

fn guard(f: impl FnOnce() -> AlchemyStatus) -> AlchemyStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(AlchemyStatus::Panic, "internal panic"))
}

/// Copies `values` into a caller buffer of length `len`.
unsafe fn write_floats(values: &[f32], buf: *mut f32, len: usize) -> AlchemyStatus {
    if buf.is_null() {
        return fail(AlchemyStatus::NullPointer, "observation buffer is null");
    }
    if len < values.len() {
        return fail(
            AlchemyStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        );
    }
    ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    AlchemyStatus::Ok
}

/// Creates an environment. `config_toml` may be null, in which case the
/// preset for `scale` is used unchanged; otherwise its keys override the
/// preset.
///
/// # Safety
/// `config_toml` must be null or a valid NUL-terminated string; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alchemy_env_new(
    config_toml: *const c_char,
    scale: AlchemyScale,
    out: *mut *mut AlchemyEnv,
) -> AlchemyStatus {
    guard(|| {
        if out.is_null() {
            return fail(AlchemyStatus::NullPointer, "out is null");
        }
        let mut config = match scale {
            AlchemyScale::Full => EnvConfig::default(),
            AlchemyScale::Reduced => EnvConfig::reduced(),
        };
        if !config_toml.is_null() {
            let text = match CStr::from_ptr(config_toml).to_str() {
                Ok(t) => t,
                Err(_) => return fail(AlchemyStatus::InvalidConfig, "config is not UTF-8"),
            };
            config = match config.with_overrides(text) {
                Ok(c) => c,
                Err(e) => return env_status(e),
            };
        }
        if let Err(e) = config.validate() {
            return env_status(e);
        }
        *out = Box::into_raw(Box::new(AlchemyEnv { config, state: None, initial: None, history: Vec::new() }));
        AlchemyStatus::Ok
    })
}

/// # Safety
/// `env` must be null or a handle from [`alchemy_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn alchemy_env_free(env: *mut AlchemyEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn alchemy_env_observation_dim(env: *const AlchemyEnv) -> usize {
    env.as_ref().map_or(0, |e| e.config.observation_dim())
}

/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn alchemy_env_num_actions(env: *const AlchemyEnv) -> usize {
    env.as_ref().map_or(0, |e| e.config.num_actions())
}

/// Starts a new episode from `seed`.
///
/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn alchemy_env_reset(env: *mut AlchemyEnv, seed: u64) -> AlchemyStatus {
    guard(|| {
        let Some(env) = env.as_mut() else { return fail(AlchemyStatus::NullPointer, "env is null") };
        match EpisodeState::reset(&env.config, seed) {
            Ok((state, obs)) => {
                env.state = Some(state);
                env.initial = Some(obs);
                env.history.clear();
                AlchemyStatus::Ok
            }
            Err(e) => env_status(e),
        }
    })
}

/// Writes the current observation into `buf` (length `len`).
///
/// # Safety
/// `env` must be a live handle and `buf` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn alchemy_env_observe(env: *const AlchemyEnv, buf: *mut f32, len: usize) -> AlchemyStatus {
    guard(|| {
        let Some(env) = env.as_ref() else { return fail(AlchemyStatus::NullPointer, "env is null") };
        let Some(state) = &env.state else { return fail(AlchemyStatus::NotReset, "env was never reset") };
        write_floats(state.observe().as_slice(), buf, len)
    })
}

/// Takes action index `action`; writes the next observation, the reward and
/// whether the episode ended. `obs_buf` may be null to skip the observation.
///
/// # Safety
/// `env` must be a live handle; non-null pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn alchemy_env_step(
    env: *mut AlchemyEnv,
    action: u32,
    obs_buf: *mut f32,
    obs_len: usize,
    reward: *mut f64,
    done: *mut bool,
) -> AlchemyStatus {
    guard(|| {
        let Some(env) = env.as_mut() else { return fail(AlchemyStatus::NullPointer, "env is null") };
        let Some(state) = env.state.as_mut() else {
            return fail(AlchemyStatus::NotReset, "env was never reset");
        };
        if !obs_buf.is_null() && obs_len < env.config.observation_dim() {
            return fail(AlchemyStatus::BufferTooSmall, "observation buffer too small");
        }
        let act = match Action::from_index(action as usize, &env.config) {
            Ok(a) => a,
            Err(e) => return env_status(e),
        };
        let outcome = match state.step(act) {
            Ok(o) => o,
            Err(e) => return env_status(e),
        };
        if !obs_buf.is_null() {
            write_floats(outcome.observation.as_slice(), obs_buf, obs_len);
        }
        if let Some(r) = reward.as_mut() {
            *r = outcome.reward;
        }
        if let Some(d) = done.as_mut() {
            *d = outcome.done;
        }
        env.history.push((action as usize, outcome));
        AlchemyStatus::Ok
    })
}

/// Creates a planner. Search parameters take their standard values except
/// for the number of expansions.
///
/// # Safety
/// `env` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alchemy_planner_new(
    env: *const AlchemyEnv,
    kind: AlchemyModelKind,
    num_expansions: u32,
    seed: u64,
    out: *mut *mut AlchemyPlanner,
) -> AlchemyStatus {
    guard(|| {
        let (Some(env), false) = (env.as_ref(), out.is_null()) else {
            return fail(AlchemyStatus::NullPointer, "env or out is null");
        };
        let search = SearchConfig::with_expansions(num_expansions as usize);
        if let Err(e) = search.validate() {
            return plan_status(e);
        }
        let belief = match kind {
            AlchemyModelKind::Belief => match BeliefModel::new(env.config.clone()) {
                Ok(m) => Some(m),
                Err(e) => return model_status(e),
            },
            AlchemyModelKind::Oracle => None,
        };
        *out = Box::into_raw(Box::new(AlchemyPlanner {
            kind,
            search,
            belief,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }));
        AlchemyStatus::Ok
    })
}

/// # Safety
/// `planner` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alchemy_planner_free(planner: *mut AlchemyPlanner) {
    if !planner.is_null() {
        drop(Box::from_raw(planner));
    }
}

fn search_from<M: EnvModel>(
    model: &M,
    env: &AlchemyEnv,
    search: &SearchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PlanResult, AlchemyStatus> {
    let initial = env.initial.as_ref().ok_or_else(|| fail(AlchemyStatus::NotReset, "env was never reset"))?;
    let mut state = model.initial_state(initial).map_err(model_status)?;
    for (action, outcome) in &env.history {
        let o = model.outcome_from_step(outcome).map_err(model_status)?;
        state = model.advance(&state, *action, &o).map_err(model_status)?;
    }
    plan(model, state, search, rng).map_err(plan_status)
}

/// Searches from the environment's current history and writes the chosen
/// action. If `probs` is non-null it receives the root action
/// probabilities (`probs_len` must be at least the number of actions).
///
/// # Safety
/// Handles must be live; non-null pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn alchemy_plan_step(
    planner: *mut AlchemyPlanner,
    env: *const AlchemyEnv,
    action: *mut u32,
    probs: *mut f64,
    probs_len: usize,
) -> AlchemyStatus {
    guard(|| {
        let (Some(planner), Some(env), false) = (planner.as_mut(), env.as_ref(), action.is_null()) else {
            return fail(AlchemyStatus::NullPointer, "planner, env or action is null");
        };
        let Some(state) = &env.state else { return fail(AlchemyStatus::NotReset, "env was never reset") };
        if state.done {
            return fail(AlchemyStatus::EpisodeComplete, "episode complete");
        }
        if !probs.is_null() && probs_len < env.config.num_actions() {
            return fail(AlchemyStatus::BufferTooSmall, "probability buffer too small");
        }
        let result = match planner.kind {
            AlchemyModelKind::Oracle => {
                let model = OracleModel::new(env.config.clone(), state.chemistry.clone());
                search_from(&model, env, &planner.search, &mut planner.rng)
            }
            AlchemyModelKind::Belief => {
                let model = planner.belief.as_ref().expect("belief planner has a model");
                search_from(model, env, &planner.search, &mut planner.rng)
            }
        };
        match result {
            Ok(r) => {
                *action = r.action as u32;
                if !probs.is_null() {
                    ptr::copy_nonoverlapping(r.probabilities.as_ptr(), probs, r.probabilities.len());
                }
                AlchemyStatus::Ok
            }
            Err(status) => status,
        }
    })
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes (excluding the terminator).
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn alchemy_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn alchemy_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

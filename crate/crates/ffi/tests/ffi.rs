use std::ffi::{CStr, CString};
use std::ptr;

use alchemy_core::env::{Action, EnvConfig, EpisodeState};
use alchemy_core::model::{DynamicsModel, EnvModel, OracleModel};
use alchemy_core::planner::{plan, SearchConfig};
use alchemy_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn new_env(config: Option<&str>, scale: AlchemyScale) -> (*mut AlchemyEnv, AlchemyStatus) {
    let text = config.map(|c| CString::new(c).unwrap());
    let mut env = ptr::null_mut();
    let status = unsafe { alchemy_env_new(text.as_ref().map_or(ptr::null(), |t| t.as_ptr()), scale, &mut env) };
    (env, status)
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        alchemy_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn steps_match_the_core_environment() {
    let config = EnvConfig::reduced();
    let (env, status) = new_env(None, AlchemyScale::Reduced);
    assert_eq!(status, AlchemyStatus::Ok);
    let dim = unsafe { alchemy_env_observation_dim(env) };
    assert_eq!(dim, config.observation_dim());
    assert_eq!(unsafe { alchemy_env_num_actions(env) }, config.num_actions());

    let (mut core, first) = EpisodeState::reset(&config, 42).unwrap();
    assert_eq!(unsafe { alchemy_env_reset(env, 42) }, AlchemyStatus::Ok);
    let mut obs = vec![0f32; dim];
    assert_eq!(unsafe { alchemy_env_observe(env, obs.as_mut_ptr(), dim) }, AlchemyStatus::Ok);
    assert_eq!(obs, first.0);

    let mut t = 0;
    loop {
        let index = (t * 7 + 3) % config.num_actions();
        let expected = core.step(Action::from_index(index, &config).unwrap()).unwrap();
        let (mut reward, mut done) = (0.0, false);
        let status = unsafe { alchemy_env_step(env, index as u32, obs.as_mut_ptr(), dim, &mut reward, &mut done) };
        assert_eq!(status, AlchemyStatus::Ok);
        assert_eq!(obs, expected.observation.0);
        assert_eq!((reward, done), (expected.reward, expected.done));
        t += 1;
        if done {
            break;
        }
    }
    assert_eq!(t, config.episode_length());
    let status = unsafe { alchemy_env_step(env, 0, ptr::null_mut(), 0, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(status, AlchemyStatus::EpisodeComplete);
    unsafe { alchemy_env_free(env) };
}

#[test]
fn error_codes() {
    let mut env = ptr::null_mut();
    assert_eq!(unsafe { alchemy_env_new(ptr::null(), AlchemyScale::Reduced, ptr::null_mut()) }, AlchemyStatus::NullPointer);
    assert_eq!(new_env(Some("num_trials = \"x\""), AlchemyScale::Reduced).1, AlchemyStatus::InvalidConfig);
    assert!(!last_error().is_empty());
    assert_eq!(new_env(Some("steps_per_trial = 0"), AlchemyScale::Reduced).1, AlchemyStatus::InvalidConfig);

    let status = unsafe { alchemy_env_new(ptr::null(), AlchemyScale::Reduced, &mut env) };
    assert_eq!(status, AlchemyStatus::Ok);
    let mut obs = vec![0f32; 64];
    assert_eq!(unsafe { alchemy_env_observe(env, obs.as_mut_ptr(), 64) }, AlchemyStatus::NotReset);
    assert_eq!(unsafe { alchemy_env_step(env, 0, ptr::null_mut(), 0, ptr::null_mut(), ptr::null_mut()) }, AlchemyStatus::NotReset);
    unsafe { alchemy_env_reset(env, 1) };
    assert_eq!(unsafe { alchemy_env_observe(env, obs.as_mut_ptr(), 3) }, AlchemyStatus::BufferTooSmall);
    assert!(last_error().contains("needed"));
    assert_eq!(unsafe { alchemy_env_observe(env, ptr::null_mut(), 64) }, AlchemyStatus::NullPointer);
    assert_eq!(unsafe { alchemy_env_step(env, 999, ptr::null_mut(), 0, ptr::null_mut(), ptr::null_mut()) }, AlchemyStatus::InvalidAction);
    assert_eq!(unsafe { alchemy_env_step(ptr::null_mut(), 0, ptr::null_mut(), 0, ptr::null_mut(), ptr::null_mut()) }, AlchemyStatus::NullPointer);
    assert_eq!(unsafe { alchemy_env_observation_dim(ptr::null()) }, 0);

    let mut planner = ptr::null_mut();
    let status = unsafe { alchemy_planner_new(env, AlchemyModelKind::Oracle, 0, 0, &mut planner) };
    assert_eq!(status, AlchemyStatus::PlanError);
    unsafe {
        alchemy_env_free(env);
        alchemy_env_free(ptr::null_mut());
        alchemy_planner_free(ptr::null_mut());
    }
}

#[test]
fn error_message_truncates_and_reports_length() {
    new_env(Some("not toml ["), AlchemyScale::Reduced);
    let full = unsafe { alchemy_last_error_message(ptr::null_mut(), 0) };
    assert!(full > 4);
    let mut buf = [1 as std::ffi::c_char; 5];
    assert_eq!(unsafe { alchemy_last_error_message(buf.as_mut_ptr(), 5) }, full);
    assert_eq!(buf[4], 0);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_bytes().len(), 4);
}

#[test]
fn oracle_plan_matches_core_search() {
    let config = EnvConfig::reduced();
    let (env, _) = new_env(None, AlchemyScale::Reduced);
    let mut planner = ptr::null_mut();
    unsafe {
        alchemy_env_reset(env, 9);
        assert_eq!(alchemy_planner_new(env, AlchemyModelKind::Oracle, 64, 5, &mut planner), AlchemyStatus::Ok);
        alchemy_env_step(env, 1, ptr::null_mut(), 0, ptr::null_mut(), ptr::null_mut());
    }
    let mut action = u32::MAX;
    let mut probs = vec![0f64; config.num_actions()];
    let status = unsafe { alchemy_plan_step(planner, env, &mut action, probs.as_mut_ptr(), probs.len()) };
    assert_eq!(status, AlchemyStatus::Ok);

    let (mut core, first) = EpisodeState::reset(&config, 9).unwrap();
    let outcome = core.step(Action::from_index(1, &config).unwrap()).unwrap();
    let model = OracleModel::new(config.clone(), core.chemistry.clone());
    let state = model.initial_state(&first).unwrap();
    let state = model.advance(&state, 1, &model.outcome_from_step(&outcome).unwrap()).unwrap();
    let expected = plan(&model, state, &SearchConfig::with_expansions(64), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(action as usize, expected.action);
    assert_eq!(probs, expected.probabilities);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let mut short = [0f64; 2];
    let status = unsafe { alchemy_plan_step(planner, env, &mut action, short.as_mut_ptr(), 2) };
    assert_eq!(status, AlchemyStatus::BufferTooSmall);
    unsafe {
        alchemy_planner_free(planner);
        alchemy_env_free(env);
    }
}

#[test]
fn belief_planner_plays_an_episode() {
    let (env, _) = new_env(None, AlchemyScale::Reduced);
    let mut planner = ptr::null_mut();
    unsafe {
        alchemy_env_reset(env, 3);
        assert_eq!(alchemy_planner_new(env, AlchemyModelKind::Belief, 8, 0, &mut planner), AlchemyStatus::Ok);
    }
    let mut score = 0.0;
    loop {
        let mut action = 0;
        assert_eq!(unsafe { alchemy_plan_step(planner, env, &mut action, ptr::null_mut(), 0) }, AlchemyStatus::Ok);
        let (mut reward, mut done) = (0.0, false);
        let status = unsafe { alchemy_env_step(env, action, ptr::null_mut(), 0, &mut reward, &mut done) };
        assert_eq!(status, AlchemyStatus::Ok);
        score += reward;
        if done {
            break;
        }
    }
    assert!(score.is_finite());
    let mut action = 0;
    let status = unsafe { alchemy_plan_step(planner, env, &mut action, ptr::null_mut(), 0) };
    assert_eq!(status, AlchemyStatus::EpisodeComplete);
    unsafe {
        alchemy_planner_free(planner);
        alchemy_env_free(env);
    }
}

#[test]
fn belief_needs_an_enumerable_space() {
    let (env, status) = new_env(None, AlchemyScale::Full);
    assert_eq!(status, AlchemyStatus::Ok);
    let mut planner = ptr::null_mut();
    let status = unsafe { alchemy_planner_new(env, AlchemyModelKind::Belief, 8, 0, &mut planner) };
    assert_ne!(status, AlchemyStatus::Ok);
    assert!(planner.is_null());
    unsafe { alchemy_env_free(env) };
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(alchemy_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

//! Inference for the Transformer-encoder dynamics model.
//!
//! Each step t is the categorical encoding of (observation o_t, reward r_t)
//! plus the action a_t, mapped through one linear layer and summed with a
//! sinusoidal position code. Three post-norm encoder layers with causal
//! self-attention produce e_t, from which
//!
//! * the reward head `Linear -> ReLU -> Linear` predicts r_{t+1};
//! * the observation head computes `m = ReLU(Linear(e_t))` and predicts
//!   o_{t+1} one dimension at a time: a GRU cell whose initial hidden state
//!   is `Linear(m)` consumes the one-hot token of dimension i-1 (zeros for
//!   i = 0), and the logits for dimension i are the sum of a per-dimension
//!   linear map of the GRU state and a per-dimension linear map of `m`.
//!
//! Logits always have width `n` (the largest vocabulary); slots beyond a
//! dimension's vocabulary are ignored when sampling and scoring.
//!
//! Tensor manifest (D model width, F feed-forward width, M head width,
//! H GRU width, d observation dims, n categories, A actions):
//!
//! | name | shape |
//! |---|---|
//! | `input.weight`, `input.bias` | `[D, (d+1)n + A]`, `[D]` |
//! | `encoder.layers.{l}.self_attn.in_proj_weight`, `..in_proj_bias` | `[3D, D]`, `[3D]` |
//! | `encoder.layers.{l}.self_attn.out_proj.weight`, `..bias` | `[D, D]`, `[D]` |
//! | `encoder.layers.{l}.linear1.weight`, `..bias` | `[F, D]`, `[F]` |
//! | `encoder.layers.{l}.linear2.weight`, `..bias` | `[D, F]`, `[D]` |
//! | `encoder.layers.{l}.norm{1,2}.weight`, `..bias` | `[D]` |
//! | `reward_head.0.weight`, `..bias` | `[M, D]`, `[M]` |
//! | `reward_head.2.weight`, `..bias` | `[n, M]`, `[n]` |
//! | `obs_mlp.0.weight`, `..bias` | `[M, D]`, `[M]` |
//! | `obs_gru_init.weight`, `..bias` | `[H, M]`, `[H]` |
//! | `obs_gru.weight_ih`, `obs_gru.weight_hh` | `[3H, n]`, `[3H, H]` |
//! | `obs_gru.bias_ih`, `obs_gru.bias_hh` | `[3H]` |
//! | `obs_gru_out.weight`, `..bias` | `[d, n, H]`, `[d, n]` |
//! | `obs_linear.weight`, `..bias` | `[d, n, M]`, `[d, n]` |
//!
//! The `obs_gru*` tensors are absent without the GRU head and `obs_linear`
//! is absent without the final linear layer. GRU gates follow the
//! reset/update/new ordering of `torch.nn.GRUCell`.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DynamicsModel, Encoding, EnvModel, Manifest, ModelError, ModelWeights, Tensor};
use crate::env::{EnvConfig, Observation, StepOutcome};

const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ff_dim: usize,
    pub head_dim: usize,
    pub gru_hidden: usize,
    pub gru_head: bool,
    pub final_linear: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            model_dim: 256,
            num_heads: 4,
            num_layers: 3,
            ff_dim: 256,
            head_dim: 512,
            gru_hidden: 32,
            gru_head: true,
            final_linear: true,
        }
    }
}

impl Architecture {
    pub fn manifest(&self, obs_dims: usize, n: usize, num_actions: usize) -> Manifest {
        let (d_model, f, m, h) = (self.model_dim, self.ff_dim, self.head_dim, self.gru_hidden);
        let mut out = vec![
            ("input.weight".to_string(), vec![d_model, (obs_dims + 1) * n + num_actions]),
            ("input.bias".to_string(), vec![d_model]),
        ];
        for l in 0..self.num_layers {
            let p = format!("encoder.layers.{l}");
            out.extend([
                (format!("{p}.self_attn.in_proj_weight"), vec![3 * d_model, d_model]),
                (format!("{p}.self_attn.in_proj_bias"), vec![3 * d_model]),
                (format!("{p}.self_attn.out_proj.weight"), vec![d_model, d_model]),
                (format!("{p}.self_attn.out_proj.bias"), vec![d_model]),
                (format!("{p}.linear1.weight"), vec![f, d_model]),
                (format!("{p}.linear1.bias"), vec![f]),
                (format!("{p}.linear2.weight"), vec![d_model, f]),
                (format!("{p}.linear2.bias"), vec![d_model]),
                (format!("{p}.norm1.weight"), vec![d_model]),
                (format!("{p}.norm1.bias"), vec![d_model]),
                (format!("{p}.norm2.weight"), vec![d_model]),
                (format!("{p}.norm2.bias"), vec![d_model]),
            ]);
        }
        out.extend([
            ("reward_head.0.weight".to_string(), vec![m, d_model]),
            ("reward_head.0.bias".to_string(), vec![m]),
            ("reward_head.2.weight".to_string(), vec![n, m]),
            ("reward_head.2.bias".to_string(), vec![n]),
            ("obs_mlp.0.weight".to_string(), vec![m, d_model]),
            ("obs_mlp.0.bias".to_string(), vec![m]),
        ]);
        if self.gru_head {
            out.extend([
                ("obs_gru_init.weight".to_string(), vec![h, m]),
                ("obs_gru_init.bias".to_string(), vec![h]),
                ("obs_gru.weight_ih".to_string(), vec![3 * h, n]),
                ("obs_gru.weight_hh".to_string(), vec![3 * h, h]),
                ("obs_gru.bias_ih".to_string(), vec![3 * h]),
                ("obs_gru.bias_hh".to_string(), vec![3 * h]),
                ("obs_gru_out.weight".to_string(), vec![obs_dims, n, h]),
                ("obs_gru_out.bias".to_string(), vec![obs_dims, n]),
            ]);
        }
        if self.final_linear {
            out.extend([
                ("obs_linear.weight".to_string(), vec![obs_dims, n, m]),
                ("obs_linear.bias".to_string(), vec![obs_dims, n]),
            ]);
        }
        Manifest(out)
    }

    /// Weights drawn uniformly from `±1/sqrt(fan_in)`, layer-norm gains 1.
    pub fn init_weights<R: Rng + ?Sized>(
        &self,
        obs_dims: usize,
        n: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> ModelWeights {
        let mut w = ModelWeights::default();
        for (name, shape) in self.manifest(obs_dims, n, num_actions).0 {
            let len: usize = shape.iter().product();
            let data = if name.contains(".norm") && name.ends_with("weight") {
                vec![1.0; len]
            } else if name.contains(".norm") {
                vec![0.0; len]
            } else {
                let fan_in = if shape.len() >= 2 { *shape.last().unwrap() } else { shape[0] };
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            w.insert(name, Tensor::new(shape, data));
        }
        w
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::Other("model_dim must be divisible by num_heads".into()));
        }
        if !self.model_dim.is_multiple_of(2) {
            return Err(ModelError::Other("model_dim must be even".into()));
        }
        if !self.gru_head && !self.final_linear {
            return Err(ModelError::Other("observation head needs the GRU or the linear path".into()));
        }
        Ok(())
    }
}

fn mat(w: &ModelWeights, name: &str) -> Result<Array2<f32>, ModelError> {
    let t = w.get(name)?;
    Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
        .map_err(|e| ModelError::Other(e.to_string()))
}

fn vec1(w: &ModelWeights, name: &str) -> Result<Array1<f32>, ModelError> {
    Ok(Array1::from_vec(w.get(name)?.data.clone()))
}

fn ten3(w: &ModelWeights, name: &str) -> Result<Array3<f32>, ModelError> {
    let t = w.get(name)?;
    Array3::from_shape_vec((t.shape[0], t.shape[1], t.shape[2]), t.data.clone())
        .map_err(|e| ModelError::Other(e.to_string()))
}

struct EncoderLayer {
    in_w: Array2<f32>,
    in_b: Array1<f32>,
    out_w: Array2<f32>,
    out_b: Array1<f32>,
    l1_w: Array2<f32>,
    l1_b: Array1<f32>,
    l2_w: Array2<f32>,
    l2_b: Array1<f32>,
    n1_g: Array1<f32>,
    n1_b: Array1<f32>,
    n2_g: Array1<f32>,
    n2_b: Array1<f32>,
}

struct GruHead {
    init_w: Array2<f32>,
    init_b: Array1<f32>,
    w_ih: Array2<f32>,
    w_hh: Array2<f32>,
    b_ih: Array1<f32>,
    b_hh: Array1<f32>,
    out_w: Array3<f32>,
    out_b: Array2<f32>,
}

struct Params {
    input_w: Array2<f32>,
    input_b: Array1<f32>,
    layers: Vec<EncoderLayer>,
    rh1_w: Array2<f32>,
    rh1_b: Array1<f32>,
    rh2_w: Array2<f32>,
    rh2_b: Array1<f32>,
    om_w: Array2<f32>,
    om_b: Array1<f32>,
    gru: Option<GruHead>,
    linear: Option<(Array3<f32>, Array2<f32>)>,
}

impl Params {
    fn from_weights(w: &ModelWeights, arch: &Architecture) -> Result<Self, ModelError> {
        let layers = (0..arch.num_layers)
            .map(|l| {
                let p = format!("encoder.layers.{l}");
                Ok(EncoderLayer {
                    in_w: mat(w, &format!("{p}.self_attn.in_proj_weight"))?,
                    in_b: vec1(w, &format!("{p}.self_attn.in_proj_bias"))?,
                    out_w: mat(w, &format!("{p}.self_attn.out_proj.weight"))?,
                    out_b: vec1(w, &format!("{p}.self_attn.out_proj.bias"))?,
                    l1_w: mat(w, &format!("{p}.linear1.weight"))?,
                    l1_b: vec1(w, &format!("{p}.linear1.bias"))?,
                    l2_w: mat(w, &format!("{p}.linear2.weight"))?,
                    l2_b: vec1(w, &format!("{p}.linear2.bias"))?,
                    n1_g: vec1(w, &format!("{p}.norm1.weight"))?,
                    n1_b: vec1(w, &format!("{p}.norm1.bias"))?,
                    n2_g: vec1(w, &format!("{p}.norm2.weight"))?,
                    n2_b: vec1(w, &format!("{p}.norm2.bias"))?,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        let gru = if arch.gru_head {
            Some(GruHead {
                init_w: mat(w, "obs_gru_init.weight")?,
                init_b: vec1(w, "obs_gru_init.bias")?,
                w_ih: mat(w, "obs_gru.weight_ih")?,
                w_hh: mat(w, "obs_gru.weight_hh")?,
                b_ih: vec1(w, "obs_gru.bias_ih")?,
                b_hh: vec1(w, "obs_gru.bias_hh")?,
                out_w: ten3(w, "obs_gru_out.weight")?,
                out_b: mat(w, "obs_gru_out.bias")?,
            })
        } else {
            None
        };
        let linear = if arch.final_linear {
            Some((ten3(w, "obs_linear.weight")?, mat(w, "obs_linear.bias")?))
        } else {
            None
        };
        Ok(Self {
            input_w: mat(w, "input.weight")?,
            input_b: vec1(w, "input.bias")?,
            layers,
            rh1_w: mat(w, "reward_head.0.weight")?,
            rh1_b: vec1(w, "reward_head.0.bias")?,
            rh2_w: mat(w, "reward_head.2.weight")?,
            rh2_b: vec1(w, "reward_head.2.bias")?,
            om_w: mat(w, "obs_mlp.0.weight")?,
            om_b: vec1(w, "obs_mlp.0.bias")?,
            gru,
            linear,
        })
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn relu_inplace<D: ndarray::Dimension>(a: &mut ndarray::Array<f32, D>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn layer_norm(x: ArrayView1<f32>, g: &Array1<f32>, b: &Array1<f32>) -> Array1<f32> {
    let n = x.len() as f32;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    Array1::from_iter(x.iter().zip(g.iter().zip(b)).map(|(v, (g, b))| (v - mean) * inv * g + b))
}

fn layer_norm_rows(x: &Array2<f32>, g: &Array1<f32>, b: &Array1<f32>) -> Array2<f32> {
    let mut out = Array2::zeros(x.raw_dim());
    for (t, row) in x.outer_iter().enumerate() {
        out.row_mut(t).assign(&layer_norm(row, g, b));
    }
    out
}

/// `x W^T + b` for every row of `x`.
fn linear_rows(x: &Array2<f32>, w: &Array2<f32>, b: &Array1<f32>) -> Array2<f32> {
    x.dot(&w.t()) + b
}

fn softmax_masked(logits: ArrayView1<f32>, valid: usize, temperature: f32) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().take(valid).map(|&v| v as f64 / temperature as f64).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log p(target)` under the softmax over the first `valid` logits.
fn cross_entropy(logits: ArrayView1<f32>, valid: usize, target: usize) -> f64 {
    let vals: Vec<f64> = logits.iter().take(valid).map(|&v| v as f64).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - vals[target]
}

/// Tokens of one history step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepTokens {
    pub obs: Vec<u16>,
    pub reward: u16,
    pub action: u16,
}

/// Logits of shape `(steps, d + 1, n)`; row `d` is the reward.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Array3<f32>,
}

/// Sampled next observation and reward tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NeuralOutcome {
    pub obs: Vec<u16>,
    pub reward: u16,
    pub terminal: bool,
}

/// Per-layer keys and values of one processed step, linked to its prefix.
#[derive(Debug)]
struct CachedStep {
    parent: Option<Arc<CachedStep>>,
    keys: Vec<Array1<f32>>,
    values: Vec<Array1<f32>>,
}

/// History handle: processed steps plus the latest, not yet acted on,
/// observation and reward. Cloning is cheap; prefixes are shared.
#[derive(Debug, Clone)]
pub struct NeuralState {
    cache: Option<Arc<CachedStep>>,
    len: usize,
    pending_obs: Vec<u16>,
    pending_reward: u16,
}

impl NeuralState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct NeuralModel {
    arch: Architecture,
    encoding: Encoding,
    num_actions: usize,
    episode_length: usize,
    params: Params,
    positions: Array2<f32>,
    /// Softmax temperature used when sampling; 0 selects the argmax.
    pub temperature: f32,
}

impl std::fmt::Debug for NeuralModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NeuralModel").field("arch", &self.arch).finish()
    }
}

/// Sinusoidal position codes: sin on even channels, cos on odd channels.
fn positional_encoding(max_len: usize, dim: usize) -> Array2<f32> {
    let mut pe = Array2::zeros((max_len, dim));
    for pos in 0..max_len {
        for i in (0..dim).step_by(2) {
            let freq = (-(10000f64.ln()) * i as f64 / dim as f64).exp();
            let angle = pos as f64 * freq;
            pe[[pos, i]] = angle.sin() as f32;
            pe[[pos, i + 1]] = angle.cos() as f32;
        }
    }
    pe
}

impl NeuralModel {
    /// `episode_length` is the maximum context.
    pub fn new(
        weights: &ModelWeights,
        arch: Architecture,
        encoding: Encoding,
        num_actions: usize,
        episode_length: usize,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        let manifest = arch.manifest(encoding.obs_dims(), encoding.num_categories(), num_actions);
        weights.validate(&manifest)?;
        let params = Params::from_weights(weights, &arch)?;
        let positions = positional_encoding(episode_length, arch.model_dim);
        Ok(Self { arch, encoding, num_actions, episode_length, params, positions, temperature: 1.0 })
    }

    pub fn for_env(
        weights: &ModelWeights,
        arch: Architecture,
        encoding: Encoding,
        config: &EnvConfig,
    ) -> Result<Self, ModelError> {
        if encoding.obs_dims() != config.observation_dim() {
            return Err(ModelError::Other(format!(
                "vocabulary has {} observation dims, config has {}",
                encoding.obs_dims(),
                config.observation_dim()
            )));
        }
        Self::new(weights, arch, encoding, config.num_actions(), config.episode_length())
    }

    pub fn encoding(&self) -> &Encoding {
        &self.encoding
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn obs_dims(&self) -> usize {
        self.encoding.obs_dims()
    }

    fn n(&self) -> usize {
        self.encoding.num_categories()
    }

    fn check_tokens(&self, obs: &[u16], reward: u16, action: Option<u16>) -> Result<(), ModelError> {
        if obs.len() != self.obs_dims() {
            return Err(ModelError::Other(format!(
                "expected {} observation tokens, got {}",
                self.obs_dims(),
                obs.len()
            )));
        }
        for (d, &tok) in obs.iter().enumerate() {
            if tok as usize >= self.encoding.vocab_size(d) {
                return Err(ModelError::Other(format!("token {tok} out of range for dim {d}")));
            }
        }
        if reward as usize >= self.encoding.vocab_size(self.obs_dims()) {
            return Err(ModelError::Other(format!("reward token {reward} out of range")));
        }
        if let Some(a) = action {
            if a as usize >= self.num_actions {
                return Err(ModelError::Other(format!("action {a} out of range")));
            }
        }
        Ok(())
    }

    /// Input projection of one step plus its position code.
    fn embed(&self, obs: &[u16], reward: u16, action: u16, pos: usize) -> Array1<f32> {
        let n = self.n();
        let d = self.obs_dims();
        let w = &self.params.input_w;
        let mut x = &self.params.input_b + &self.positions.row(pos);
        for (i, &tok) in obs.iter().enumerate() {
            x += &w.column(i * n + tok as usize);
        }
        x += &w.column(d * n + reward as usize);
        x += &w.column((d + 1) * n + action as usize);
        x
    }

    fn reward_logits(&self, e: ArrayView1<f32>) -> Array1<f32> {
        let p = &self.params;
        let mut hidden = p.rh1_w.dot(&e) + &p.rh1_b;
        relu_inplace(&mut hidden);
        p.rh2_w.dot(&hidden) + &p.rh2_b
    }

    fn obs_hidden(&self, e: ArrayView1<f32>) -> Array1<f32> {
        let p = &self.params;
        let mut m = p.om_w.dot(&e) + &p.om_b;
        relu_inplace(&mut m);
        m
    }

    fn gru_init(&self, m: &Array1<f32>) -> Option<Array1<f32>> {
        self.params.gru.as_ref().map(|g| g.init_w.dot(m) + &g.init_b)
    }

    fn gru_step(&self, g: &GruHead, prev_token: Option<u16>, h: &Array1<f32>) -> Array1<f32> {
        let hs = h.len();
        let mut gi = g.b_ih.clone();
        if let Some(tok) = prev_token {
            gi += &g.w_ih.column(tok as usize);
        }
        let gh = g.w_hh.dot(h) + &g.b_hh;
        Array1::from_iter((0..hs).map(|j| {
            let r = sigmoid(gi[j] + gh[j]);
            let z = sigmoid(gi[hs + j] + gh[hs + j]);
            let cand = (gi[2 * hs + j] + r * gh[2 * hs + j]).tanh();
            (1.0 - z) * cand + z * h[j]
        }))
    }

    /// Logits of observation dimension `dim` given the head state.
    fn obs_dim_logits(&self, dim: usize, m: &Array1<f32>, h: Option<&Array1<f32>>) -> Array1<f32> {
        let mut logits = Array1::zeros(self.n());
        if let (Some(g), Some(h)) = (self.params.gru.as_ref(), h) {
            logits += &(g.out_w.index_axis(Axis(0), dim).dot(h) + g.out_b.row(dim));
        }
        if let Some((w, b)) = self.params.linear.as_ref() {
            logits += &(w.index_axis(Axis(0), dim).dot(m) + b.row(dim));
        }
        logits
    }

    /// Teacher-forced observation logits `(d, n)` for one step.
    fn obs_logits_forced(&self, e: ArrayView1<f32>, target: &[u16]) -> Array2<f32> {
        let m = self.obs_hidden(e);
        let mut h = self.gru_init(&m);
        let mut out = Array2::zeros((self.obs_dims(), self.n()));
        for dim in 0..self.obs_dims() {
            if let (Some(g), Some(hh)) = (self.params.gru.as_ref(), h.as_ref()) {
                let prev = (dim > 0).then(|| target[dim - 1]);
                h = Some(self.gru_step(g, prev, hh));
            }
            out.row_mut(dim).assign(&self.obs_dim_logits(dim, &m, h.as_ref()));
        }
        out
    }

    /// Full teacher-forced forward pass. `next_obs[t]` is the ground-truth
    /// observation that follows step `t` and conditions the recurrent head.
    pub fn forward(&self, steps: &[StepTokens], next_obs: &[Vec<u16>]) -> Result<ForwardOutput, ModelError> {
        let t_len = steps.len();
        if t_len > self.episode_length {
            return Err(ModelError::ContextOverflow(self.episode_length));
        }
        if next_obs.len() != t_len {
            return Err(ModelError::Other("next_obs must have one entry per step".into()));
        }
        for (s, nx) in steps.iter().zip(next_obs) {
            self.check_tokens(&s.obs, s.reward, Some(s.action))?;
            self.check_tokens(nx, 0, None)?;
        }
        let dm = self.arch.model_dim;
        let heads = self.arch.num_heads;
        let dh = dm / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let mut x = Array2::zeros((t_len, dm));
        for (t, s) in steps.iter().enumerate() {
            x.row_mut(t).assign(&self.embed(&s.obs, s.reward, s.action, t));
        }
        for layer in &self.params.layers {
            let qkv = linear_rows(&x, &layer.in_w, &layer.in_b);
            let mut attn = Array2::<f32>::zeros((t_len, dm));
            for h in 0..heads {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., dm + h * dh..dm + (h + 1) * dh]);
                let v = qkv.slice(s![.., 2 * dm + h * dh..2 * dm + (h + 1) * dh]);
                let mut scores = q.dot(&k.t()) * scale;
                for t in 0..t_len {
                    let mut row = scores.row_mut(t);
                    let max = row.iter().take(t + 1).cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut total = 0.0;
                    for j in 0..t_len {
                        if j > t {
                            row[j] = 0.0;
                        } else {
                            row[j] = (row[j] - max).exp();
                            total += row[j];
                        }
                    }
                    row /= total;
                }
                attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&scores.dot(&v));
            }
            let attn = linear_rows(&attn, &layer.out_w, &layer.out_b);
            x = layer_norm_rows(&(&x + &attn), &layer.n1_g, &layer.n1_b);
            let mut ff = linear_rows(&x, &layer.l1_w, &layer.l1_b);
            relu_inplace(&mut ff);
            let ff = linear_rows(&ff, &layer.l2_w, &layer.l2_b);
            x = layer_norm_rows(&(&x + &ff), &layer.n2_g, &layer.n2_b);
        }

        let d = self.obs_dims();
        let mut logits = Array3::zeros((t_len, d + 1, self.n()));
        for (t, target) in next_obs.iter().enumerate() {
            let e = x.row(t);
            logits.slice_mut(s![t, ..d, ..]).assign(&self.obs_logits_forced(e, target));
            logits.slice_mut(s![t, d, ..]).assign(&self.reward_logits(e));
        }
        Ok(ForwardOutput { logits })
    }

    /// Encoder output for one new step on top of a cached prefix, together
    /// with that step's cache entry.
    fn encode_step(&self, state: &NeuralState, action: u16) -> (Array1<f32>, CachedStep) {
        let dm = self.arch.model_dim;
        let heads = self.arch.num_heads;
        let dh = dm / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let mut prefix: Vec<&CachedStep> = Vec::with_capacity(state.len);
        let mut node = state.cache.as_deref();
        while let Some(c) = node {
            prefix.push(c);
            node = c.parent.as_deref();
        }
        prefix.reverse();

        let mut x = self.embed(&state.pending_obs, state.pending_reward, action, state.len);
        let mut keys = Vec::with_capacity(self.params.layers.len());
        let mut values = Vec::with_capacity(self.params.layers.len());
        let mut scores = vec![0f32; prefix.len() + 1];
        for (l, layer) in self.params.layers.iter().enumerate() {
            let qkv = layer.in_w.dot(&x) + &layer.in_b;
            let q = qkv.slice(s![..dm]);
            let k = qkv.slice(s![dm..2 * dm]).to_owned();
            let v = qkv.slice(s![2 * dm..]).to_owned();
            let mut attn = Array1::<f32>::zeros(dm);
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let qh = q.slice(s![r.clone()]);
                for (j, c) in prefix.iter().enumerate() {
                    scores[j] = qh.dot(&c.keys[l].slice(s![r.clone()])) * scale;
                }
                scores[prefix.len()] = qh.dot(&k.slice(s![r.clone()])) * scale;
                let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    total += *sc;
                }
                let mut out = attn.slice_mut(s![r.clone()]);
                for (j, c) in prefix.iter().enumerate() {
                    out.scaled_add(scores[j] / total, &c.values[l].slice(s![r.clone()]));
                }
                out.scaled_add(scores[prefix.len()] / total, &v.slice(s![r.clone()]));
            }
            let attn = layer.out_w.dot(&attn) + &layer.out_b;
            let y = layer_norm((&x + &attn).view(), &layer.n1_g, &layer.n1_b);
            let mut ff = layer.l1_w.dot(&y) + &layer.l1_b;
            relu_inplace(&mut ff);
            let ff = layer.l2_w.dot(&ff) + &layer.l2_b;
            x = layer_norm((&y + &ff).view(), &layer.n2_g, &layer.n2_b);
            keys.push(k);
            values.push(v);
        }
        (x, CachedStep { parent: state.cache.clone(), keys, values })
    }

    /// Root state from a first observation (reward token of 0.0 entering
    /// the episode).
    pub fn state_from_tokens(&self, obs: Vec<u16>, reward: u16) -> Result<NeuralState, ModelError> {
        self.check_tokens(&obs, reward, None)?;
        Ok(NeuralState { cache: None, len: 0, pending_obs: obs, pending_reward: reward })
    }

    /// Incremental logits for the next step after taking `action` in
    /// `state`, teacher-forced on `next_obs`. Matches the corresponding row
    /// of [`NeuralModel::forward`].
    pub fn step_logits(
        &self,
        state: &NeuralState,
        action: u16,
        next_obs: &[u16],
    ) -> Result<Array2<f32>, ModelError> {
        if state.len >= self.episode_length {
            return Err(ModelError::ContextOverflow(self.episode_length));
        }
        let (e, _) = self.encode_step(state, action);
        let d = self.obs_dims();
        let mut out = Array2::zeros((d + 1, self.n()));
        out.slice_mut(s![..d, ..]).assign(&self.obs_logits_forced(e.view(), next_obs));
        out.row_mut(d).assign(&self.reward_logits(e.view()));
        Ok(out)
    }

    fn draw(&self, logits: ArrayView1<f32>, valid: usize, rng: &mut (impl Rng + ?Sized)) -> u16 {
        if self.temperature <= 0.0 {
            let mut best = 0;
            for i in 1..valid {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            return best as u16;
        }
        let probs = softmax_masked(logits, valid, self.temperature);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as u16;
            }
        }
        (valid - 1) as u16
    }

    fn sample_from(&self, e: ArrayView1<f32>, terminal: bool, rng: &mut (impl Rng + ?Sized)) -> NeuralOutcome {
        let d = self.obs_dims();
        let reward = self.draw(self.reward_logits(e).view(), self.encoding.vocab_size(d), rng);
        let m = self.obs_hidden(e);
        let mut h = self.gru_init(&m);
        let mut obs = Vec::with_capacity(d);
        for dim in 0..d {
            if let (Some(g), Some(hh)) = (self.params.gru.as_ref(), h.as_ref()) {
                h = Some(self.gru_step(g, obs.last().copied(), hh));
            }
            let logits = self.obs_dim_logits(dim, &m, h.as_ref());
            obs.push(self.draw(logits.view(), self.encoding.vocab_size(dim), rng));
        }
        NeuralOutcome { obs, reward, terminal }
    }

    /// Decodes outcome tokens back into observation values and reward.
    pub fn decode_outcome(&self, outcome: &NeuralOutcome) -> Result<(Observation, f64), ModelError> {
        let d = self.obs_dims();
        let obs = outcome
            .obs
            .iter()
            .enumerate()
            .map(|(i, &t)| self.encoding.decode_value(i, t))
            .collect::<Result<Vec<_>, _>>()?;
        let reward = self.encoding.decode_value(d, outcome.reward)?;
        Ok((Observation(obs), reward as f64))
    }
}

impl DynamicsModel for NeuralModel {
    type State = NeuralState;
    type Outcome = NeuralOutcome;

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        state: &NeuralState,
        action: usize,
        rng: &mut R,
    ) -> Result<NeuralOutcome, ModelError> {
        Ok(self.sample_many(state, action, 1, rng)?.pop().unwrap())
    }

    fn sample_many<R: Rng + ?Sized>(
        &self,
        state: &NeuralState,
        action: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<NeuralOutcome>, ModelError> {
        if state.len >= self.episode_length {
            return Err(ModelError::ContextOverflow(self.episode_length));
        }
        if action >= self.num_actions {
            return Err(ModelError::Other(format!("action {action} out of range")));
        }
        let (e, _) = self.encode_step(state, action as u16);
        let terminal = state.len + 1 >= self.episode_length;
        Ok((0..k).map(|_| self.sample_from(e.view(), terminal, rng)).collect())
    }

    fn advance(
        &self,
        state: &NeuralState,
        action: usize,
        outcome: &NeuralOutcome,
    ) -> Result<NeuralState, ModelError> {
        if state.len >= self.episode_length {
            return Err(ModelError::ContextOverflow(self.episode_length));
        }
        self.check_tokens(&outcome.obs, outcome.reward, Some(action as u16))?;
        let (_, cached) = self.encode_step(state, action as u16);
        Ok(NeuralState {
            cache: Some(Arc::new(cached)),
            len: state.len + 1,
            pending_obs: outcome.obs.clone(),
            pending_reward: outcome.reward,
        })
    }

    fn reward(&self, outcome: &NeuralOutcome) -> f64 {
        self.encoding.decode_value(self.obs_dims(), outcome.reward).map_or(0.0, |v| v as f64)
    }

    fn is_terminal(&self, outcome: &NeuralOutcome) -> bool {
        outcome.terminal
    }
}

impl EnvModel for NeuralModel {
    fn initial_state(&self, observation: &Observation) -> Result<NeuralState, ModelError> {
        let (obs, reward) = self.encoding.encode_step(observation.as_slice(), 0.0)?;
        self.state_from_tokens(obs, reward)
    }

    fn outcome_from_step(&self, step: &StepOutcome) -> Result<NeuralOutcome, ModelError> {
        let (obs, reward) = self.encoding.encode_step(step.observation.as_slice(), step.reward as f32)?;
        Ok(NeuralOutcome { obs, reward, terminal: step.done })
    }
}

/// Mean per-dimension cross-entropy of next-step predictions, split by
/// whether the predicted step opens a new trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySplit {
    pub boundary: f64,
    pub within: f64,
    pub total: f64,
    pub boundary_steps: usize,
    pub within_steps: usize,
}

impl EntropySplit {
    /// Step-weighted combination of two splits.
    pub fn merge(&self, other: &EntropySplit) -> EntropySplit {
        let avg = |a: f64, na: usize, b: f64, nb: usize| {
            if na + nb == 0 {
                0.0
            } else {
                (a * na as f64 + b * nb as f64) / (na + nb) as f64
            }
        };
        let (n, m) = (self.boundary_steps + self.within_steps, other.boundary_steps + other.within_steps);
        EntropySplit {
            boundary: avg(self.boundary, self.boundary_steps, other.boundary, other.boundary_steps),
            within: avg(self.within, self.within_steps, other.within, other.within_steps),
            total: avg(self.total, n, other.total, m),
            boundary_steps: self.boundary_steps + other.boundary_steps,
            within_steps: self.within_steps + other.within_steps,
        }
    }
}

/// `logits` as returned by [`NeuralModel::forward`]; `targets[t]` holds the
/// true next observation tokens followed by the next reward token;
/// `boundary[t]` marks predictions whose target opens a new trial.
pub fn entropy_decomposition(
    logits: &Array3<f32>,
    targets: &[Vec<u16>],
    boundary: &[bool],
    encoding: &Encoding,
) -> EntropySplit {
    let dims = logits.shape()[1];
    let (mut b_sum, mut w_sum, mut b_n, mut w_n) = (0.0, 0.0, 0usize, 0usize);
    for (t, target) in targets.iter().enumerate() {
        let step: f64 = (0..dims)
            .map(|d| cross_entropy(logits.slice(s![t, d, ..]), encoding.vocab_size(d), target[d] as usize))
            .sum::<f64>()
            / dims as f64;
        if boundary[t] {
            b_sum += step;
            b_n += 1;
        } else {
            w_sum += step;
            w_n += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    EntropySplit {
        boundary: mean(b_sum, b_n),
        within: mean(w_sum, w_n),
        total: mean(b_sum + w_sum, b_n + w_n),
        boundary_steps: b_n,
        within_steps: w_n,
    }
}

#[allow(dead_code)]
fn _assert_send_sync() {
    fn check<T: Send + Sync>() {}
    check::<NeuralModel>();
    check::<NeuralState>();
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Architecture, Encoding) {
        let arch = Architecture {
            model_dim: 16,
            num_heads: 4,
            num_layers: 2,
            ff_dim: 12,
            head_dim: 10,
            gru_hidden: 6,
            gru_head: true,
            final_linear: true,
        };
        let enc = Encoding::new(vec![
            vec![0.0, 1.0],
            vec![-1.0, 0.0, 1.0],
            vec![0.0, 1.0, 2.0],
            vec![-3.0, 0.0, 15.0],
        ]);
        (arch, enc)
    }

    fn model(arch: Architecture, enc: Encoding, seed: u64) -> NeuralModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = arch.init_weights(enc.obs_dims(), enc.num_categories(), 4, &mut rng);
        NeuralModel::new(&w, arch, enc, 4, 12).unwrap()
    }

    fn random_steps(rng: &mut ChaCha8Rng, enc: &Encoding, len: usize) -> (Vec<StepTokens>, Vec<Vec<u16>>) {
        let obs = |rng: &mut ChaCha8Rng| -> Vec<u16> {
            (0..enc.obs_dims()).map(|d| rng.gen_range(0..enc.vocab_size(d)) as u16).collect()
        };
        let mut all_obs: Vec<Vec<u16>> = (0..=len).map(|_| obs(rng)).collect();
        let steps = (0..len)
            .map(|t| StepTokens {
                obs: all_obs[t].clone(),
                reward: rng.gen_range(0..enc.vocab_size(enc.obs_dims())) as u16,
                action: rng.gen_range(0..4),
            })
            .collect();
        all_obs.remove(0);
        (steps, all_obs)
    }

    #[test]
    fn output_shape() {
        let (arch, enc) = tiny();
        let m = model(arch, enc.clone(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (steps, next) = random_steps(&mut rng, &enc, 7);
        let out = m.forward(&steps, &next).unwrap();
        assert_eq!(out.logits.shape(), &[7, enc.obs_dims() + 1, enc.num_categories()]);
    }

    #[test]
    fn causal_perturbation() {
        let (arch, enc) = tiny();
        let m = model(arch, enc.clone(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (steps, next) = random_steps(&mut rng, &enc, 10);
        let base = m.forward(&steps, &next).unwrap();
        let mut perturbed = steps.clone();
        perturbed[8].action = (perturbed[8].action + 1) % 4;
        perturbed[8].obs[0] ^= 1;
        let mut next_p = next.clone();
        next_p[8][1] = (next_p[8][1] + 1) % 3;
        let out = m.forward(&perturbed, &next_p).unwrap();
        for t in 0..8 {
            assert_eq!(base.logits.slice(s![t, .., ..]), out.logits.slice(s![t, .., ..]));
        }
        assert_ne!(base.logits.slice(s![8, .., ..]), out.logits.slice(s![8, .., ..]));
    }

    #[test]
    fn target_dim_does_not_leak_into_its_own_logits() {
        let (arch, enc) = tiny();
        let m = model(arch, enc.clone(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (steps, next) = random_steps(&mut rng, &enc, 4);
        let base = m.forward(&steps, &next).unwrap();
        let last = enc.obs_dims() - 1;
        let mut changed = next.clone();
        changed[2][last] = (changed[2][last] + 1) % enc.vocab_size(last) as u16;
        let out = m.forward(&steps, &changed).unwrap();
        assert_eq!(base.logits, out.logits);
        // but dim 0 does condition dim 1
        let mut changed = next.clone();
        changed[2][0] ^= 1;
        let out = m.forward(&steps, &changed).unwrap();
        assert_eq!(base.logits.slice(s![2, 0, ..]), out.logits.slice(s![2, 0, ..]));
        assert_ne!(base.logits.slice(s![2, 1, ..]), out.logits.slice(s![2, 1, ..]));
    }

    #[test]
    fn incremental_matches_full_forward() {
        for (gru, lin) in [(true, true), (false, true), (true, false)] {
            let (mut arch, enc) = tiny();
            arch.gru_head = gru;
            arch.final_linear = lin;
            let m = model(arch, enc.clone(), 6);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let (steps, next) = random_steps(&mut rng, &enc, 9);
            let full = m.forward(&steps, &next).unwrap();
            let mut state = m.state_from_tokens(steps[0].obs.clone(), steps[0].reward).unwrap();
            for t in 0..steps.len() {
                let inc = m.step_logits(&state, steps[t].action, &next[t]).unwrap();
                let diff = (&inc - &full.logits.slice(s![t, .., ..])).mapv(f32::abs);
                assert!(diff.iter().all(|&x| x < 1e-5), "step {t}: {diff:?}");
                if t + 1 < steps.len() {
                    let outcome = NeuralOutcome {
                        obs: steps[t + 1].obs.clone(),
                        reward: steps[t + 1].reward,
                        terminal: false,
                    };
                    state = m.advance(&state, steps[t].action as usize, &outcome).unwrap();
                }
            }
        }
    }

    #[test]
    fn argmax_sampling_is_deterministic_and_in_vocab() {
        let (arch, enc) = tiny();
        let mut m = model(arch, enc.clone(), 8);
        m.temperature = 0.0;
        let state = m.state_from_tokens(vec![1, 2, 0], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = m.sample(&state, 2, &mut rng).unwrap();
        for _ in 0..10 {
            assert_eq!(m.sample(&state, 2, &mut rng).unwrap(), first);
        }
        m.temperature = 1.0;
        for _ in 0..200 {
            let o = m.sample(&state, 1, &mut rng).unwrap();
            for (d, &t) in o.obs.iter().enumerate() {
                assert!((t as usize) < enc.vocab_size(d));
            }
            m.decode_outcome(&o).unwrap();
        }
    }

    #[test]
    fn context_overflow() {
        let (arch, enc) = tiny();
        let m = model(arch, enc.clone(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (steps, next) = random_steps(&mut rng, &enc, 13);
        assert!(matches!(m.forward(&steps, &next), Err(ModelError::ContextOverflow(12))));
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let (arch, enc) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = arch.init_weights(enc.obs_dims(), enc.num_categories(), 4, &mut rng);
        w.insert("obs_mlp.0.bias", Tensor::zeros(vec![3]));
        assert!(matches!(
            NeuralModel::new(&w, arch, enc, 4, 12),
            Err(ModelError::Weights(super::super::WeightsError::WrongShape { .. }))
        ));
    }

    #[test]
    fn uniform_logits_give_log_n_entropy() {
        let enc = Encoding::new(vec![vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0]]);
        let logits = Array3::zeros((4, 2, 3));
        let targets = vec![vec![0, 1], vec![2, 2], vec![1, 0], vec![0, 0]];
        let split = entropy_decomposition(&logits, &targets, &[true, false, false, true], &enc);
        assert!((split.boundary - 3f64.ln()).abs() < 1e-12);
        assert!((split.within - 3f64.ln()).abs() < 1e-12);
        let weighted = (split.boundary * 2.0 + split.within * 2.0) / 4.0;
        assert!((weighted - split.total).abs() < 1e-12);
    }
}

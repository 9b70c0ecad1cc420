//! Autoregressive generation under KV-cache eviction.
//!
//! Each trajectory records, per sampled token, the log-probability it was
//! sampled with and the exact visibility state of every cache key (the
//! shadow mask). Replaying the mask through the batched forward reproduces
//! those log-probabilities, which is what makes the learner's importance
//! ratios identically one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvcache::{
    enforce_budget, score_heavy_hitters, AttentionWindow, CacheError, EvictionPolicy, KVCache,
    ScoreGrid, ShadowMask,
};
use crate::model::{incremental_step, ModelError, Parameters, Token};
use crate::numcore::kernels;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("prompt {prompt} + max_new {max_new} exceeds max_seq_len {max}")]
    TooLong { prompt: usize, max_new: usize, max: usize },
    #[error("rollout config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Responses per prompt; group normalization needs at least 2.
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub policy: EvictionPolicy,
    /// Retained fraction of keys; budget = ceil(retain_frac * keys present
    /// at the post-prefill enforcement).
    pub retain_frac: f64,
    pub stop_token: Option<Token>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            k: 4,
            temperature: 1.0,
            max_new_tokens: 4,
            policy: EvictionPolicy::HeavyHitter { window: 8 },
            retain_frac: 0.5,
            stop_token: None,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.k < 2 {
            return Err(RolloutError::BadConfig(format!("k = {} < 2", self.k)));
        }
        if !(self.temperature > 0.0) {
            return Err(RolloutError::BadConfig(format!("temperature {} <= 0", self.temperature)));
        }
        if !(self.retain_frac > 0.0 && self.retain_frac <= 1.0) {
            return Err(RolloutError::BadConfig(format!(
                "retain_frac {} outside (0, 1]",
                self.retain_frac
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(RolloutError::BadConfig("max_new_tokens = 0".into()));
        }
        Ok(())
    }

    pub fn evicts(&self) -> bool {
        !matches!(self.policy, EvictionPolicy::None) && self.retain_frac < 1.0
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub generated: Vec<Token>,
    /// Log-probability each token was sampled with (temperature applied).
    pub behavior_logprob: Vec<f64>,
    pub mask: ShadowMask,
    pub reward: f64,
    pub rng_seed: u64,
}

impl Trajectory {
    pub fn full_tokens(&self) -> Vec<Token> {
        self.prompt.iter().chain(&self.generated).copied().collect()
    }
}

/// Samples from softmax(logits / temperature); returns the token and the
/// log-probability of that token under the same tempered distribution.
pub fn sample_token(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> (Token, f64) {
    debug_assert!(temperature > 0.0);
    let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
    let mut logprobs = vec![0.0; scaled.len()];
    kernels::log_softmax_row(&scaled, &mut logprobs);
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    let mut token = logits.len() - 1;
    for (i, lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            token = i;
            break;
        }
    }
    (token as Token, logprobs[token])
}

/// Highest-logit token with its tempered log-probability; ties keep the
/// lowest index.
pub fn argmax_token(logits: &[f64], temperature: f64) -> (Token, f64) {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
    let mut logprobs = vec![0.0; scaled.len()];
    kernels::log_softmax_row(&scaled, &mut logprobs);
    (best as Token, logprobs[best])
}

/// Generates one trajectory under the configured eviction policy,
/// recording evictions into the shadow mask as they happen. The reward
/// field is left at 0 for the caller's task to fill in.
pub fn generate_sparse(
    params: &Parameters,
    prompt: &[Token],
    config: &RolloutConfig,
    traj_seed: u64,
) -> Result<Trajectory, RolloutError> {
    generate_impl(params, prompt, config, traj_seed, false)
}

/// Argmax decoding under the same eviction machinery; behavior_logprob
/// still records the tempered log-probability of each chosen token.
pub fn generate_greedy(
    params: &Parameters,
    prompt: &[Token],
    config: &RolloutConfig,
) -> Result<Trajectory, RolloutError> {
    generate_impl(params, prompt, config, 0, true)
}

fn generate_impl(
    params: &Parameters,
    prompt: &[Token],
    config: &RolloutConfig,
    traj_seed: u64,
    greedy: bool,
) -> Result<Trajectory, RolloutError> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(RolloutError::EmptyPrompt);
    }
    let cfg = &params.config;
    if prompt.len() + config.max_new_tokens > cfg.max_seq_len {
        return Err(RolloutError::TooLong {
            prompt: prompt.len(),
            max_new: config.max_new_tokens,
            max: cfg.max_seq_len,
        });
    }
    let prompt_len = prompt.len();
    let (n_layers, n_heads) = (cfg.n_layers, cfg.n_heads);
    let mut cache = KVCache::new(n_layers, n_heads, cfg.d_head());
    let mut mask = ShadowMask::new(n_layers, n_heads, prompt_len);
    let mut sample_rng = stream_rng(traj_seed, Stream::RolloutSample, 0, 0);

    let hh_window = match config.policy {
        EvictionPolicy::HeavyHitter { window } => Some(window),
        _ => None,
    };
    let mut windows: Vec<Vec<AttentionWindow>> = (0..n_layers)
        .map(|_| (0..n_heads).map(|_| AttentionWindow::new(hh_window.unwrap_or(1))).collect())
        .collect();

    let observe = |windows: &mut Vec<Vec<AttentionWindow>>, attention: Vec<Vec<Vec<f64>>>| {
        if hh_window.is_some() {
            for (l, layer_rows) in attention.into_iter().enumerate() {
                for (h, row) in layer_rows.into_iter().enumerate() {
                    windows[l][h].push(row);
                }
            }
        }
    };

    // dense prefill: prompt queries are never masked
    let mut last_logits = Vec::new();
    for (pos, &tok) in prompt.iter().enumerate() {
        let out = incremental_step(params, &mut cache, tok, pos)?;
        observe(&mut windows, out.attention);
        last_logits = out.logits;
    }
    mask.grow_to(prompt_len);

    let scores_for = |cache: &KVCache, windows: &[Vec<AttentionWindow>], n_keys: usize| -> Option<ScoreGrid> {
        hh_window.map(|_| {
            (0..cache.n_layers)
                .map(|l| {
                    (0..cache.n_heads)
                        .map(|h| score_heavy_hitters(n_keys, windows[l][h].rows()))
                        .collect()
                })
                .collect()
        })
    };

    // one-shot prompt compression: the budget is fixed here and re-applied
    // for the rest of the generation
    if config.evicts() {
        let budget = (config.retain_frac * prompt_len as f64).ceil() as usize;
        cache.budget = budget.max(1);
        let grid = scores_for(&cache, &windows, prompt_len);
        let evicted = enforce_budget(&mut cache, &config.policy, grid.as_ref(), prompt_len)?;
        for l in 0..n_layers {
            for h in 0..n_heads {
                mask.record_eviction(l, h, &evicted[l][h], prompt_len)?;
            }
        }
    }

    let mut generated = Vec::with_capacity(config.max_new_tokens);
    let mut behavior_logprob = Vec::with_capacity(config.max_new_tokens);
    for t in 0..config.max_new_tokens {
        let (tok, lp) = if greedy {
            argmax_token(&last_logits, config.temperature)
        } else {
            sample_token(&last_logits, config.temperature, &mut sample_rng)
        };
        generated.push(tok);
        behavior_logprob.push(lp);
        if Some(tok) == config.stop_token || t + 1 == config.max_new_tokens {
            break;
        }
        let pos = prompt_len + t;
        let out = incremental_step(params, &mut cache, tok, pos)?;
        observe(&mut windows, out.attention);
        mask.grow_to(pos + 1);
        if config.evicts() {
            let grid = scores_for(&cache, &windows, pos + 1);
            let evicted = enforce_budget(&mut cache, &config.policy, grid.as_ref(), pos + 1)?;
            for l in 0..n_layers {
                for h in 0..n_heads {
                    mask.record_eviction(l, h, &evicted[l][h], pos + 1)?;
                }
            }
        }
        last_logits = out.logits;
    }
    mask.grow_to(prompt_len + generated.len());

    Ok(Trajectory {
        prompt: prompt.to_vec(),
        generated,
        behavior_logprob,
        mask,
        reward: 0.0,
        rng_seed: traj_seed,
    })
}

/// The uncompressed baseline: same sampling, no eviction, all-visible mask.
pub fn generate_dense(
    params: &Parameters,
    prompt: &[Token],
    config: &RolloutConfig,
    traj_seed: u64,
) -> Result<Trajectory, RolloutError> {
    let dense = RolloutConfig { policy: EvictionPolicy::None, retain_frac: 1.0, ..config.clone() };
    generate_sparse(params, prompt, &dense, traj_seed)
}

/// Per-token log-probabilities of the generated suffix, recomputed from
/// batched logits [T, vocab] over prompt + generated tokens.
pub fn recompute_logprobs(
    logits: &[f64],
    vocab: usize,
    prompt_len: usize,
    generated: &[Token],
    temperature: f64,
) -> Vec<f64> {
    let rows = prompt_len + generated.len();
    debug_assert_eq!(logits.len(), rows * vocab);
    let gen_rows = &logits[(prompt_len - 1) * vocab..(rows - 1) * vocab];
    crate::model::token_logprobs(gen_rows, vocab, generated, temperature)
}

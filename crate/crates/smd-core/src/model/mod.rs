//! Tiny pre-norm decoder-only transformer in three interchangeable forms:
//! a batched graph forward (dense-causal or shadow-masked), and an
//! incremental KV-cached step. All three share one parameter set and the
//! same kernels, so recomputing a cached generation under its recorded mask
//! reproduces the rollout's logits.

mod graph;
mod incremental;
mod params;

pub use graph::{
    forward_dense, forward_graph, forward_shadow, grads_by_name, register_params, token_logprobs,
    MaskSpec, ParamVars,
};
pub use incremental::{incremental_step, StepOutput};
pub use params::{load_checkpoint, save_checkpoint, LayerParams, Parameters, CHECKPOINT_MAGIC};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::NumError;

pub type Token = u16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: Token, vocab: usize },
    #[error("sequence length {len} exceeds max {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("mask shape {got} does not cover the model/sequence ({want})")]
    MaskMismatch { got: String, want: String },
    #[error("cache has {got_layers} layers / {got_heads} heads, model expects {want_layers}/{want_heads}")]
    CacheMismatch { got_layers: usize, got_heads: usize, want_layers: usize, want_heads: usize },
    #[error("query {query} has no visible keys")]
    DegenerateVisibility { query: usize },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    /// Reuse the token embedding as the output projection.
    pub tied_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            max_seq_len: 256,
            tied_output: false,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size < 2 {
            return Err(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.max_seq_len == 0 {
            return Err("n_layers and max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[Token]) -> Result<(), ModelError> {
        if tokens.len() > self.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: tokens.len(), max: self.max_seq_len });
        }
        for &t in tokens {
            if (t as usize) >= self.vocab_size {
                return Err(ModelError::TokenOutOfRange { id: t, vocab: self.vocab_size });
            }
        }
        Ok(())
    }
}

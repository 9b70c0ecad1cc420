//! Synthetic programmatically-rewarded tasks.
//!
//! NeedleRetrieval states the queried key in the first two prompt tokens,
//! so any policy blind to the prompt start cannot beat chance; the key/value
//! table itself is fixed per task seed, which keeps the instance family
//! small enough for a desk-scale model to master from reward alone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Token;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("prompt budget {budget} too small for task structure ({need} tokens)")]
    PromptTooSmall { budget: usize, need: usize },
    #[error("task needs vocab >= {need}, model has {vocab}")]
    VocabTooSmall { need: usize, vocab: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskVariant {
    NeedleRetrieval,
    Copy,
    ParityCount,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub variant: TaskVariant,
    /// Inclusive prompt length range; lengths are sampled per instance.
    pub prompt_len: (usize, usize),
    pub answer_len: usize,
    /// Payload tokens are 1..=payload_vocab; markers sit above them.
    pub payload_vocab: usize,
    /// Key/value pairs in a needle prompt.
    pub n_pairs: usize,
    /// Fixes the key/value table across instances.
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            variant: TaskVariant::NeedleRetrieval,
            prompt_len: (24, 24),
            answer_len: 2,
            payload_vocab: 8,
            n_pairs: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: Vec<Token>,
    pub oracle: Vec<Token>,
}

const FILL: Token = 0;

impl TaskSpec {
    fn payload(&self, i: usize) -> Token {
        1 + (i % self.payload_vocab) as Token
    }

    fn key_token(&self, pair: usize) -> Token {
        (1 + self.payload_vocab + pair) as Token
    }

    fn query_mark(&self) -> Token {
        (1 + self.payload_vocab + self.n_pairs) as Token
    }

    fn pair_mark(&self) -> Token {
        self.query_mark() + 1
    }

    fn answer_mark(&self) -> Token {
        self.query_mark() + 2
    }

    /// Highest token id the task emits; must be < vocab_size.
    pub fn max_token(&self) -> Token {
        self.answer_mark()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), TaskError> {
        let need = self.max_token() as usize + 1;
        if need > vocab_size {
            return Err(TaskError::VocabTooSmall { need, vocab: vocab_size });
        }
        let skeleton = self.skeleton_len();
        if self.prompt_len.0 < skeleton {
            return Err(TaskError::PromptTooSmall { budget: self.prompt_len.0, need: skeleton });
        }
        Ok(())
    }

    fn skeleton_len(&self) -> usize {
        match self.variant {
            TaskVariant::NeedleRetrieval => 2 + self.n_pairs * (2 + self.answer_len) + 1,
            TaskVariant::Copy => 1 + self.answer_len + 1,
            TaskVariant::ParityCount => 2,
        }
    }

    /// Per-seed key/value table for needle prompts; instances only vary in
    /// which key is queried, so the prompt start is the sole discriminator.
    fn pair_values(&self) -> Vec<Vec<Token>> {
        let mut rng = stream_rng(self.seed, Stream::Task, u64::MAX, 0);
        (0..self.n_pairs)
            .map(|_| {
                (0..self.answer_len)
                    .map(|_| self.payload(rng.gen_range(0..self.payload_vocab)))
                    .collect()
            })
            .collect()
    }
}

/// Builds one task instance. The pair table is spec-seeded; `rng` drives
/// only the per-instance choices (queried key, span content, lengths).
pub fn make_instance(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> TaskInstance {
    let target_len = if spec.prompt_len.0 == spec.prompt_len.1 {
        spec.prompt_len.0
    } else {
        rng.gen_range(spec.prompt_len.0..=spec.prompt_len.1)
    };
    match spec.variant {
        TaskVariant::NeedleRetrieval => {
            let values = spec.pair_values();
            let q = rng.gen_range(0..spec.n_pairs);
            let mut prompt = vec![spec.query_mark(), spec.key_token(q)];
            let fill = target_len - spec.skeleton_len();
            let front = fill / 2;
            prompt.extend(std::iter::repeat(FILL).take(front));
            for (i, vals) in values.iter().enumerate() {
                prompt.push(spec.pair_mark());
                prompt.push(spec.key_token(i));
                prompt.extend_from_slice(vals);
            }
            prompt.extend(std::iter::repeat(FILL).take(fill - front));
            prompt.push(spec.answer_mark());
            TaskInstance { prompt, oracle: values[q].clone() }
        }
        TaskVariant::Copy => {
            let span: Vec<Token> =
                (0..spec.answer_len).map(|_| spec.payload(rng.gen_range(0..spec.payload_vocab))).collect();
            let fill = target_len - spec.skeleton_len();
            let mut prompt = vec![spec.pair_mark()];
            prompt.extend_from_slice(&span);
            prompt.extend(std::iter::repeat(FILL).take(fill));
            prompt.push(spec.answer_mark());
            TaskInstance { prompt, oracle: span }
        }
        TaskVariant::ParityCount => {
            let body_len = target_len - 2;
            let body: Vec<Token> =
                (0..body_len).map(|_| spec.payload(rng.gen_range(0..spec.payload_vocab))).collect();
            let count = body.iter().filter(|&&t| t == spec.payload(0)).count();
            let oracle = vec![spec.payload(count % 2)];
            let mut prompt = vec![spec.query_mark()];
            prompt.extend_from_slice(&body);
            prompt.push(spec.answer_mark());
            TaskInstance { prompt, oracle }
        }
    }
}

/// Exact match scores 1; otherwise the longest-common-prefix fraction of
/// the oracle answer. Pure in (instance, generated).
pub fn reward(instance: &TaskInstance, generated: &[Token]) -> f64 {
    let oracle = &instance.oracle;
    if oracle.is_empty() {
        return 1.0;
    }
    let lcp = oracle
        .iter()
        .zip(generated)
        .take_while(|(a, b)| a == b)
        .count();
    lcp as f64 / oracle.len() as f64
}

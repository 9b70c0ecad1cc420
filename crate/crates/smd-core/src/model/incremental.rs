//! Single-token decoding against a KV cache.
//!
//! Uses the same kernels as the batched graph with row count 1, and the
//! same visible-set softmax over the cache's retained flags, so a full
//! generation replayed batch-style under the recorded mask reproduces these
//! logits. Evicted entries stay in the buffers with weight exactly 0; their
//! value rows are still added (as zero terms) in the same ascending order
//! the batched matmul uses.

use super::{ModelError, Parameters, Token};
use crate::kvcache::KVCache;
use crate::numcore::kernels;

pub struct StepOutput {
    /// Next-token logits, length vocab.
    pub logits: Vec<f64>,
    /// Attention row per [layer][head], indexed by absolute key position
    /// 0..=position. Evicted keys hold exactly 0.
    pub attention: Vec<Vec<Vec<f64>>>,
}

/// Runs one decoding step: appends the token's K/V at `position` (always
/// retained), attends over the retained cache, and returns the logits for
/// the next position.
pub fn incremental_step(
    params: &Parameters,
    cache: &mut KVCache,
    token: Token,
    position: usize,
) -> Result<StepOutput, ModelError> {
    let cfg = &params.config;
    cfg.check_tokens(&[token])?;
    if position >= cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: position + 1, max: cfg.max_seq_len });
    }
    if cache.n_layers != cfg.n_layers || cache.n_heads != cfg.n_heads {
        return Err(ModelError::CacheMismatch {
            got_layers: cache.n_layers,
            got_heads: cache.n_heads,
            want_layers: cfg.n_layers,
            want_heads: cfg.n_heads,
        });
    }
    let (d, dh, n_heads) = (cfg.d_model, cfg.d_head(), cfg.n_heads);
    let scale = (dh as f64).sqrt();
    let id = token as usize;

    let mut x = vec![0.0; d];
    for j in 0..d {
        x[j] = params.tok_emb[id * d + j] + params.pos_emb[position * d + j];
    }

    let mut attention = Vec::with_capacity(cfg.n_layers);
    let mut h = vec![0.0; d];
    for (layer_idx, lp) in params.layers.iter().enumerate() {
        kernels::rmsnorm_row(&x, &lp.attn_norm, &mut h);
        let q = kernels::matmul(&h, 1, d, &lp.wq, d);
        let k = kernels::matmul(&h, 1, d, &lp.wk, d);
        let v = kernels::matmul(&h, 1, d, &lp.wv, d);

        let mut head_rows = Vec::with_capacity(n_heads);
        let mut attn_cat = vec![0.0; d];
        for head in 0..n_heads {
            cache.push(
                layer_idx,
                head,
                k[head * dh..(head + 1) * dh].to_vec(),
                v[head * dh..(head + 1) * dh].to_vec(),
                position,
            );
            let entries = &cache.heads[layer_idx][head].entries;
            let qh = &q[head * dh..(head + 1) * dh];
            let mut scores = Vec::with_capacity(entries.len());
            let mut visible = Vec::with_capacity(entries.len());
            for e in entries {
                scores.push(kernels::dot(qh, &e.key) / scale);
                visible.push(e.retained);
            }
            let mut weights = vec![0.0; scores.len()];
            if !kernels::softmax_row_masked(&scores, &visible, &mut weights) {
                return Err(ModelError::DegenerateVisibility { query: position });
            }
            // weighted value sum in ascending entry order, zero terms kept,
            // mirroring the batched probs @ V row
            let out = &mut attn_cat[head * dh..(head + 1) * dh];
            for (w, e) in weights.iter().zip(entries) {
                for c in 0..dh {
                    out[c] += w * e.value[c];
                }
            }
            let mut row = vec![0.0; position + 1];
            for (w, e) in weights.iter().zip(entries) {
                row[e.position] = *w;
            }
            head_rows.push(row);
        }
        attention.push(head_rows);

        let proj = kernels::matmul(&attn_cat, 1, d, &lp.wo, d);
        for j in 0..d {
            x[j] += proj[j];
        }

        kernels::rmsnorm_row(&x, &lp.mlp_norm, &mut h);
        let mut m1 = kernels::matmul(&h, 1, d, &lp.w1, 4 * d);
        for vj in m1.iter_mut() {
            *vj = kernels::gelu(*vj);
        }
        let m2 = kernels::matmul(&m1, 1, 4 * d, &lp.w2, d);
        for j in 0..d {
            x[j] += m2[j];
        }
    }

    kernels::rmsnorm_row(&x, &params.final_norm, &mut h);
    let logits = match &params.out_proj {
        Some(op) => kernels::matmul(&h, 1, d, op, cfg.vocab_size),
        None => kernels::matmul_nt(&h, 1, d, &params.tok_emb, cfg.vocab_size),
    };
    Ok(StepOutput { logits, attention })
}

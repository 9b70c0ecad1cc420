//! Batched forward pass on the autodiff tape.
//!
//! One code path serves both the trainable forward (parameters registered
//! as gradient leaves) and the plain batched inference (parameters as
//! constants): `forward_dense` and `forward_shadow` just run the graph on a
//! throwaway tape. The shadow mask enters as the softmax visibility set, so
//! hidden keys get post-softmax weights of exactly zero.

use super::{ModelConfig, ModelError, Parameters, Token};
use crate::kvcache::ShadowMask;
use crate::numcore::tape::{NumError, Tape, Tensor, Var};

pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w1: Var,
    pub w2: Var,
}

pub struct ParamVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub out_proj: Option<Var>,
}

/// Puts every parameter array on the tape, as gradient leaves when
/// `trainable`, otherwise as constants.
pub fn register_params(tape: &mut Tape, params: &Parameters, trainable: bool) -> ParamVars {
    let cfg = &params.config;
    let (v, d, s) = (cfg.vocab_size, cfg.d_model, cfg.max_seq_len);
    let mut leaf = |shape: Vec<usize>, data: &[f64]| {
        let mut t = Tensor::new(shape, data.to_vec());
        t.requires_grad = trainable;
        tape.leaf(t)
    };
    let tok_emb = leaf(vec![v, d], &params.tok_emb);
    let pos_emb = leaf(vec![s, d], &params.pos_emb);
    let layers = params
        .layers
        .iter()
        .map(|l| LayerVars {
            attn_norm: leaf(vec![d], &l.attn_norm),
            wq: leaf(vec![d, d], &l.wq),
            wk: leaf(vec![d, d], &l.wk),
            wv: leaf(vec![d, d], &l.wv),
            wo: leaf(vec![d, d], &l.wo),
            mlp_norm: leaf(vec![d], &l.mlp_norm),
            w1: leaf(vec![d, 4 * d], &l.w1),
            w2: leaf(vec![4 * d, d], &l.w2),
        })
        .collect();
    let final_norm = leaf(vec![d], &params.final_norm);
    let out_proj = params.out_proj.as_ref().map(|p| leaf(vec![d, v], p));
    ParamVars { tok_emb, pos_emb, layers, final_norm, out_proj }
}

/// Gradients of every parameter array after `backward`, in canonical order.
/// Arrays untouched by the loss come back as zeros.
pub fn grads_by_name(tape: &Tape, pv: &ParamVars, params: &Parameters) -> Vec<(String, Vec<f64>)> {
    let pull = |v: Var, len: usize| -> Vec<f64> {
        tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    };
    let mut out = vec![
        ("tok_emb".to_string(), pull(pv.tok_emb, params.tok_emb.len())),
        ("pos_emb".to_string(), pull(pv.pos_emb, params.pos_emb.len())),
    ];
    for (l, (lv, lp)) in pv.layers.iter().zip(&params.layers).enumerate() {
        out.push((format!("layer{l}.attn_norm"), pull(lv.attn_norm, lp.attn_norm.len())));
        out.push((format!("layer{l}.wq"), pull(lv.wq, lp.wq.len())));
        out.push((format!("layer{l}.wk"), pull(lv.wk, lp.wk.len())));
        out.push((format!("layer{l}.wv"), pull(lv.wv, lp.wv.len())));
        out.push((format!("layer{l}.wo"), pull(lv.wo, lp.wo.len())));
        out.push((format!("layer{l}.mlp_norm"), pull(lv.mlp_norm, lp.mlp_norm.len())));
        out.push((format!("layer{l}.w1"), pull(lv.w1, lp.w1.len())));
        out.push((format!("layer{l}.w2"), pull(lv.w2, lp.w2.len())));
    }
    out.push(("final_norm".to_string(), pull(pv.final_norm, params.final_norm.len())));
    if let Some(op) = pv.out_proj {
        out.push((
            "out_proj".to_string(),
            pull(op, params.out_proj.as_ref().expect("untied output").len()),
        ));
    }
    out
}

#[derive(Clone, Copy)]
pub enum MaskSpec<'a> {
    /// Plain causal attention (the dense pass).
    Causal,
    /// Causal attention further restricted by recorded evictions.
    Shadow(&'a ShadowMask),
}

impl MaskSpec<'_> {
    fn grid(&self, layer: usize, head: usize, t: usize) -> Vec<bool> {
        match self {
            MaskSpec::Causal => {
                let mut g = vec![false; t * t];
                for q in 0..t {
                    for j in 0..=q {
                        g[q * t + j] = true;
                    }
                }
                g
            }
            MaskSpec::Shadow(mask) => mask.visibility_grid(layer, head, t),
        }
    }

    fn check(&self, cfg: &ModelConfig, t: usize) -> Result<(), ModelError> {
        if let MaskSpec::Shadow(mask) = self {
            if mask.n_layers != cfg.n_layers || mask.n_heads != cfg.n_heads || mask.seq_len() < t {
                return Err(ModelError::MaskMismatch {
                    got: format!("{}L/{}H/len {}", mask.n_layers, mask.n_heads, mask.seq_len()),
                    want: format!("{}L/{}H/len >= {t}", cfg.n_layers, cfg.n_heads),
                });
            }
        }
        Ok(())
    }
}

/// Per-position next-token logits [T, vocab] as a tape node.
pub fn forward_graph(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    tokens: &[Token],
    mask: MaskSpec,
) -> Result<Var, ModelError> {
    cfg.check_tokens(tokens)?;
    mask.check(cfg, tokens.len())?;
    let t = tokens.len();
    let (dh, n_heads) = (cfg.d_head(), cfg.n_heads);
    let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let positions: Vec<usize> = (0..t).collect();

    let tok = tape.embed(pv.tok_emb, &ids)?;
    let pos = tape.embed(pv.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;

    for (layer_idx, lv) in pv.layers.iter().enumerate() {
        let h = tape.rmsnorm(x, lv.attn_norm)?;
        let q = tape.matmul(h, lv.wq)?;
        let k = tape.matmul(h, lv.wk)?;
        let v = tape.matmul(h, lv.wv)?;
        let mut head_outs = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.div_const(scores, (dh as f64).sqrt());
            let visible = mask.grid(layer_idx, head, t);
            let probs = tape.softmax_masked_last(scaled, &visible).map_err(|e| match e {
                NumError::DegenerateRow { row } => ModelError::DegenerateVisibility { query: row },
                other => ModelError::Num(other),
            })?;
            head_outs.push(tape.matmul(probs, vh)?);
        }
        let attn = tape.concat_cols(&head_outs)?;
        let proj = tape.matmul(attn, lv.wo)?;
        x = tape.add(x, proj)?;

        let h2 = tape.rmsnorm(x, lv.mlp_norm)?;
        let m1 = tape.matmul(h2, lv.w1)?;
        let act = tape.gelu(m1);
        let m2 = tape.matmul(act, lv.w2)?;
        x = tape.add(x, m2)?;
    }

    let hf = tape.rmsnorm(x, pv.final_norm)?;
    let logits = match pv.out_proj {
        Some(op) => tape.matmul(hf, op)?,
        None => tape.matmul_nt(hf, pv.tok_emb)?,
    };
    Ok(logits)
}

fn forward_plain(
    params: &Parameters,
    tokens: &[Token],
    mask: MaskSpec,
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params, false);
    let logits = forward_graph(&mut tape, &pv, &params.config, tokens, mask)?;
    Ok(tape.data(logits).to_vec())
}

/// Standard causal logits [T * vocab], no gradients retained.
pub fn forward_dense(params: &Parameters, tokens: &[Token]) -> Result<Vec<f64>, ModelError> {
    forward_plain(params, tokens, MaskSpec::Causal)
}

/// Logits [T * vocab] with attention restricted to the mask's visible sets.
pub fn forward_shadow(
    params: &Parameters,
    tokens: &[Token],
    mask: &ShadowMask,
) -> Result<Vec<f64>, ModelError> {
    forward_plain(params, tokens, MaskSpec::Shadow(mask))
}

/// Log-probabilities of `chosen` tokens under rows of `logits` [rows, vocab],
/// with the same temperature scaling the sampler applies.
pub fn token_logprobs(
    logits: &[f64],
    vocab: usize,
    chosen: &[Token],
    temperature: f64,
) -> Vec<f64> {
    let rows = logits.len() / vocab;
    assert_eq!(rows, chosen.len(), "one chosen token per row");
    let mut scaled = vec![0.0; vocab];
    let mut lp = vec![0.0; vocab];
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        for j in 0..vocab {
            scaled[j] = logits[r * vocab + j] / temperature;
        }
        crate::numcore::kernels::log_softmax_row(&scaled, &mut lp);
        out.push(lp[chosen[r] as usize]);
    }
    out
}

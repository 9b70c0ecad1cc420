//! Trajectory-batch optimization. Group-normalized advantages feed a
//! token-level clipped surrogate whose log-probabilities are recomputed
//! under each trajectory's shadow mask, plus a full-vocabulary KL penalty
//! against a frozen reference and a dense-teacher distillation term with
//! the teacher stop-gradiented. The baselines swap the masked recompute
//! for a dense one (naive), weight tokens by clipped dense/behavior
//! ratios (ir), or drop the most deviated trajectories first (ir-reject).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    forward_dense, forward_graph, forward_shadow, grads_by_name, register_params, MaskSpec,
    ModelConfig, ModelError, Parameters, Token,
};
use crate::numcore::{adam_step, kernels, AdamState, NumError, Tape, Var};
use crate::rollout::Trajectory;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("group needs at least 2 trajectories, got {0}")]
    GroupTooSmall(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("trajectory has no generated tokens")]
    EmptyGeneration,
    #[error("trajectory prompt disagrees with the group prompt")]
    PromptMismatch,
    #[error("rejection fraction {0} outside [0, 1)")]
    BadFraction(f64),
    #[error("log-ratio diagnostics missing; attach_dense_ratios first")]
    MissingRatios,
    #[error("old logprobs cover {got} trajectories, batch has {want}")]
    OldLogprobMismatch { got: usize, want: usize },
    #[error("learner config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearnerMode {
    Smd,
    Naive,
    Ir,
    IrReject,
}

impl LearnerMode {
    pub fn name(self) -> &'static str {
        match self {
            LearnerMode::Smd => "smd",
            LearnerMode::Naive => "naive",
            LearnerMode::Ir => "ir",
            LearnerMode::IrReject => "ir-reject",
        }
    }

    pub fn parse(s: &str) -> Option<LearnerMode> {
        match s {
            "smd" => Some(LearnerMode::Smd),
            "naive" => Some(LearnerMode::Naive),
            "ir" => Some(LearnerMode::Ir),
            "ir-reject" | "ir_reject" => Some(LearnerMode::IrReject),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub distill_lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub mode: LearnerMode,
    pub ir_low: f64,
    pub ir_high: f64,
    pub rejection_fraction: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            clip_eps: 0.2,
            kl_beta: 0.01,
            distill_lambda: 0.1,
            lr: 3e-4,
            epochs: 1,
            mode: LearnerMode::Smd,
            ir_low: 0.8,
            ir_high: 1.2,
            rejection_fraction: 0.20,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(LearnerError::BadConfig(format!("clip_eps {} outside (0,1)", self.clip_eps)));
        }
        if self.distill_lambda < 0.0 {
            return Err(LearnerError::BadConfig(format!("lambda {} < 0", self.distill_lambda)));
        }
        if !(self.ir_low > 0.0 && self.ir_low <= self.ir_high) {
            return Err(LearnerError::BadConfig(format!(
                "ir bounds [{}, {}] malformed",
                self.ir_low, self.ir_high
            )));
        }
        if !(0.0..1.0).contains(&self.rejection_fraction) {
            return Err(LearnerError::BadFraction(self.rejection_fraction));
        }
        if self.epochs == 0 {
            return Err(LearnerError::BadConfig("epochs = 0".into()));
        }
        Ok(())
    }
}

/// One prompt's worth of sampled responses with normalized advantages.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub prompt: Vec<Token>,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    /// Sampling temperature the behavior logprobs were recorded under;
    /// every learner-side distribution is tempered identically.
    pub temperature: f64,
    /// Unclipped cumulative log(dense/behavior) per trajectory; empty
    /// until attach_dense_ratios fills it.
    pub log_rho: Vec<f64>,
}

impl GroupBatch {
    pub fn new(
        prompt: Vec<Token>,
        trajectories: Vec<Trajectory>,
        temperature: f64,
    ) -> Result<Self, LearnerError> {
        if trajectories.len() < 2 {
            return Err(LearnerError::GroupTooSmall(trajectories.len()));
        }
        for t in &trajectories {
            if t.generated.is_empty() {
                return Err(LearnerError::EmptyGeneration);
            }
            if t.prompt != prompt {
                return Err(LearnerError::PromptMismatch);
            }
        }
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        let advantages = compute_advantages(&rewards);
        Ok(GroupBatch { prompt, trajectories, advantages, temperature, log_rho: Vec::new() })
    }

    pub fn k(&self) -> usize {
        self.trajectories.len()
    }
}

/// (r - mean) / (population std + 1e-8), the group-relative advantage.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    assert!(rewards.len() >= 2, "advantage normalization needs a group");
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Clipped-surrogate part including the reference-KL penalty.
    pub pg: f64,
    /// Raw mean per-token KL to the reference (before the beta weight).
    pub ref_kl: f64,
    /// Mean summed teacher KL (before the lambda weight).
    pub distill: f64,
    pub total: f64,
    /// exp of the cumulative evaluation-vs-behavior log-ratio, one entry
    /// per trajectory, taken at epoch start.
    pub cumulative_ratio: Vec<f64>,
    pub ratio_variance: f64,
}

/// Adam states in canonical array order; one step call per update epoch
/// keeps every array's timestep in sync.
pub struct Optimizer {
    states: Vec<(String, AdamState)>,
}

impl Optimizer {
    pub fn new(params: &Parameters) -> Self {
        let states = params
            .named()
            .into_iter()
            .map(|(name, a)| (name, AdamState::new(a.len())))
            .collect();
        Optimizer { states }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &[(String, Vec<f64>)], lr: f64) {
        let named = params.named_mut();
        assert_eq!(named.len(), grads.len());
        assert_eq!(named.len(), self.states.len());
        for (((pname, array), (gname, grad)), (sname, state)) in
            named.into_iter().zip(grads).zip(self.states.iter_mut())
        {
            assert_eq!(&pname, gname);
            assert_eq!(&pname, sname);
            adam_step(array, grad, state, lr);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EvalPath {
    Shadow,
    Dense,
}

fn eval_logits(
    params: &Parameters,
    tokens: &[Token],
    path: EvalPath,
    traj: &Trajectory,
) -> Result<Vec<f64>, ModelError> {
    match path {
        EvalPath::Shadow => forward_shadow(params, tokens, &traj.mask),
        EvalPath::Dense => forward_dense(params, tokens),
    }
}

/// Tempered log-softmax of the generation rows (the rows that scored each
/// generated token), flattened [n_gen * vocab].
fn gen_row_logprobs(
    logits: &[f64],
    vocab: usize,
    prompt_len: usize,
    n_gen: usize,
    temperature: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; n_gen * vocab];
    let mut scaled = vec![0.0; vocab];
    for t in 0..n_gen {
        let row = &logits[(prompt_len - 1 + t) * vocab..][..vocab];
        for (s, &x) in scaled.iter_mut().zip(row) {
            *s = x / temperature;
        }
        kernels::log_softmax_row(&scaled, &mut out[t * vocab..][..vocab]);
    }
    out
}

/// Sum_v p(v) (log p(v) - log q(v)) over logprob vectors; zero-probability
/// entries contribute nothing.
pub fn kl_divergence(p_logprob: &[f64], q_logprob: &[f64]) -> f64 {
    p_logprob
        .iter()
        .zip(q_logprob)
        .map(|(&p, &q)| {
            let w = p.exp();
            if w == 0.0 {
                0.0
            } else {
                w * (p - q)
            }
        })
        .sum()
}

/// Per-token importance weights clip(exp(dense - behavior), [lo, hi]).
pub fn ir_token_weights(dense_lp: &[f64], behavior_lp: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    dense_lp
        .iter()
        .zip(behavior_lp)
        .map(|(d, b)| (d - b).exp().clamp(lo, hi))
        .collect()
}

struct Teacher {
    pd: Vec<f64>,
    ld: Vec<f64>,
}

struct TrajData {
    old_lp: Vec<f64>,
    coeffs: Vec<f64>,
    ref_rows: Option<Vec<f64>>,
    teacher: Option<Teacher>,
    cum_log_ratio: f64,
}

fn prepare(
    params: &Parameters,
    ref_params: Option<&Parameters>,
    batches: &[GroupBatch],
    config: &LearnerConfig,
    path: EvalPath,
    ir_weights: bool,
) -> Result<Vec<Vec<TrajData>>, LearnerError> {
    let vocab = params.config.vocab_size;
    batches
        .iter()
        .map(|batch| {
            batch
                .trajectories
                .iter()
                .enumerate()
                .map(|(k, traj)| {
                    let tokens = traj.full_tokens();
                    let (p, n) = (traj.prompt.len(), traj.generated.len());
                    let logits = eval_logits(params, &tokens, path, traj)?;
                    let rows = gen_row_logprobs(&logits, vocab, p, n, batch.temperature);
                    let old_lp: Vec<f64> = traj
                        .generated
                        .iter()
                        .enumerate()
                        .map(|(t, &g)| rows[t * vocab + g as usize])
                        .collect();
                    let cum_log_ratio: f64 = old_lp
                        .iter()
                        .zip(&traj.behavior_logprob)
                        .map(|(o, b)| o - b)
                        .sum();
                    let adv = batch.advantages[k];
                    let coeffs: Vec<f64> = if ir_weights {
                        ir_token_weights(
                            &old_lp,
                            &traj.behavior_logprob,
                            config.ir_low,
                            config.ir_high,
                        )
                        .into_iter()
                        .map(|w| adv * w)
                        .collect()
                    } else {
                        vec![adv; n]
                    };
                    let ref_rows = ref_params
                        .map(|rp| -> Result<Vec<f64>, LearnerError> {
                            let rl = eval_logits(rp, &tokens, path, traj)?;
                            Ok(gen_row_logprobs(&rl, vocab, p, n, batch.temperature))
                        })
                        .transpose()?;
                    Ok(TrajData { old_lp, coeffs, ref_rows, teacher: None, cum_log_ratio })
                })
                .collect()
        })
        .collect()
}

/// Dense teacher distributions under the current parameters; rerun before
/// every epoch so the teacher tracks the live policy.
fn refresh_teacher(
    params: &Parameters,
    batches: &[GroupBatch],
    data: &mut [Vec<TrajData>],
) -> Result<(), LearnerError> {
    let vocab = params.config.vocab_size;
    for (batch, slot) in batches.iter().zip(data.iter_mut()) {
        for (traj, td) in batch.trajectories.iter().zip(slot.iter_mut()) {
            let logits = forward_dense(params, &traj.full_tokens())?;
            let ld = gen_row_logprobs(
                &logits,
                vocab,
                traj.prompt.len(),
                traj.generated.len(),
                batch.temperature,
            );
            let pd = ld.iter().map(|x| x.exp()).collect();
            td.teacher = Some(Teacher { pd, ld });
        }
    }
    Ok(())
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var, NumError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.mul_const(acc, 1.0 / vars.len() as f64))
}

struct LossParts {
    total: Var,
    pg: Var,
    ref_kl: Option<Var>,
    distill: Option<Var>,
}

fn build_total(
    tape: &mut Tape,
    pv: &crate::model::ParamVars,
    cfg: &ModelConfig,
    batches: &[GroupBatch],
    data: &[Vec<TrajData>],
    path: EvalPath,
    clip_eps: f64,
    kl_beta: f64,
    lambda: f64,
) -> Result<LossParts, LearnerError> {
    let vocab = cfg.vocab_size;
    let mut surrs = Vec::new();
    let mut kls = Vec::new();
    let mut dists = Vec::new();
    for (batch, slot) in batches.iter().zip(data) {
        for (traj, td) in batch.trajectories.iter().zip(slot) {
            let tokens = traj.full_tokens();
            let (p, n) = (traj.prompt.len(), traj.generated.len());
            let mask_spec = match path {
                EvalPath::Shadow => MaskSpec::Shadow(&traj.mask),
                EvalPath::Dense => MaskSpec::Causal,
            };
            let logits = forward_graph(tape, pv, cfg, &tokens, mask_spec)?;
            let gen = tape.slice_rows(logits, p - 1, n)?;
            let scaled = tape.div_const(gen, batch.temperature);
            let lp_all = tape.log_softmax_last(scaled);
            let idx: Vec<usize> = traj.generated.iter().map(|&t| t as usize).collect();
            let lp = tape.pick_per_row(lp_all, &idx)?;

            let old = tape.constant(vec![n], td.old_lp.clone());
            let diff = tape.sub(lp, old)?;
            let ratio = tape.exp(diff);
            let c = tape.constant(vec![n], td.coeffs.clone());
            let unclipped = tape.mul(ratio, c)?;
            let bounded = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
            let clipped = tape.mul(bounded, c)?;
            let per_token = tape.min_elem(unclipped, clipped)?;
            surrs.push(tape.mean_all(per_token));

            if let Some(ref_rows) = &td.ref_rows {
                let probs = tape.exp(lp_all);
                let rc = tape.constant(vec![n, vocab], ref_rows.clone());
                let gap = tape.sub(lp_all, rc)?;
                let prod = tape.mul(probs, gap)?;
                let s = tape.sum_all(prod);
                kls.push(tape.div_const(s, n as f64));
            }
            if let Some(teacher) = &td.teacher {
                let pd = tape.constant(vec![n, vocab], teacher.pd.clone());
                let ld = tape.constant(vec![n, vocab], teacher.ld.clone());
                let gap = tape.sub(ld, lp_all)?;
                let prod = tape.mul(pd, gap)?;
                dists.push(tape.sum_all(prod));
            }
        }
    }
    let surr = mean_of(tape, &surrs)?;
    let ref_kl = if kls.is_empty() { None } else { Some(mean_of(tape, &kls)?) };
    let distill = if dists.is_empty() { None } else { Some(mean_of(tape, &dists)?) };

    let mut pg = tape.neg(surr);
    if let Some(kl) = ref_kl {
        let weighted = tape.mul_const(kl, kl_beta);
        pg = tape.add(pg, weighted)?;
    }
    let total = match distill {
        Some(d) => {
            let weighted = tape.mul_const(d, lambda);
            tape.add(pg, weighted)?
        }
        None => pg,
    };
    Ok(LossParts { total, pg, ref_kl, distill })
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

fn run_update(
    params: &mut Parameters,
    ref_params: Option<&Parameters>,
    opt: &mut Optimizer,
    batches: &[GroupBatch],
    config: &LearnerConfig,
    path: EvalPath,
    ir_weights: bool,
    lambda: f64,
) -> Result<LossBreakdown, LearnerError> {
    config.validate()?;
    if batches.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    let mut data = prepare(params, ref_params, batches, config, path, ir_weights)?;
    let cumulative_ratio: Vec<f64> =
        data.iter().flatten().map(|td| td.cum_log_ratio.exp()).collect();
    let ratio_variance = population_variance(&cumulative_ratio);

    let mut out = None;
    for _ in 0..config.epochs {
        if lambda > 0.0 {
            refresh_teacher(params, batches, &mut data)?;
        }
        let mut tape = Tape::new();
        let pv = register_params(&mut tape, params, true);
        let parts = build_total(
            &mut tape,
            &pv,
            &params.config,
            batches,
            &data,
            path,
            config.clip_eps,
            config.kl_beta,
            lambda,
        )?;
        tape.backward(parts.total)?;
        let grads = grads_by_name(&tape, &pv, params);
        out = Some(LossBreakdown {
            pg: tape.data(parts.pg)[0],
            ref_kl: parts.ref_kl.map(|k| tape.data(k)[0]).unwrap_or(0.0),
            distill: parts.distill.map(|d| tape.data(d)[0]).unwrap_or(0.0),
            total: tape.data(parts.total)[0],
            cumulative_ratio: cumulative_ratio.clone(),
            ratio_variance,
        });
        opt.step(params, &grads, config.lr);
    }
    Ok(out.expect("epochs >= 1"))
}

/// Shadow-masked GRPO plus the dense-teacher distillation track.
pub fn smd_update(
    params: &mut Parameters,
    ref_params: &Parameters,
    opt: &mut Optimizer,
    batches: &[GroupBatch],
    config: &LearnerConfig,
) -> Result<LossBreakdown, LearnerError> {
    run_update(
        params,
        Some(ref_params),
        opt,
        batches,
        config,
        EvalPath::Shadow,
        false,
        config.distill_lambda,
    )
}

/// Dense recomputation over sparse-generated trajectories: the biased
/// estimator that ignores what the policy actually saw.
pub fn naive_update(
    params: &mut Parameters,
    ref_params: &Parameters,
    opt: &mut Optimizer,
    batches: &[GroupBatch],
    config: &LearnerConfig,
) -> Result<LossBreakdown, LearnerError> {
    run_update(params, Some(ref_params), opt, batches, config, EvalPath::Dense, false, 0.0)
}

/// Dense recomputation corrected by clipped per-token importance weights;
/// no reference penalty.
pub fn ir_update(
    params: &mut Parameters,
    opt: &mut Optimizer,
    batches: &[GroupBatch],
    config: &LearnerConfig,
) -> Result<LossBreakdown, LearnerError> {
    run_update(params, None, opt, batches, config, EvalPath::Dense, true, 0.0)
}

/// Policy loss evaluation (no optimizer step) with caller-supplied old
/// logprobs, one Vec per trajectory in batch-major order.
pub fn shadow_policy_loss(
    params: &Parameters,
    ref_params: &Parameters,
    old_logprobs: &[Vec<f64>],
    batches: &[GroupBatch],
    config: &LearnerConfig,
) -> Result<LossBreakdown, LearnerError> {
    config.validate()?;
    if batches.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    let total: usize = batches.iter().map(|b| b.k()).sum();
    if old_logprobs.len() != total {
        return Err(LearnerError::OldLogprobMismatch { got: old_logprobs.len(), want: total });
    }
    let mut data = prepare(params, Some(ref_params), batches, config, EvalPath::Shadow, false)?;
    let mut i = 0;
    for (batch, slot) in batches.iter().zip(data.iter_mut()) {
        for (traj, td) in batch.trajectories.iter().zip(slot.iter_mut()) {
            td.old_lp = old_logprobs[i].clone();
            td.cum_log_ratio = td
                .old_lp
                .iter()
                .zip(&traj.behavior_logprob)
                .map(|(o, b)| o - b)
                .sum();
            i += 1;
        }
    }
    let cumulative_ratio: Vec<f64> =
        data.iter().flatten().map(|td| td.cum_log_ratio.exp()).collect();
    let ratio_variance = population_variance(&cumulative_ratio);

    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params, false);
    let parts = build_total(
        &mut tape,
        &pv,
        &params.config,
        batches,
        &data,
        EvalPath::Shadow,
        config.clip_eps,
        config.kl_beta,
        0.0,
    )?;
    Ok(LossBreakdown {
        pg: tape.data(parts.pg)[0],
        ref_kl: parts.ref_kl.map(|k| tape.data(k)[0]).unwrap_or(0.0),
        distill: 0.0,
        total: tape.data(parts.total)[0],
        cumulative_ratio,
        ratio_variance,
    })
}

/// Loss and parameter gradients at fixed old logprobs and, when lambda is
/// positive, a fixed teacher; no optimizer step. Holding both fixed makes
/// the result a plain function of `params`, the property finite-difference
/// checks need. `teacher_rows` are tempered dense logprob rows over the
/// generation slice, one flat [n * vocab] block per trajectory in
/// batch-major order.
pub fn shadow_policy_grads(
    params: &Parameters,
    ref_params: &Parameters,
    old_logprobs: &[Vec<f64>],
    teacher_rows: Option<&[Vec<f64>]>,
    batches: &[GroupBatch],
    config: &LearnerConfig,
) -> Result<(LossBreakdown, Vec<(String, Vec<f64>)>), LearnerError> {
    config.validate()?;
    if batches.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    let total: usize = batches.iter().map(|b| b.k()).sum();
    if old_logprobs.len() != total {
        return Err(LearnerError::OldLogprobMismatch { got: old_logprobs.len(), want: total });
    }
    let lambda = config.distill_lambda;
    if lambda > 0.0 && teacher_rows.is_none() {
        return Err(LearnerError::BadConfig("lambda > 0 needs teacher rows".into()));
    }
    if let Some(rows) = teacher_rows {
        if rows.len() != total {
            return Err(LearnerError::OldLogprobMismatch { got: rows.len(), want: total });
        }
    }
    let mut data = prepare(params, Some(ref_params), batches, config, EvalPath::Shadow, false)?;
    let mut i = 0;
    for (batch, slot) in batches.iter().zip(data.iter_mut()) {
        for (traj, td) in batch.trajectories.iter().zip(slot.iter_mut()) {
            td.old_lp = old_logprobs[i].clone();
            td.cum_log_ratio = td
                .old_lp
                .iter()
                .zip(&traj.behavior_logprob)
                .map(|(o, b)| o - b)
                .sum();
            if let Some(rows) = teacher_rows {
                let ld = rows[i].clone();
                let pd = ld.iter().map(|x| x.exp()).collect();
                td.teacher = Some(Teacher { pd, ld });
            }
            i += 1;
        }
    }
    let cumulative_ratio: Vec<f64> =
        data.iter().flatten().map(|td| td.cum_log_ratio.exp()).collect();
    let ratio_variance = population_variance(&cumulative_ratio);

    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params, true);
    let parts = build_total(
        &mut tape,
        &pv,
        &params.config,
        batches,
        &data,
        EvalPath::Shadow,
        config.clip_eps,
        config.kl_beta,
        lambda,
    )?;
    tape.backward(parts.total)?;
    let grads = grads_by_name(&tape, &pv, params);
    let breakdown = LossBreakdown {
        pg: tape.data(parts.pg)[0],
        ref_kl: parts.ref_kl.map(|k| tape.data(k)[0]).unwrap_or(0.0),
        distill: parts.distill.map(|d| tape.data(d)[0]).unwrap_or(0.0),
        total: tape.data(parts.total)[0],
        cumulative_ratio,
        ratio_variance,
    };
    Ok((breakdown, grads))
}

/// Mean over trajectories of the summed per-step teacher KL, both passes
/// evaluated outside any tape.
pub fn distill_loss(params: &Parameters, batch: &GroupBatch) -> Result<f64, LearnerError> {
    let vocab = params.config.vocab_size;
    let mut acc = 0.0;
    for traj in &batch.trajectories {
        let tokens = traj.full_tokens();
        let (p, n) = (traj.prompt.len(), traj.generated.len());
        let dense = forward_dense(params, &tokens)?;
        let ld = gen_row_logprobs(&dense, vocab, p, n, batch.temperature);
        let shadow = forward_shadow(params, &tokens, &traj.mask)?;
        let ls = gen_row_logprobs(&shadow, vocab, p, n, batch.temperature);
        for t in 0..n {
            acc += kl_divergence(&ld[t * vocab..][..vocab], &ls[t * vocab..][..vocab]);
        }
    }
    Ok(acc / batch.trajectories.len() as f64)
}

/// Fills batch.log_rho with unclipped cumulative dense-vs-behavior
/// log-ratios, the deviation metric rejection ranks by.
pub fn attach_dense_ratios(
    params: &Parameters,
    batch: &mut GroupBatch,
) -> Result<(), LearnerError> {
    let vocab = params.config.vocab_size;
    batch.log_rho = batch
        .trajectories
        .iter()
        .map(|traj| -> Result<f64, LearnerError> {
            let logits = forward_dense(params, &traj.full_tokens())?;
            let lps = crate::rollout::recompute_logprobs(
                &logits,
                vocab,
                traj.prompt.len(),
                &traj.generated,
                batch.temperature,
            );
            Ok(lps.iter().zip(&traj.behavior_logprob).map(|(d, b)| d - b).sum())
        })
        .collect::<Result<_, _>>()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RejectionOutcome {
    pub kept: usize,
    pub dropped: usize,
    /// Drops the group-size floor prevented; nonzero means the quota was
    /// not met and the caller should log it.
    pub shortfall: usize,
}

/// Drops the ceil(fraction * N) trajectories with the largest |log rho|
/// across the whole batch, never shrinking a group below 2; when a group
/// hits the floor the next most deviated trajectory elsewhere is dropped
/// instead. Survivor advantages are renormalized within each group.
pub fn rejection_filter(
    batches: &[GroupBatch],
    fraction: f64,
) -> Result<(Vec<GroupBatch>, RejectionOutcome), LearnerError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(LearnerError::BadFraction(fraction));
    }
    for b in batches {
        if b.log_rho.len() != b.k() {
            return Err(LearnerError::MissingRatios);
        }
    }
    let n: usize = batches.iter().map(|b| b.k()).sum();
    let target = (fraction * n as f64).ceil() as usize;

    let mut ranked: Vec<(usize, usize, f64)> = Vec::with_capacity(n);
    for (g, b) in batches.iter().enumerate() {
        for (k, &lr) in b.log_rho.iter().enumerate() {
            ranked.push((g, k, lr.abs()));
        }
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut drop_flags: Vec<Vec<bool>> = batches.iter().map(|b| vec![false; b.k()]).collect();
    let mut remaining: Vec<usize> = batches.iter().map(|b| b.k()).collect();
    let mut dropped = 0;
    for (g, k, _) in ranked {
        if dropped == target {
            break;
        }
        if remaining[g] <= 2 {
            continue;
        }
        drop_flags[g][k] = true;
        remaining[g] -= 1;
        dropped += 1;
    }

    let filtered = batches
        .iter()
        .zip(&drop_flags)
        .map(|(b, flags)| {
            let mut trajectories = Vec::new();
            let mut log_rho = Vec::new();
            for (k, traj) in b.trajectories.iter().enumerate() {
                if !flags[k] {
                    trajectories.push(traj.clone());
                    log_rho.push(b.log_rho[k]);
                }
            }
            let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
            let advantages = compute_advantages(&rewards);
            GroupBatch {
                prompt: b.prompt.clone(),
                trajectories,
                advantages,
                temperature: b.temperature,
                log_rho,
            }
        })
        .collect();
    Ok((filtered, RejectionOutcome { kept: n - dropped, dropped, shortfall: target - dropped }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::ShadowMask;
    use crate::model::Parameters;
    use crate::rollout::{generate_dense, generate_sparse, RolloutConfig};

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            max_seq_len: 64,
            tied_output: false,
        }
    }

    fn rollout_batch(params: &Parameters, dense: bool, seed: u64) -> GroupBatch {
        let prompt: Vec<Token> = (0..16).map(|i| (i * 3 % 24) as Token).collect();
        let rc = RolloutConfig { max_new_tokens: 6, ..Default::default() };
        let trajectories: Vec<Trajectory> = (0..4)
            .map(|i| {
                let mut t = if dense {
                    generate_dense(params, &prompt, &rc, seed * 100 + i)
                } else {
                    generate_sparse(params, &prompt, &rc, seed * 100 + i)
                }
                .unwrap();
                t.reward = i as f64;
                t
            })
            .collect();
        GroupBatch::new(prompt, trajectories, rc.temperature).unwrap()
    }

    #[test]
    fn advantages_center_and_scale() {
        assert_eq!(compute_advantages(&[1.0, 1.0, 1.0, 1.0]), vec![0.0; 4]);
        let a = compute_advantages(&[0.0, 2.0]);
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
        let b = compute_advantages(&[5.0, 7.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "shift invariance");
        }
        let c = compute_advantages(&[0.3, 0.9, 0.1, 0.5]);
        assert!(c.iter().sum::<f64>().abs() < 1e-9);
        let std = population_variance(&c).sqrt();
        assert!((std - 1.0).abs() < 1e-7);
    }

    #[test]
    fn group_batch_rejects_bad_shapes() {
        let cfg = small_config();
        let params = Parameters::init(&cfg, 1);
        let batch = rollout_batch(&params, true, 1);
        let one = vec![batch.trajectories[0].clone()];
        assert!(matches!(
            GroupBatch::new(batch.prompt.clone(), one, 1.0),
            Err(LearnerError::GroupTooSmall(1))
        ));
        let mut other = batch.trajectories.clone();
        other[1].prompt[0] ^= 1;
        assert!(matches!(
            GroupBatch::new(batch.prompt.clone(), other, 1.0),
            Err(LearnerError::PromptMismatch)
        ));
    }

    #[test]
    fn smd_epoch_start_ratios_are_one() {
        let cfg = small_config();
        let mut params = Parameters::init(&cfg, 2);
        let refp = params.clone();
        let mut opt = Optimizer::new(&params);
        let batch = rollout_batch(&params, false, 3);
        let lc = LearnerConfig::default();
        let out = smd_update(&mut params, &refp, &mut opt, &[batch], &lc).unwrap();
        for r in &out.cumulative_ratio {
            assert!((r - 1.0).abs() < 1e-9, "ratio {r}");
        }
        assert!(out.ratio_variance <= 1e-10);
    }

    #[test]
    fn naive_ratios_deviate_on_evicting_rollouts() {
        let cfg = small_config();
        let mut params = Parameters::init(&cfg, 2);
        let refp = params.clone();
        let mut opt = Optimizer::new(&params);
        let batch = rollout_batch(&params, false, 3);
        let lc = LearnerConfig { mode: LearnerMode::Naive, ..Default::default() };
        let out = naive_update(&mut params, &refp, &mut opt, &[batch], &lc).unwrap();
        assert!(
            out.cumulative_ratio.iter().any(|r| (r - 1.0).abs() > 1e-6),
            "dense recompute must disagree with sparse behavior: {:?}",
            out.cumulative_ratio
        );
    }

    #[test]
    fn total_decomposes_into_pg_plus_lambda_distill() {
        let cfg = small_config();
        let mut params = Parameters::init(&cfg, 4);
        let refp = params.clone();
        let mut opt = Optimizer::new(&params);
        let batch = rollout_batch(&params, false, 5);
        let lc = LearnerConfig { distill_lambda: 0.1, ..Default::default() };
        let out = smd_update(&mut params, &refp, &mut opt, &[batch], &lc).unwrap();
        assert!(out.distill > 0.0, "eviction must open a teacher gap");
        let recombined = out.pg + lc.distill_lambda * out.distill;
        assert!((out.total - recombined).abs() <= 1e-12);
    }

    #[test]
    fn reference_equal_to_policy_gives_zero_kl() {
        let cfg = small_config();
        let params = Parameters::init(&cfg, 6);
        let batch = rollout_batch(&params, false, 7);
        let lc = LearnerConfig::default();
        let old: Vec<Vec<f64>> = {
            let data =
                prepare(&params, None, std::slice::from_ref(&batch), &lc, EvalPath::Shadow, false)
                    .unwrap();
            data.into_iter().flatten().map(|td| td.old_lp).collect()
        };
        let out = shadow_policy_loss(&params, &params, &old, &[batch], &lc).unwrap();
        assert_eq!(out.ref_kl, 0.0);
        assert!(out.pg.abs() < 1e-12, "mean advantage is zero at ratio one: {}", out.pg);
    }

    #[test]
    fn clip_saturation_zeroes_the_policy_gradient() {
        let cfg = small_config();
        let params = Parameters::init(&cfg, 8);
        let prompt: Vec<Token> = (0..12).map(|i| (i % 20) as Token).collect();
        let rc = RolloutConfig { max_new_tokens: 4, ..Default::default() };
        let mut trajs: Vec<Trajectory> = (0..2)
            .map(|i| generate_sparse(&params, &prompt, &rc, 900 + i).unwrap())
            .collect();
        trajs[0].reward = 0.0;
        trajs[1].reward = 2.0;
        let batch = GroupBatch::new(prompt, trajs, 1.0).unwrap();
        let lc = LearnerConfig { kl_beta: 0.0, ..Default::default() };
        let mut data =
            prepare(&params, None, std::slice::from_ref(&batch), &lc, EvalPath::Shadow, false)
                .unwrap();
        // push every ratio outside the clip band on its advantage's side
        for (k, td) in data[0].iter_mut().enumerate() {
            let shift = if batch.advantages[k] > 0.0 { -(1.4f64.ln()) } else { 2.0f64.ln() };
            for o in &mut td.old_lp {
                *o += shift;
            }
        }
        let mut tape = Tape::new();
        let pv = register_params(&mut tape, &params, true);
        let parts = build_total(
            &mut tape,
            &pv,
            &params.config,
            std::slice::from_ref(&batch),
            &data,
            EvalPath::Shadow,
            lc.clip_eps,
            0.0,
            0.0,
        )
        .unwrap();
        let a = batch.advantages[1];
        let expect = -(1.2 * a + 0.8 * (-a)) / 2.0;
        assert!((tape.data(parts.pg)[0] - expect).abs() < 1e-12);
        tape.backward(parts.total).unwrap();
        for (name, g) in grads_by_name(&tape, &pv, &params) {
            assert!(g.iter().all(|&x| x == 0.0), "{name} leaked gradient through the clamp");
        }
    }

    #[test]
    fn distill_is_zero_without_eviction_and_positive_with() {
        let cfg = small_config();
        let params = Parameters::init(&cfg, 9);
        let dense = rollout_batch(&params, true, 11);
        assert_eq!(distill_loss(&params, &dense).unwrap(), 0.0);
        let sparse = rollout_batch(&params, false, 11);
        assert!(distill_loss(&params, &sparse).unwrap() > 0.0);
    }

    #[test]
    fn kl_closed_forms() {
        let half = 0.5f64.ln();
        let one_hot = [0.0, f64::NEG_INFINITY];
        assert!((kl_divergence(&one_hot, &[half, half]) - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(kl_divergence(&[half, half], &[half, half]), 0.0);
    }

    #[test]
    fn teacher_constants_match_detached_teacher_graph() {
        let cfg = small_config();
        let params = Parameters::init(&cfg, 10);
        let batch = rollout_batch(&params, false, 13);
        let traj = &batch.trajectories[0];
        let tokens = traj.full_tokens();
        let (p, n) = (traj.prompt.len(), traj.generated.len());
        let vocab = cfg.vocab_size;

        let grads_a = {
            let mut tape = Tape::new();
            let pv = register_params(&mut tape, &params, true);
            let dense = forward_dense(&params, &tokens).unwrap();
            let ld_rows = gen_row_logprobs(&dense, vocab, p, n, 1.0);
            let pd_rows: Vec<f64> = ld_rows.iter().map(|x| x.exp()).collect();
            let logits = forward_graph(&mut tape, &pv, &cfg, &tokens, MaskSpec::Shadow(&traj.mask))
                .unwrap();
            let gen = tape.slice_rows(logits, p - 1, n).unwrap();
            let ls = tape.log_softmax_last(gen);
            let pd = tape.constant(vec![n, vocab], pd_rows);
            let ld = tape.constant(vec![n, vocab], ld_rows);
            let gap = tape.sub(ld, ls).unwrap();
            let prod = tape.mul(pd, gap).unwrap();
            let loss = tape.sum_all(prod);
            tape.backward(loss).unwrap();
            grads_by_name(&tape, &pv, &params)
        };
        let grads_b = {
            let mut tape = Tape::new();
            let pv = register_params(&mut tape, &params, true);
            let dlogits =
                forward_graph(&mut tape, &pv, &cfg, &tokens, MaskSpec::Causal).unwrap();
            let dgen = tape.slice_rows(dlogits, p - 1, n).unwrap();
            let ld_live = tape.log_softmax_last(dgen);
            let ld = tape.detach(ld_live);
            let pd = tape.exp(ld);
            let slogits =
                forward_graph(&mut tape, &pv, &cfg, &tokens, MaskSpec::Shadow(&traj.mask))
                    .unwrap();
            let sgen = tape.slice_rows(slogits, p - 1, n).unwrap();
            let ls = tape.log_softmax_last(sgen);
            let gap = tape.sub(ld, ls).unwrap();
            let prod = tape.mul(pd, gap).unwrap();
            let loss = tape.sum_all(prod);
            tape.backward(loss).unwrap();
            grads_by_name(&tape, &pv, &params)
        };
        for ((na, ga), (nb, gb)) in grads_a.iter().zip(&grads_b) {
            assert_eq!(na, nb);
            assert_eq!(ga, gb, "{na}: detaching the live teacher must equal baked constants");
        }
    }

    #[test]
    fn gradient_through_detached_teacher_path_is_exactly_zero() {
        let cfg = small_config();
        let params = Parameters::init(&cfg, 12);
        let batch = rollout_batch(&params, false, 15);
        let traj = &batch.trajectories[0];
        let tokens = traj.full_tokens();
        let (p, n) = (traj.prompt.len(), traj.generated.len());

        let mut tape = Tape::new();
        let pv_teacher = register_params(&mut tape, &params, true);
        let pv_student = register_params(&mut tape, &params, false);
        let dlogits =
            forward_graph(&mut tape, &pv_teacher, &cfg, &tokens, MaskSpec::Causal).unwrap();
        let dgen = tape.slice_rows(dlogits, p - 1, n).unwrap();
        let ld_live = tape.log_softmax_last(dgen);
        let ld = tape.detach(ld_live);
        let pd = tape.exp(ld);
        let slogits =
            forward_graph(&mut tape, &pv_student, &cfg, &tokens, MaskSpec::Shadow(&traj.mask))
                .unwrap();
        let sgen = tape.slice_rows(slogits, p - 1, n).unwrap();
        let ls = tape.log_softmax_last(sgen);
        let gap = tape.sub(ld, ls).unwrap();
        let prod = tape.mul(pd, gap).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        for (name, g) in grads_by_name(&tape, &pv_teacher, &params) {
            assert!(g.iter().all(|&x| x == 0.0), "{name} received teacher-path gradient");
        }
    }

    #[test]
    fn update_paths_coincide_on_dense_data() {
        // all-visible masks make shadow == dense and every ir weight 1,
        // so with beta = lambda = 0 the three updates are the same map
        let cfg = small_config();
        let p0 = Parameters::init(&cfg, 14);
        let refp = p0.clone();
        let batch = rollout_batch(&p0, true, 17);
        let lc = LearnerConfig { kl_beta: 0.0, distill_lambda: 0.0, ..Default::default() };

        let mut pa = p0.clone();
        let mut oa = Optimizer::new(&pa);
        smd_update(&mut pa, &refp, &mut oa, std::slice::from_ref(&batch), &lc).unwrap();
        let mut pb = p0.clone();
        let mut ob = Optimizer::new(&pb);
        naive_update(&mut pb, &refp, &mut ob, std::slice::from_ref(&batch), &lc).unwrap();
        let mut pc = p0.clone();
        let mut oc = Optimizer::new(&pc);
        ir_update(&mut pc, &mut oc, std::slice::from_ref(&batch), &lc).unwrap();

        for ((na, a), ((nb, b), (nc, c))) in
            pa.named().into_iter().zip(pb.named().into_iter().zip(pc.named()))
        {
            assert_eq!(na, nb);
            assert_eq!(na, nc);
            assert_eq!(a, b, "{na}: naive departs from shadow on dense data");
            assert_eq!(a, c, "{na}: ir departs from shadow on dense data");
        }
    }

    #[test]
    fn ir_weights_stay_inside_bounds() {
        let dense = [0.0, -0.1, -3.0, 0.5];
        let behavior = [-0.4054651081, 0.0, -0.5, 0.5];
        let w = ir_token_weights(&dense, &behavior, 0.8, 1.2);
        assert!((w[0] - 1.2).abs() < 1e-12, "raw 1.5 clips to the ceiling");
        assert!((w[1] - 0.9048374180).abs() < 1e-9);
        assert_eq!(w[2], 0.8);
        assert_eq!(w[3], 1.0);
        assert!(w.iter().all(|&x| (0.8..=1.2).contains(&x)));
    }

    fn stub_trajectory(prompt: &[Token], reward: f64) -> Trajectory {
        Trajectory {
            prompt: prompt.to_vec(),
            generated: vec![1],
            behavior_logprob: vec![-0.5],
            mask: ShadowMask::new(1, 1, prompt.len()),
            reward,
            rng_seed: 0,
        }
    }

    fn stub_group(k: usize, log_rho: Vec<f64>) -> GroupBatch {
        let prompt: Vec<Token> = vec![0, 1];
        let trajs: Vec<Trajectory> =
            (0..k).map(|i| stub_trajectory(&prompt, i as f64)).collect();
        let mut b = GroupBatch::new(prompt, trajs, 1.0).unwrap();
        b.log_rho = log_rho;
        b
    }

    #[test]
    fn rejection_drops_most_deviated_and_renormalizes() {
        let batch = stub_group(10, vec![0.1, -0.9, 0.2, 0.05, -0.3, 0.7, -0.02, 0.4, -0.15, 0.25]);
        let (filtered, out) = rejection_filter(std::slice::from_ref(&batch), 0.2).unwrap();
        assert_eq!(out, RejectionOutcome { kept: 8, dropped: 2, shortfall: 0 });
        assert_eq!(filtered[0].k(), 8);
        // |-0.9| and |0.7| rank highest
        assert!(!filtered[0].log_rho.contains(&-0.9));
        assert!(!filtered[0].log_rho.contains(&0.7));
        assert!(filtered[0].advantages.iter().sum::<f64>().abs() < 1e-9);
        let std = population_variance(&filtered[0].advantages).sqrt();
        assert!((std - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rejection_fraction_zero_is_identity() {
        let batch = stub_group(4, vec![0.3, -0.2, 0.9, 0.0]);
        let (filtered, out) = rejection_filter(std::slice::from_ref(&batch), 0.0).unwrap();
        assert_eq!(out.dropped, 0);
        assert_eq!(filtered[0].k(), 4);
        assert_eq!(filtered[0].advantages, batch.advantages);
        assert_eq!(filtered[0].log_rho, batch.log_rho);
    }

    #[test]
    fn rejection_respects_group_floor_and_substitutes() {
        // every candidate in the deviated group is protected once it
        // reaches 2 members; the quota moves to the calm group
        let big = stub_group(2, vec![5.0, 4.0]);
        let calm = stub_group(4, vec![0.1, 0.2, 0.3, 0.4]);
        let (filtered, out) = rejection_filter(&[big, calm], 0.2).unwrap();
        assert_eq!(out.dropped, 2);
        assert_eq!(filtered[0].k(), 2, "floor group untouched");
        assert_eq!(filtered[1].k(), 2);
        assert_eq!(filtered[1].log_rho, vec![0.1, 0.2], "largest calm deviations went");

        // nothing anywhere can be dropped: quota goes unmet
        let a = stub_group(2, vec![1.0, 2.0]);
        let b = stub_group(2, vec![3.0, 4.0]);
        let (filtered, out) = rejection_filter(&[a, b], 0.2).unwrap();
        assert_eq!(out.dropped, 0);
        assert_eq!(out.shortfall, 1);
        assert_eq!(filtered[0].k() + filtered[1].k(), 4);
    }

    #[test]
    fn rejection_requires_ratios() {
        let prompt: Vec<Token> = vec![0, 1];
        let trajs = vec![stub_trajectory(&prompt, 0.0), stub_trajectory(&prompt, 1.0)];
        let batch = GroupBatch::new(prompt, trajs, 1.0).unwrap();
        assert!(matches!(
            rejection_filter(std::slice::from_ref(&batch), 0.2),
            Err(LearnerError::MissingRatios)
        ));
    }

    #[test]
    fn attach_dense_ratios_matches_naive_diagnostics() {
        let cfg = small_config();
        let mut params = Parameters::init(&cfg, 16);
        let refp = params.clone();
        let mut batch = rollout_batch(&params, false, 19);
        attach_dense_ratios(&params, &mut batch).unwrap();
        let expected: Vec<f64> = batch.log_rho.iter().map(|x| x.exp()).collect();
        let mut opt = Optimizer::new(&params);
        let lc = LearnerConfig { mode: LearnerMode::Naive, ..Default::default() };
        let out =
            naive_update(&mut params, &refp, &mut opt, std::slice::from_ref(&batch), &lc).unwrap();
        for (a, b) in out.cumulative_ratio.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in [LearnerMode::Smd, LearnerMode::Naive, LearnerMode::Ir, LearnerMode::IrReject] {
            assert_eq!(LearnerMode::parse(m.name()), Some(m));
        }
        assert_eq!(LearnerMode::parse("dense"), None);
    }
}

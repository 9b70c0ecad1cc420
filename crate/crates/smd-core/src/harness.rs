//! Experiment orchestration: layered config (file, then overrides), the
//! training loop with parallel rollouts, sweeps, the cache memory bench,
//! the variance lab driver, greedy evaluation, and trajectory dumps.
//!
//! Determinism contract: a (config, seed) pair fixes every instance, every
//! rollout seed, and the update order, so metrics files are byte-identical
//! across runs and across SMD_THREADS settings.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvcache::{
    entry_bytes, ledger_peak_ratio, mask_simulate, physical_slice, EvictionPolicy, KVCache,
    MemoryLedger, ShadowMaskRecord,
};
use crate::learner::{
    attach_dense_ratios, ir_update, naive_update, rejection_filter, smd_update, GroupBatch,
    LearnerConfig, LearnerError, LearnerMode, LossBreakdown, Optimizer,
};
use crate::model::{
    load_checkpoint, save_checkpoint, ModelConfig, ModelError, Parameters, Token,
};
use crate::rng::{stream_rng, Stream};
use crate::rollout::{
    generate_greedy, generate_sparse, RolloutConfig, RolloutError, Trajectory,
};
use crate::tasks::{make_instance, reward, TaskError, TaskInstance, TaskSpec, TaskVariant};
use crate::variance_lab::{
    fit_line, measure_policy_ratio_variance, simulate_grid, LabError, LineFit, RatioMode,
    RatioVariancePoint, SimRow, WeightDistribution,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}:{line}: {msg}")]
    Config { path: String, line: usize, msg: String },
    #[error("--set {arg}: {msg}")]
    Override { arg: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ── Run mode ──

/// Learner mode plus the dense control, which is SMD with eviction off
/// (the two coincide exactly when nothing is evicted).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Smd,
    Naive,
    Ir,
    IrReject,
    Dense,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "smd" => Ok(RunMode::Smd),
            "naive" => Ok(RunMode::Naive),
            "ir" => Ok(RunMode::Ir),
            "ir-reject" | "ir_reject" => Ok(RunMode::IrReject),
            "dense" => Ok(RunMode::Dense),
            other => Err(format!(
                "unknown mode {other:?} (want smd, naive, ir, ir-reject, or dense)"
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RunMode::Smd => "smd",
            RunMode::Naive => "naive",
            RunMode::Ir => "ir",
            RunMode::IrReject => "ir-reject",
            RunMode::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Values are compression fractions c; retain_frac becomes 1 - c.
    Compression,
    /// Values set the distillation weight.
    Lambda,
    /// Values name eviction policies.
    Strategy,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "compression" | "compression_ratio" | "compression-ratio" => Ok(SweepAxis::Compression),
            "lambda" => Ok(SweepAxis::Lambda),
            "strategy" => Ok(SweepAxis::Strategy),
            other => Err(format!(
                "unknown sweep axis {other:?} (want compression, lambda, or strategy)"
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Compression => "compression",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Strategy => "strategy",
        }
    }
}

#[derive(Debug, Clone)]
pub struct VarLabConfig {
    pub distribution: WeightDistribution,
    pub sigma_sq: f64,
    pub horizons: Vec<usize>,
    pub samples: usize,
    /// Generation lengths for the policy ratio probe.
    pub lengths: Vec<usize>,
    pub rollouts_per_length: usize,
}

impl Default for VarLabConfig {
    fn default() -> Self {
        VarLabConfig {
            distribution: WeightDistribution::TwoPoint,
            sigma_sq: 0.04,
            horizons: vec![10, 50, 100],
            samples: 200_000,
            lengths: vec![8, 16, 32],
            rollouts_per_length: 64,
        }
    }
}

// ── Experiment config ──

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub rollout: RolloutConfig,
    pub learner: LearnerConfig,
    pub run_mode: RunMode,
    pub steps: usize,
    pub prompts_per_step: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub eval_instances: usize,
    pub dump_count: usize,
    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<String>,
    pub varlab: VarLabConfig,
    /// Staged heavy-hitter window; folded into the policy at finalize so
    /// key order in the config file does not matter.
    pub hh_window: usize,
    task_seed_set: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // the stock experiment: three-way needle retrieval under 50%
        // retention, sized so the retrieval phase starts inside 300 steps
        ExperimentConfig {
            model: ModelConfig::default(),
            task: TaskSpec { n_pairs: 3, ..TaskSpec::default() },
            rollout: RolloutConfig { max_new_tokens: 2, ..RolloutConfig::default() },
            learner: LearnerConfig::default(),
            run_mode: RunMode::Smd,
            steps: 300,
            prompts_per_step: 15,
            seed: 0,
            out: PathBuf::from("runs/default"),
            eval_instances: 64,
            dump_count: 16,
            sweep_axis: SweepAxis::Lambda,
            sweep_values: vec!["0".into(), "0.1".into(), "10".into()],
            varlab: VarLabConfig::default(),
            hh_window: 4,
            task_seed_set: false,
        }
    }
}

fn p_usize(v: &str) -> Result<usize, String> {
    v.parse().map_err(|_| format!("expected a nonnegative integer, got {v:?}"))
}

fn p_u64(v: &str) -> Result<u64, String> {
    v.parse().map_err(|_| format!("expected a nonnegative integer, got {v:?}"))
}

fn p_f64(v: &str) -> Result<f64, String> {
    v.parse().map_err(|_| format!("expected a number, got {v:?}"))
}

fn p_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn p_token(v: &str) -> Result<Token, String> {
    v.parse().map_err(|_| format!("expected a token id, got {v:?}"))
}

fn p_usize_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|s| p_usize(s.trim())).collect()
}

fn p_policy(v: &str, hh_window: usize) -> Result<EvictionPolicy, String> {
    match v {
        "none" => Ok(EvictionPolicy::None),
        "recent" => Ok(EvictionPolicy::Recent),
        "random" => Ok(EvictionPolicy::Random { seed: 0 }),
        "heavy-hitter" | "heavy_hitter" | "hh" => {
            Ok(EvictionPolicy::HeavyHitter { window: hh_window })
        }
        other => Err(format!(
            "unknown policy {other:?} (want none, recent, random, or heavy-hitter)"
        )),
    }
}

fn p_distribution(v: &str) -> Result<WeightDistribution, String> {
    match v {
        "two-point" | "two_point" => Ok(WeightDistribution::TwoPoint),
        "lognormal" | "log-normal" => Ok(WeightDistribution::LogNormal),
        other => Err(format!("unknown distribution {other:?} (want two-point or lognormal)")),
    }
}

impl ExperimentConfig {
    /// Defaults, then the config file, then `--set` overrides, then the
    /// direct CLI flags; finalize resolves derived fields and validates.
    pub fn from_sources(
        path: Option<&Path>,
        sets: &[String],
        seed: Option<u64>,
        mode: Option<RunMode>,
        out: Option<PathBuf>,
    ) -> Result<Self, HarnessError> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = path {
            cfg.apply_file(p)?;
        }
        for s in sets {
            cfg.apply_set(s)?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(m) = mode {
            cfg.run_mode = m;
        }
        if let Some(o) = out {
            cfg.out = o;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), HarnessError> {
        let text = fs::read_to_string(path)?;
        let shown = path.display().to_string();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let n = i + 1;
            let fail = |msg: String| HarnessError::Config { path: shown.clone(), line: n, msg };
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| fail("unterminated section header".into()))?;
                section = Some(name.trim().to_ascii_lowercase());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected key = value, got {line:?}")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| fail("key before any [section] header".into()))?;
            self.set(sec, key.trim(), value.trim())
                .map_err(|msg| fail(msg))?;
        }
        Ok(())
    }

    /// One `section.key=value` override, the `--set` grammar.
    pub fn apply_set(&mut self, arg: &str) -> Result<(), HarnessError> {
        let fail = |msg: String| HarnessError::Override { arg: arg.to_string(), msg };
        let (path, value) = arg
            .split_once('=')
            .ok_or_else(|| fail("expected section.key=value".into()))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| fail("expected section.key=value".into()))?;
        self.set(&section.to_ascii_lowercase(), key.trim(), value.trim())
            .map_err(fail)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        match (section, key) {
            ("model", "vocab_size") => self.model.vocab_size = p_usize(value)?,
            ("model", "d_model") => self.model.d_model = p_usize(value)?,
            ("model", "n_heads") => self.model.n_heads = p_usize(value)?,
            ("model", "n_layers") => self.model.n_layers = p_usize(value)?,
            ("model", "max_seq_len") => self.model.max_seq_len = p_usize(value)?,
            ("model", "tied_output") => self.model.tied_output = p_bool(value)?,
            ("task", "variant") => {
                self.task.variant = match value {
                    "needle" | "needle-retrieval" => TaskVariant::NeedleRetrieval,
                    "copy" => TaskVariant::Copy,
                    "parity" | "parity-count" => TaskVariant::ParityCount,
                    other => {
                        return Err(format!(
                            "unknown variant {other:?} (want needle, copy, or parity)"
                        ))
                    }
                }
            }
            ("task", "prompt_min") => self.task.prompt_len.0 = p_usize(value)?,
            ("task", "prompt_max") => self.task.prompt_len.1 = p_usize(value)?,
            ("task", "answer_len") => self.task.answer_len = p_usize(value)?,
            ("task", "payload_vocab") => self.task.payload_vocab = p_usize(value)?,
            ("task", "n_pairs") => self.task.n_pairs = p_usize(value)?,
            ("task", "seed") => {
                self.task.seed = p_u64(value)?;
                self.task_seed_set = true;
            }
            ("rollout", "k") => self.rollout.k = p_usize(value)?,
            ("rollout", "temperature") => self.rollout.temperature = p_f64(value)?,
            ("rollout", "max_new_tokens") => self.rollout.max_new_tokens = p_usize(value)?,
            ("rollout", "policy") => self.rollout.policy = p_policy(value, self.hh_window)?,
            ("rollout", "hh_window") => self.hh_window = p_usize(value)?,
            ("rollout", "retain_frac") => self.rollout.retain_frac = p_f64(value)?,
            ("rollout", "stop_token") => {
                self.rollout.stop_token =
                    if value == "none" { None } else { Some(p_token(value)?) }
            }
            ("learner", "clip_eps") => self.learner.clip_eps = p_f64(value)?,
            ("learner", "kl_beta") => self.learner.kl_beta = p_f64(value)?,
            ("learner", "lambda") => self.learner.distill_lambda = p_f64(value)?,
            ("learner", "lr") => self.learner.lr = p_f64(value)?,
            ("learner", "epochs") => self.learner.epochs = p_usize(value)?,
            ("learner", "mode") => self.run_mode = RunMode::parse(value)?,
            ("learner", "ir_low") => self.learner.ir_low = p_f64(value)?,
            ("learner", "ir_high") => self.learner.ir_high = p_f64(value)?,
            ("learner", "rejection_fraction") => {
                self.learner.rejection_fraction = p_f64(value)?
            }
            ("train", "steps") => self.steps = p_usize(value)?,
            ("train", "prompts_per_step") => self.prompts_per_step = p_usize(value)?,
            ("train", "seed") => self.seed = p_u64(value)?,
            ("train", "out") => self.out = PathBuf::from(value),
            ("eval", "instances") => self.eval_instances = p_usize(value)?,
            ("dump", "count") => self.dump_count = p_usize(value)?,
            ("sweep", "axis") => self.sweep_axis = SweepAxis::parse(value)?,
            ("sweep", "values") => {
                self.sweep_values =
                    value.split(',').map(|s| s.trim().to_string()).collect()
            }
            ("varlab", "distribution") => self.varlab.distribution = p_distribution(value)?,
            ("varlab", "sigma_sq") => self.varlab.sigma_sq = p_f64(value)?,
            ("varlab", "horizons") => self.varlab.horizons = p_usize_list(value)?,
            ("varlab", "samples") => self.varlab.samples = p_usize(value)?,
            ("varlab", "lengths") => self.varlab.lengths = p_usize_list(value)?,
            ("varlab", "rollouts_per_length") => {
                self.varlab.rollouts_per_length = p_usize(value)?
            }
            _ => return Err(format!("unknown key {section}.{key}")),
        }
        Ok(())
    }

    /// Resolves derived fields (task seed default, mode coupling, staged
    /// policy parameters) and validates everything. Idempotent.
    pub fn finalize(&mut self) -> Result<(), HarnessError> {
        if !self.task_seed_set {
            self.task.seed = self.seed;
        }
        if let EvictionPolicy::HeavyHitter { .. } = self.rollout.policy {
            self.rollout.policy = EvictionPolicy::HeavyHitter { window: self.hh_window };
        }
        if let EvictionPolicy::Random { .. } = self.rollout.policy {
            // placeholder; the train loop substitutes each trajectory's seed
            self.rollout.policy = EvictionPolicy::Random { seed: self.seed };
        }
        self.learner.mode = match self.run_mode {
            RunMode::Smd => LearnerMode::Smd,
            RunMode::Naive => LearnerMode::Naive,
            RunMode::Ir => LearnerMode::Ir,
            RunMode::IrReject => LearnerMode::IrReject,
            RunMode::Dense => {
                self.rollout.policy = EvictionPolicy::None;
                self.rollout.retain_frac = 1.0;
                self.learner.distill_lambda = 0.0;
                LearnerMode::Smd
            }
        };
        self.model.validate().map_err(HarnessError::Invalid)?;
        self.task.validate(self.model.vocab_size)?;
        self.rollout.validate()?;
        self.learner.validate()?;
        let longest = self.task.prompt_len.1 + self.rollout.max_new_tokens;
        if longest > self.model.max_seq_len {
            return Err(HarnessError::Invalid(format!(
                "prompt_max {} + max_new_tokens {} exceeds max_seq_len {}",
                self.task.prompt_len.1, self.rollout.max_new_tokens, self.model.max_seq_len
            )));
        }
        if self.prompts_per_step == 0 {
            return Err(HarnessError::Invalid("prompts_per_step = 0".into()));
        }
        Ok(())
    }
}

// ── Metrics ──

pub const METRIC_HEADER: &str = "step\treward_mean\treward_std\tratio_mean\tratio_var\tloss_pg\tloss_ref_kl\tloss_distill\tpeak_mem_ratio\tconsumed\tgenerated";

/// Full-precision float text; round-trips f64 exactly.
pub fn f17(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub ratio_mean: f64,
    pub ratio_var: f64,
    pub loss_pg: f64,
    pub loss_ref_kl: f64,
    pub loss_distill: f64,
    pub peak_mem_ratio: f64,
    /// Trajectories the update consumed; less than `generated` only when
    /// rejection dropped some.
    pub consumed: usize,
    pub generated: usize,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            f17(self.reward_mean),
            f17(self.reward_std),
            f17(self.ratio_mean),
            f17(self.ratio_var),
            f17(self.loss_pg),
            f17(self.loss_ref_kl),
            f17(self.loss_distill),
            f17(self.peak_mem_ratio),
            self.consumed,
            self.generated,
        )
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 11 {
            return Err(format!("expected 11 columns, got {}", f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad float {s:?}"));
        Ok(MetricRecord {
            step: p_usize(f[0])?,
            reward_mean: num(f[1])?,
            reward_std: num(f[2])?,
            ratio_mean: num(f[3])?,
            ratio_var: num(f[4])?,
            loss_pg: num(f[5])?,
            loss_ref_kl: num(f[6])?,
            loss_distill: num(f[7])?,
            peak_mem_ratio: num(f[8])?,
            consumed: p_usize(f[9])?,
            generated: p_usize(f[10])?,
        })
    }
}

/// Parses a metrics.tsv written by run_train.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, HarnessError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRIC_HEADER => {}
        other => {
            return Err(HarnessError::Invalid(format!(
                "{}: bad metrics header {other:?}",
                path.display()
            )))
        }
    }
    lines
        .map(|l| {
            MetricRecord::parse(l)
                .map_err(|m| HarnessError::Invalid(format!("{}: {m}", path.display())))
        })
        .collect()
}

// ── Training ──

/// Worker count: SMD_THREADS when set to a positive integer, otherwise
/// the machine's available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("SMD_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

struct RolloutJob {
    prompt_idx: usize,
    config: RolloutConfig,
    seed: u64,
}

/// Runs jobs across up to `threads` workers with round-robin assignment;
/// results land in job order, so the outcome is thread-count independent.
fn run_jobs(
    params: &Parameters,
    prompts: &[Vec<Token>],
    jobs: &[RolloutJob],
    threads: usize,
) -> Vec<Result<Trajectory, RolloutError>> {
    let workers = threads.min(jobs.len()).max(1);
    if workers == 1 {
        return jobs
            .iter()
            .map(|j| generate_sparse(params, &prompts[j.prompt_idx], &j.config, j.seed))
            .collect();
    }
    let mut out: Vec<Option<Result<Trajectory, RolloutError>>> =
        (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    jobs.iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, j)| {
                            (i, generate_sparse(params, &prompts[j.prompt_idx], &j.config, j.seed))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("rollout worker panicked") {
                out[i] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("job slot unfilled")).collect()
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Mean reward over the last tenth of completed steps.
    pub final_reward: f64,
    pub records: Vec<MetricRecord>,
}

enum StepOutcome {
    Done(MetricRecord),
    Skipped,
}

pub fn run_train(config: &ExperimentConfig) -> Result<TrainOutput, HarnessError> {
    fs::create_dir_all(&config.out)?;
    let mut params = Parameters::init(&config.model, config.seed);
    let ref_params = params.clone();
    let mut opt = Optimizer::new(&params);
    let metrics_path = config.out.join("metrics.tsv");
    let mut w = BufWriter::new(fs::File::create(&metrics_path)?);
    writeln!(w, "{METRIC_HEADER}")?;
    let threads = thread_budget();
    let mut records = Vec::new();
    for step in 0..config.steps {
        match train_step(&mut params, &ref_params, &mut opt, config, step, threads)? {
            StepOutcome::Done(rec) => {
                writeln!(w, "{}", rec.to_line())?;
                if config.steps >= 50 && (step + 1) % 50 == 0 {
                    eprintln!(
                        "[train {}] step {}/{} reward {:.3}",
                        config.run_mode.name(),
                        step + 1,
                        config.steps,
                        rec.reward_mean
                    );
                }
                records.push(rec);
            }
            StepOutcome::Skipped => {}
        }
    }
    w.flush()?;
    drop(w);
    let checkpoint = config.out.join("checkpoint.bin");
    save_checkpoint(&checkpoint, &params)?;
    let final_reward = if records.is_empty() {
        0.0
    } else {
        let tail = records.len().div_ceil(10);
        let slice = &records[records.len() - tail..];
        slice.iter().map(|r| r.reward_mean).sum::<f64>() / tail as f64
    };
    Ok(TrainOutput { checkpoint, metrics: metrics_path, final_reward, records })
}

fn train_step(
    params: &mut Parameters,
    ref_params: &Parameters,
    opt: &mut Optimizer,
    config: &ExperimentConfig,
    step: usize,
    threads: usize,
) -> Result<StepOutcome, HarnessError> {
    let n_prompts = config.prompts_per_step;
    let k = config.rollout.k;
    let instances: Vec<TaskInstance> = (0..n_prompts)
        .map(|p| {
            let mut rng = stream_rng(config.seed, Stream::Task, step as u64, p as u64);
            make_instance(&config.task, &mut rng)
        })
        .collect();
    let prompts: Vec<Vec<Token>> = instances.iter().map(|i| i.prompt.clone()).collect();
    let jobs: Vec<RolloutJob> = (0..n_prompts)
        .flat_map(|p| {
            let config = &config;
            (0..k).map(move |s| {
                let mut seeder = stream_rng(
                    config.seed,
                    Stream::RolloutSample,
                    (step * config.prompts_per_step + p) as u64,
                    s as u64,
                );
                let seed = seeder.gen::<u64>();
                let mut rc = config.rollout.clone();
                if let EvictionPolicy::Random { .. } = rc.policy {
                    rc.policy = EvictionPolicy::Random { seed };
                }
                RolloutJob { prompt_idx: p, config: rc, seed }
            })
        })
        .collect();
    let results = run_jobs(params, &prompts, &jobs, threads);

    let mut groups: Vec<Vec<Trajectory>> = (0..n_prompts).map(|_| Vec::with_capacity(k)).collect();
    let mut cache_entries: u64 = 0;
    for (i, (job, res)) in jobs.iter().zip(results).enumerate() {
        match res {
            Ok(mut traj) => {
                traj.reward = reward(&instances[job.prompt_idx], &traj.generated);
                cache_entries += (config.model.n_layers
                    * config.model.n_heads
                    * traj.full_tokens().len()) as u64;
                groups[job.prompt_idx].push(traj);
            }
            Err(RolloutError::Model(ModelError::DegenerateVisibility { query })) => {
                eprintln!(
                    "[train] step {step}: trajectory {i} (prompt {}, sample {}) lost all visibility at query {query}; step skipped",
                    job.prompt_idx,
                    i % k
                );
                return Ok(StepOutcome::Skipped);
            }
            Err(e) => return Err(e.into()),
        }
    }

    let all: Vec<&Trajectory> = groups.iter().flatten().collect();
    let generated = all.len();
    let reward_mean = all.iter().map(|t| t.reward).sum::<f64>() / generated as f64;
    let reward_std = (all.iter().map(|t| (t.reward - reward_mean).powi(2)).sum::<f64>()
        / generated as f64)
        .sqrt();

    let mut batches: Vec<GroupBatch> = instances
        .iter()
        .zip(groups)
        .map(|(inst, trajs)| {
            GroupBatch::new(inst.prompt.clone(), trajs, config.rollout.temperature)
        })
        .collect::<Result<_, _>>()?;

    // mask-path accounting: the shadow bitmap is the only spike over the
    // cache itself, and only eviction needs one
    let baseline = cache_entries * entry_bytes(config.model.d_head());
    let peak_mem_ratio = if config.rollout.evicts() {
        let mut ledger = MemoryLedger::new(baseline);
        ledger.alloc("mask_bitmap", cache_entries.div_ceil(8));
        ledger_peak_ratio(&ledger, baseline)
    } else {
        1.0
    };

    let update = match config.run_mode {
        RunMode::Smd | RunMode::Dense => {
            smd_update(params, ref_params, opt, &batches, &config.learner)
        }
        RunMode::Naive => naive_update(params, ref_params, opt, &batches, &config.learner),
        RunMode::Ir => ir_update(params, opt, &batches, &config.learner),
        RunMode::IrReject => (|| {
            for b in &mut batches {
                attach_dense_ratios(params, b)?;
            }
            let (kept, outcome) = rejection_filter(&batches, config.learner.rejection_fraction)?;
            if outcome.shortfall > 0 {
                eprintln!(
                    "[train] step {step}: rejection quota short by {} (group floor)",
                    outcome.shortfall
                );
            }
            ir_update(params, opt, &kept, &config.learner)
        })(),
    };
    let breakdown: LossBreakdown = match update {
        Ok(b) => b,
        Err(LearnerError::Model(ModelError::DegenerateVisibility { query })) => {
            eprintln!("[train] step {step}: degenerate visibility at query {query} in the update; step skipped");
            return Ok(StepOutcome::Skipped);
        }
        Err(e) => return Err(e.into()),
    };
    let consumed = breakdown.cumulative_ratio.len();
    let ratio_mean = breakdown.cumulative_ratio.iter().sum::<f64>() / consumed as f64;

    Ok(StepOutcome::Done(MetricRecord {
        step,
        reward_mean,
        reward_std,
        ratio_mean,
        ratio_var: breakdown.ratio_variance,
        loss_pg: breakdown.pg,
        loss_ref_kl: breakdown.ref_kl,
        loss_distill: breakdown.distill,
        peak_mem_ratio,
        consumed,
        generated,
    }))
}

// ── Evaluation ──

#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    pub mean_reward: f64,
    pub instances: usize,
}

fn load_or_init(config: &ExperimentConfig) -> Result<Parameters, HarnessError> {
    let ckpt = config.out.join("checkpoint.bin");
    if ckpt.exists() {
        Ok(load_checkpoint(&ckpt, &config.model)?)
    } else {
        eprintln!("[eval] no checkpoint at {}; using init weights", ckpt.display());
        Ok(Parameters::init(&config.model, config.seed))
    }
}

/// Greedy decoding on held-out instances, scored by the task reward.
pub fn run_eval(config: &ExperimentConfig) -> Result<EvalReport, HarnessError> {
    if config.eval_instances == 0 {
        return Err(HarnessError::Invalid("eval.instances = 0".into()));
    }
    let params = load_or_init(config)?;
    let mut total = 0.0;
    for i in 0..config.eval_instances {
        let mut rng = stream_rng(config.seed, Stream::Eval, i as u64, 0);
        let inst = make_instance(&config.task, &mut rng);
        let traj = generate_greedy(&params, &inst.prompt, &config.rollout)?;
        total += reward(&inst, &traj.generated);
    }
    Ok(EvalReport { mean_reward: total / config.eval_instances as f64, instances: config.eval_instances })
}

// ── Trajectory dump ──

#[derive(Debug, Serialize, Deserialize)]
pub struct TrajRecord {
    pub seed: u64,
    pub prompt: Vec<Token>,
    pub generated: Vec<Token>,
    pub behavior_logprob: Vec<f64>,
    pub reward: f64,
    pub mask: ShadowMaskRecord,
}

impl TrajRecord {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        TrajRecord {
            seed: t.rng_seed,
            prompt: t.prompt.clone(),
            generated: t.generated.clone(),
            behavior_logprob: t.behavior_logprob.clone(),
            reward: t.reward,
            mask: ShadowMaskRecord::from(&t.mask),
        }
    }
}

/// Samples trajectories from the checkpoint (or init) and writes them as
/// JSON lines with their shadow masks.
pub fn run_dump(config: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    let params = load_or_init(config)?;
    fs::create_dir_all(&config.out)?;
    let path = config.out.join("trajectories.jsonl");
    let mut w = BufWriter::new(fs::File::create(&path)?);
    // a = u64::MAX - 1 keeps these instance streams clear of both the
    // step-indexed training streams and the task's pair-table stream
    for i in 0..config.dump_count {
        let mut rng = stream_rng(config.seed, Stream::Task, u64::MAX - 1, i as u64);
        let inst = make_instance(&config.task, &mut rng);
        let seed =
            stream_rng(config.seed, Stream::RolloutSample, u64::MAX - 1, i as u64).gen::<u64>();
        let mut rc = config.rollout.clone();
        if let EvictionPolicy::Random { .. } = rc.policy {
            rc.policy = EvictionPolicy::Random { seed };
        }
        let mut traj = generate_sparse(&params, &inst.prompt, &rc, seed)?;
        traj.reward = reward(&inst, &traj.generated);
        let record = TrajRecord::from_trajectory(&traj);
        serde_json::to_writer(&mut w, &record)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(path)
}

// ── Memory bench ──

#[derive(Debug, Clone, Copy)]
pub struct MembenchRow {
    pub retention: f64,
    pub entries: usize,
    pub slice_peak: f64,
    pub mask_peak: f64,
}

/// Builds a cache shaped like one full-length rollout and compares the
/// slice-compaction spike against the in-place mask bitmap, at a grid of
/// retention fractions plus the configured one.
pub fn run_membench(config: &ExperimentConfig) -> Result<Vec<MembenchRow>, HarnessError> {
    let seq = config.task.prompt_len.1 + config.rollout.max_new_tokens;
    let m = &config.model;
    let mut retentions = vec![0.25, 0.5, 0.8, 1.0, config.rollout.retain_frac];
    retentions.sort_by(f64::total_cmp);
    retentions.dedup();
    let mut rows = Vec::new();
    for &r in &retentions {
        let mut cache = KVCache::new(m.n_layers, m.n_heads, m.d_head());
        for layer in 0..m.n_layers {
            for head in 0..m.n_heads {
                for pos in 0..seq {
                    cache.push(layer, head, vec![0.0; m.d_head()], vec![0.0; m.d_head()], pos);
                }
            }
        }
        let keep = ((r * seq as f64).ceil() as usize).clamp(1, seq);
        for layer in &mut cache.heads {
            for head in layer {
                for e in head.entries.iter_mut().take(seq - keep) {
                    e.retained = false;
                }
            }
        }
        let baseline = cache.footprint_bytes();
        let entries = cache.total_entries();
        let mut mask_ledger = MemoryLedger::new(baseline);
        mask_simulate(&cache, &mut mask_ledger);
        let mut slice_ledger = MemoryLedger::new(baseline);
        physical_slice(&mut cache, &mut slice_ledger);
        rows.push(MembenchRow {
            retention: r,
            entries,
            slice_peak: ledger_peak_ratio(&slice_ledger, baseline),
            mask_peak: ledger_peak_ratio(&mask_ledger, baseline),
        });
    }
    fs::create_dir_all(&config.out)?;
    let mut w = BufWriter::new(fs::File::create(config.out.join("membench.tsv"))?);
    writeln!(w, "retention\tentries\tslice_peak_ratio\tmask_peak_ratio")?;
    for row in &rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            f17(row.retention),
            row.entries,
            f17(row.slice_peak),
            f17(row.mask_peak)
        )?;
    }
    w.flush()?;
    Ok(rows)
}

// ── Variance lab ──

#[derive(Debug)]
pub struct VarLabReport {
    pub sim: Vec<SimRow>,
    /// Fit of ln(1 + empirical variance) against horizon; the slope should
    /// track ln(1 + sigma^2).
    pub fit: LineFit,
    pub ir: Vec<RatioVariancePoint>,
    pub smd: Vec<RatioVariancePoint>,
}

/// Synthetic product-of-weights grid plus the policy ratio probe on a
/// freshly initialized model, both written under the run directory.
pub fn run_variance_lab(config: &ExperimentConfig) -> Result<VarLabReport, HarnessError> {
    let vl = &config.varlab;
    if vl.horizons.len() < 2 {
        return Err(HarnessError::Invalid("varlab.horizons needs at least 2 entries".into()));
    }
    if vl.lengths.is_empty() || vl.rollouts_per_length < 2 {
        return Err(HarnessError::Invalid(
            "varlab needs lengths and rollouts_per_length >= 2".into(),
        ));
    }
    let longest = config.task.prompt_len.1 + vl.lengths.iter().max().copied().unwrap_or(0);
    if longest > config.model.max_seq_len {
        return Err(HarnessError::Invalid(format!(
            "varlab probe length {longest} exceeds max_seq_len {}",
            config.model.max_seq_len
        )));
    }
    let threads = thread_budget();
    let sim = simulate_grid(
        vl.distribution,
        vl.sigma_sq,
        &vl.horizons,
        vl.samples,
        config.seed,
        threads,
    );
    let xs: Vec<f64> = sim.iter().map(|r| r.horizon as f64).collect();
    let ys: Vec<f64> = sim.iter().map(|r| (r.empirical + 1.0).ln()).collect();
    let fit = fit_line(&xs, &ys);

    let params = Parameters::init(&config.model, config.seed);
    let prompts: Vec<Vec<Token>> = (0..4)
        .map(|p| {
            let mut rng = stream_rng(config.seed, Stream::VarLab, u64::MAX - 1, p);
            make_instance(&config.task, &mut rng).prompt
        })
        .collect();
    let ir = measure_policy_ratio_variance(
        &params,
        &prompts,
        &vl.lengths,
        vl.rollouts_per_length,
        RatioMode::Ir,
        &config.rollout,
        config.seed,
    )?;
    let smd = measure_policy_ratio_variance(
        &params,
        &prompts,
        &vl.lengths,
        vl.rollouts_per_length,
        RatioMode::Smd,
        &config.rollout,
        config.seed,
    )?;

    fs::create_dir_all(&config.out)?;
    let mut w = BufWriter::new(fs::File::create(config.out.join("variance_sim.tsv"))?);
    writeln!(w, "horizon\tsigma_sq\tempirical_var\tclosed_form\tmean")?;
    for r in &sim {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.horizon,
            f17(r.sigma_sq),
            f17(r.empirical),
            f17(r.closed_form),
            f17(r.mean)
        )?;
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(config.out.join("variance_policy.tsv"))?);
    writeln!(w, "mode\tlength\tratio_mean\tratio_var")?;
    for (mode, points) in [("ir", &ir), ("smd", &smd)] {
        for p in points {
            writeln!(w, "{mode}\t{}\t{}\t{}", p.length, f17(p.mean), f17(p.variance))?;
        }
    }
    w.flush()?;
    Ok(VarLabReport { sim, fit, ir, smd })
}

// ── Sweep ──

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub final_reward: f64,
    pub out: PathBuf,
}

/// Trains once per axis value, sharing the base seed, and writes a summary
/// table; each run keeps its own subdirectory under the sweep root.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<SweepRow>, HarnessError> {
    if config.sweep_values.is_empty() {
        return Err(HarnessError::Invalid("sweep.values is empty".into()));
    }
    let mut rows = Vec::new();
    for value in &config.sweep_values {
        let mut c = config.clone();
        c.out = config.out.join(format!("{}-{}", config.sweep_axis.name(), value));
        match config.sweep_axis {
            SweepAxis::Compression => {
                let comp = p_f64(value)
                    .map_err(|m| HarnessError::Invalid(format!("sweep value {value:?}: {m}")))?;
                if !(0.0..1.0).contains(&comp) {
                    return Err(HarnessError::Invalid(format!(
                        "compression {comp} outside [0, 1)"
                    )));
                }
                c.rollout.retain_frac = 1.0 - comp;
            }
            SweepAxis::Lambda => {
                c.learner.distill_lambda = p_f64(value)
                    .map_err(|m| HarnessError::Invalid(format!("sweep value {value:?}: {m}")))?;
            }
            SweepAxis::Strategy => {
                c.rollout.policy = p_policy(value, c.hh_window)
                    .map_err(|m| HarnessError::Invalid(format!("sweep value {value:?}: {m}")))?;
            }
        }
        c.finalize()?;
        eprintln!("[sweep] {} = {}", config.sweep_axis.name(), value);
        let out = run_train(&c)?;
        rows.push(SweepRow {
            value: value.clone(),
            final_reward: out.final_reward,
            out: c.out.clone(),
        });
    }
    fs::create_dir_all(&config.out)?;
    let mut w = BufWriter::new(fs::File::create(config.out.join("sweep.tsv"))?);
    writeln!(w, "{}\tfinal_reward", config.sweep_axis.name())?;
    for row in &rows {
        writeln!(w, "{}\t{}", row.value, f17(row.final_reward))?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("smd-harness-{name}"));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    /// Small enough to train in tests; still uses the default task family.
    fn tiny_config(name: &str) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.model = ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            max_seq_len: 64,
            tied_output: false,
        };
        c.task.prompt_len = (16, 16);
        c.rollout.k = 2;
        c.rollout.max_new_tokens = 3;
        c.steps = 2;
        c.prompts_per_step = 2;
        c.eval_instances = 4;
        c.dump_count = 3;
        c.out = scratch(name);
        c.finalize().unwrap();
        c
    }

    #[test]
    fn defaults_finalize_cleanly() {
        let mut c = ExperimentConfig::default();
        c.finalize().unwrap();
        assert_eq!(c.task.seed, c.seed);
        assert!(matches!(c.rollout.policy, EvictionPolicy::HeavyHitter { window: 4 }));
    }

    #[test]
    fn config_file_applies_and_reports_line_errors() {
        let dir = scratch("config-file");
        let good = dir.join("good.ini");
        fs::write(
            &good,
            "# comment\n[model]\nvocab_size = 32\n\n[rollout]\nhh_window = 4\npolicy = heavy-hitter\nretain_frac = 0.25\n\n[learner]\nmode = ir-reject\nlambda = 0.5\n\n[train]\nsteps = 7\nseed = 9\n",
        )
        .unwrap();
        let c = ExperimentConfig::from_sources(Some(&good), &[], None, None, None).unwrap();
        assert_eq!(c.model.vocab_size, 32);
        assert_eq!(c.rollout.retain_frac, 0.25);
        assert!(matches!(c.rollout.policy, EvictionPolicy::HeavyHitter { window: 4 }));
        assert_eq!(c.run_mode, RunMode::IrReject);
        assert_eq!(c.learner.mode, LearnerMode::IrReject);
        assert_eq!(c.learner.distill_lambda, 0.5);
        assert_eq!(c.steps, 7);
        assert_eq!(c.seed, 9);
        assert_eq!(c.task.seed, 9, "task seed follows run seed unless set");

        let bad_key = dir.join("bad-key.ini");
        fs::write(&bad_key, "[model]\nvocab = 32\n").unwrap();
        let err =
            ExperimentConfig::from_sources(Some(&bad_key), &[], None, None, None).unwrap_err();
        match err {
            HarnessError::Config { line, ref msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("unknown key model.vocab"), "{msg}");
            }
            other => panic!("wrong error {other:?}"),
        }

        let bad_value = dir.join("bad-value.ini");
        fs::write(&bad_value, "[train]\nsteps = soon\n").unwrap();
        let err =
            ExperimentConfig::from_sources(Some(&bad_value), &[], None, None, None).unwrap_err();
        assert!(matches!(err, HarnessError::Config { line: 2, .. }), "{err}");

        let no_section = dir.join("no-section.ini");
        fs::write(&no_section, "steps = 3\n").unwrap();
        let err =
            ExperimentConfig::from_sources(Some(&no_section), &[], None, None, None).unwrap_err();
        assert!(matches!(err, HarnessError::Config { line: 1, .. }), "{err}");
    }

    #[test]
    fn set_overrides_beat_file_and_validate() {
        let dir = scratch("set-overrides");
        let file = dir.join("base.ini");
        fs::write(&file, "[train]\nsteps = 7\n").unwrap();
        let c = ExperimentConfig::from_sources(
            Some(&file),
            &["train.steps=11".into(), "rollout.retain_frac=0.75".into()],
            Some(3),
            Some(RunMode::Naive),
            None,
        )
        .unwrap();
        assert_eq!(c.steps, 11);
        assert_eq!(c.rollout.retain_frac, 0.75);
        assert_eq!(c.seed, 3);
        assert_eq!(c.learner.mode, LearnerMode::Naive);

        let err = ExperimentConfig::default().apply_set("train.steps").unwrap_err();
        assert!(matches!(err, HarnessError::Override { .. }));
        let err = ExperimentConfig::default().apply_set("nope.steps=1").unwrap_err();
        assert!(matches!(err, HarnessError::Override { .. }));
    }

    #[test]
    fn dense_mode_disables_eviction_and_distillation() {
        let mut c = ExperimentConfig::default();
        c.run_mode = RunMode::Dense;
        c.finalize().unwrap();
        assert_eq!(c.rollout.policy, EvictionPolicy::None);
        assert_eq!(c.rollout.retain_frac, 1.0);
        assert_eq!(c.learner.distill_lambda, 0.0);
        assert_eq!(c.learner.mode, LearnerMode::Smd);
        assert!(!c.rollout.evicts());
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.rollout.max_new_tokens = 300;
        assert!(matches!(c.finalize(), Err(HarnessError::Invalid(_))));

        let mut c = ExperimentConfig::default();
        c.model.vocab_size = 8; // needle needs 13 with the default spec
        assert!(matches!(c.finalize(), Err(HarnessError::Task(_))));
    }

    #[test]
    fn metric_line_roundtrips_exactly() {
        let rec = MetricRecord {
            step: 17,
            reward_mean: 1.0 / 3.0,
            reward_std: 0.2871,
            ratio_mean: 1.0 + 1e-15,
            ratio_var: 2.5e9,
            loss_pg: -0.125,
            loss_ref_kl: 3.033e-4,
            loss_distill: 7.0,
            peak_mem_ratio: 1.00048828125,
            consumed: 16,
            generated: 20,
        };
        let back = MetricRecord::parse(&rec.to_line()).unwrap();
        assert_eq!(back, rec);
        assert!(MetricRecord::parse("1\t2\t3").is_err());
    }

    #[test]
    fn zero_steps_leaves_init_checkpoint_and_empty_metrics() {
        let mut c = tiny_config("zero-steps");
        c.steps = 0;
        let out = run_train(&c).unwrap();
        assert_eq!(out.records.len(), 0);
        assert_eq!(out.final_reward, 0.0);
        let text = fs::read_to_string(&out.metrics).unwrap();
        assert_eq!(text.trim_end(), METRIC_HEADER);
        let loaded = load_checkpoint(&out.checkpoint, &c.model).unwrap();
        let init = Parameters::init(&c.model, c.seed);
        for ((name, a), (_, b)) in loaded.named().iter().zip(init.named()) {
            assert_eq!(*a, b, "{name} differs from init");
        }
    }

    #[test]
    fn training_metrics_are_thread_count_invariant() {
        let mut c = tiny_config("determinism-a");
        c.steps = 2;
        std::env::set_var("SMD_THREADS", "1");
        let a = run_train(&c).unwrap();
        let text_a = fs::read_to_string(&a.metrics).unwrap();
        c.out = scratch("determinism-b");
        std::env::set_var("SMD_THREADS", "3");
        let b = run_train(&c).unwrap();
        std::env::remove_var("SMD_THREADS");
        let text_b = fs::read_to_string(&b.metrics).unwrap();
        assert_eq!(text_a, text_b, "metrics differ across thread counts");
        assert!(!a.records.is_empty());
        let parsed = read_metrics(&a.metrics).unwrap();
        assert_eq!(parsed.len(), a.records.len());
        assert_eq!(parsed[0], a.records[0]);
    }

    #[test]
    fn smd_consumes_every_generated_trajectory() {
        let c = tiny_config("consumed-smd");
        let out = run_train(&c).unwrap();
        for r in &out.records {
            assert_eq!(r.consumed, r.generated);
            assert_eq!(r.generated, c.prompts_per_step * c.rollout.k);
            assert!(r.peak_mem_ratio > 1.0 && r.peak_mem_ratio < 1.01);
        }
    }

    #[test]
    fn rejection_run_consumes_eighty_percent() {
        let mut c = tiny_config("consumed-reject");
        c.run_mode = RunMode::IrReject;
        c.steps = 1;
        c.prompts_per_step = 5;
        c.rollout.k = 4;
        c.finalize().unwrap();
        let out = run_train(&c).unwrap();
        let r = &out.records[0];
        assert_eq!(r.generated, 20);
        assert_eq!(r.consumed, 16, "ceil(0.2 * 20) = 4 dropped");
    }

    #[test]
    fn dense_mode_reports_unit_memory_and_unit_ratios() {
        let mut c = tiny_config("dense-run");
        c.run_mode = RunMode::Dense;
        c.finalize().unwrap();
        let out = run_train(&c).unwrap();
        for r in &out.records {
            assert_eq!(r.peak_mem_ratio, 1.0);
            assert!((r.ratio_mean - 1.0).abs() < 1e-9, "dense ratios stay 1");
        }
    }

    #[test]
    fn eval_is_deterministic_and_falls_back_to_init() {
        let c = tiny_config("eval-init");
        let a = run_eval(&c).unwrap();
        let b = run_eval(&c).unwrap();
        assert_eq!(a.mean_reward, b.mean_reward);
        assert_eq!(a.instances, 4);
        assert!((0.0..=1.0).contains(&a.mean_reward));
    }

    #[test]
    fn dump_writes_parseable_trajectories_with_masks() {
        let c = tiny_config("dump");
        let path = run_dump(&c).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for line in lines {
            let rec: TrajRecord = serde_json::from_str(line).unwrap();
            assert_eq!(rec.prompt.len(), 16);
            assert!(!rec.generated.is_empty());
            assert_eq!(rec.generated.len(), rec.behavior_logprob.len());
            assert_eq!(rec.mask.prompt_len, 16);
            assert_eq!(rec.mask.seq_len, rec.prompt.len() + rec.generated.len());
            assert!(
                rec.mask.evictions.iter().flatten().flatten().count() > 0,
                "half retention must evict something"
            );
        }
    }

    #[test]
    fn membench_grid_matches_ledger_arithmetic() {
        let c = tiny_config("membench");
        let rows = run_membench(&c).unwrap();
        let seq = c.task.prompt_len.1 + c.rollout.max_new_tokens;
        for row in &rows {
            let keep = ((row.retention * seq as f64).ceil() as usize).clamp(1, seq);
            let want_slice = 1.0 + keep as f64 / seq as f64;
            assert!((row.slice_peak - want_slice).abs() < 1e-12, "{row:?}");
            assert!(row.mask_peak < 1.01, "{row:?}");
            assert!(row.mask_peak > 1.0);
        }
        assert!(rows.iter().any(|r| r.retention == 0.5));
        let text = fs::read_to_string(c.out.join("membench.tsv")).unwrap();
        assert_eq!(text.lines().count(), rows.len() + 1);
    }

    #[test]
    fn sweep_trains_each_value_and_summarizes() {
        let mut c = tiny_config("sweep");
        c.steps = 1;
        c.sweep_axis = SweepAxis::Compression;
        c.sweep_values = vec!["0".into(), "0.5".into()];
        let rows = run_sweep(&c).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.out.join("metrics.tsv").exists());
            assert!(row.out.join("checkpoint.bin").exists());
        }
        let text = fs::read_to_string(c.out.join("sweep.tsv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        let err_values = ExperimentConfig {
            sweep_values: vec!["1.5".into()],
            sweep_axis: SweepAxis::Compression,
            ..c.clone()
        };
        assert!(run_sweep(&err_values).is_err());
    }

    #[test]
    fn variance_lab_writes_grid_and_policy_probe() {
        let mut c = tiny_config("varlab");
        c.varlab.samples = 4000;
        c.varlab.horizons = vec![4, 8];
        c.varlab.lengths = vec![2, 4];
        c.varlab.rollouts_per_length = 8;
        let report = run_variance_lab(&c).unwrap();
        assert_eq!(report.sim.len(), 2);
        assert_eq!(report.ir.len(), 2);
        assert_eq!(report.smd.len(), 2);
        assert!(report.fit.slope > 0.0);
        for p in &report.smd {
            assert!(p.variance.abs() < 1e-18, "shadow ratios are exactly 1");
        }
        assert!(c.out.join("variance_sim.tsv").exists());
        assert!(c.out.join("variance_policy.tsv").exists());
    }
}

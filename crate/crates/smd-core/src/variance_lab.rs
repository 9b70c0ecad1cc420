//! Importance-weight variance experiments. A Monte-Carlo simulator draws
//! iid mean-one weights and checks the product variance against the
//! closed form (1+sigma^2)^L - 1, which the iid case attains with
//! equality; a policy-side probe measures the same statistic on real
//! rollouts, where shadow recomputation pins every ratio to 1 and dense
//! recomputation does not.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{forward_dense, forward_shadow, ModelError, Parameters, Token};
use crate::rng::{standard_normal, stream_rng, Stream};
use crate::rollout::{generate_sparse, recompute_logprobs, RolloutConfig, RolloutError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightDistribution {
    /// w = 1 - sigma or 1 + sigma, each with probability 1/2.
    TwoPoint,
    /// exp(N(mu, s^2)) with mu = -ln(1+sigma^2)/2, s^2 = ln(1+sigma^2),
    /// so the mean is exactly 1 and the variance sigma^2.
    LogNormal,
}

impl WeightDistribution {
    pub fn name(self) -> &'static str {
        match self {
            WeightDistribution::TwoPoint => "two-point",
            WeightDistribution::LogNormal => "lognormal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two-point" | "twopoint" | "two_point" => Some(WeightDistribution::TwoPoint),
            "lognormal" | "log-normal" => Some(WeightDistribution::LogNormal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightModel {
    pub distribution: WeightDistribution,
    pub sigma_sq: f64,
    pub horizon: usize,
    pub n_samples: usize,
}

/// Variance of the length-L product of iid mean-one weights with
/// per-step variance sigma^2; the theorem's lower bound, exact here.
pub fn closed_form_variance(sigma_sq: f64, horizon: usize) -> f64 {
    assert!(sigma_sq >= 0.0 && horizon >= 1);
    (1.0 + sigma_sq).powi(horizon as i32) - 1.0
}

#[derive(Debug, Clone, Copy)]
pub struct SimulationResult {
    pub mean: f64,
    pub variance: f64,
}

const CHUNK: usize = 1 << 16;

fn chunk_sums(model: &WeightModel, rng: &mut ChaCha8Rng, count: usize) -> (f64, f64) {
    let sigma = model.sigma_sq.sqrt();
    let (mu, s) = {
        let s_sq = (1.0 + model.sigma_sq).ln();
        (-0.5 * s_sq, s_sq.sqrt())
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..count {
        let mut product = 1.0;
        for _ in 0..model.horizon {
            let w = match model.distribution {
                WeightDistribution::TwoPoint => {
                    if rng.gen::<bool>() {
                        1.0 + sigma
                    } else {
                        1.0 - sigma
                    }
                }
                WeightDistribution::LogNormal => (mu + s * standard_normal(rng)).exp(),
            };
            product *= w;
        }
        sum += product;
        sum_sq += product * product;
    }
    (sum, sum_sq)
}

/// Sample variance (and mean) of n_samples independent weight products.
/// Work is split into fixed-size chunks with per-chunk RNG streams and
/// reduced in chunk order, so the result does not depend on `threads`.
pub fn simulate_product_variance(
    model: &WeightModel,
    seed: u64,
    threads: usize,
) -> SimulationResult {
    assert!(model.n_samples >= 2);
    let n = model.n_samples;
    let n_chunks = n.div_ceil(CHUNK);
    let chunk_stat = |c: usize| {
        let count = CHUNK.min(n - c * CHUNK);
        let mut rng = stream_rng(seed, Stream::VarLab, model.horizon as u64, c as u64);
        chunk_sums(model, &mut rng, count)
    };
    let sums: Vec<(f64, f64)> = if threads <= 1 || n_chunks == 1 {
        (0..n_chunks).map(chunk_stat).collect()
    } else {
        let workers = threads.min(n_chunks);
        let mut sums = vec![(0.0, 0.0); n_chunks];
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunk_stat = &chunk_stat;
                    scope.spawn(move || {
                        (w..n_chunks)
                            .step_by(workers)
                            .map(|c| (c, chunk_stat(c)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (c, s) in h.join().expect("simulator worker") {
                    sums[c] = s;
                }
            }
        });
        sums
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for (a, b) in sums {
        sum += a;
        sum_sq += b;
    }
    let mean = sum / n as f64;
    let variance = (sum_sq - sum * mean) / (n as f64 - 1.0);
    SimulationResult { mean, variance }
}

#[derive(Debug, Clone, Copy)]
pub struct SimRow {
    pub horizon: usize,
    pub sigma_sq: f64,
    pub empirical: f64,
    pub closed_form: f64,
    pub mean: f64,
}

pub fn simulate_grid(
    distribution: WeightDistribution,
    sigma_sq: f64,
    horizons: &[usize],
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Vec<SimRow> {
    horizons
        .iter()
        .map(|&horizon| {
            let model = WeightModel { distribution, sigma_sq, horizon, n_samples };
            let sim = simulate_product_variance(&model, seed, threads);
            SimRow {
                horizon,
                sigma_sq,
                empirical: sim.variance,
                closed_form: closed_form_variance(sigma_sq, horizon),
                mean: sim.mean,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> LineFit {
    assert!(xs.len() == ys.len() && xs.len() >= 2);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    LineFit { slope, intercept, r_squared }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioMode {
    /// Numerator recomputed dense: the statistical-correction ratio.
    Ir,
    /// Numerator recomputed under the rollout's shadow mask.
    Smd,
}

#[derive(Debug, Clone, Copy)]
pub struct RatioVariancePoint {
    pub length: usize,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Sample variance across rollouts of the cumulative evaluation-over-
/// behavior probability ratio, at each requested generation length.
pub fn measure_policy_ratio_variance(
    params: &Parameters,
    prompts: &[Vec<Token>],
    lengths: &[usize],
    rollouts_per_prompt: usize,
    mode: RatioMode,
    rollout: &RolloutConfig,
    seed: u64,
) -> Result<Vec<RatioVariancePoint>, LabError> {
    let vocab = params.config.vocab_size;
    lengths
        .iter()
        .map(|&length| {
            let mut seeder = stream_rng(seed, Stream::VarLab, length as u64, u64::MAX);
            let mut ratios = Vec::with_capacity(prompts.len() * rollouts_per_prompt);
            let config =
                RolloutConfig { max_new_tokens: length, stop_token: None, ..rollout.clone() };
            for prompt in prompts {
                for _ in 0..rollouts_per_prompt {
                    let traj = generate_sparse(params, prompt, &config, seeder.gen())?;
                    let tokens = traj.full_tokens();
                    let logits = match mode {
                        RatioMode::Ir => forward_dense(params, &tokens)?,
                        RatioMode::Smd => forward_shadow(params, &tokens, &traj.mask)?,
                    };
                    let lps = recompute_logprobs(
                        &logits,
                        vocab,
                        prompt.len(),
                        &traj.generated,
                        config.temperature,
                    );
                    let log_rho: f64 = lps
                        .iter()
                        .zip(&traj.behavior_logprob)
                        .map(|(a, b)| a - b)
                        .sum();
                    ratios.push(log_rho.exp());
                }
            }
            let n = ratios.len() as f64;
            let mean = ratios.iter().sum::<f64>() / n;
            let variance = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
            Ok(RatioVariancePoint { length, mean, variance })
        })
        .collect()
}

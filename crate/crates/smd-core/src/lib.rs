//! Desk-scale laboratory for RL training over KV-cache-compressed rollouts.
//!
//! A tiny decoder-only transformer generates trajectories under cache
//! eviction while recording which keys each query could see (the shadow
//! mask). The learner replays that mask to recover the behavior policy's
//! log-probabilities exactly, so importance ratios are identically 1, and
//! distills the dense policy into the masked one. Baselines (naive dense
//! recompute, importance reweighting, rejection sampling) and a variance
//! simulator quantify what the mask buys.

pub mod harness;
pub mod kvcache;
pub mod learner;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod rollout;
pub mod tasks;
pub mod variance_lab;

//! Randomized invariant checks for the pieces with algebraic contracts:
//! masked softmax, budget enforcement, shadow-mask round-trips, rewards,
//! and advantage normalization.

use proptest::prelude::*;

use smd_core::kvcache::{
    enforce_budget, EvictionPolicy, KVCache, ShadowMask, ShadowMaskRecord, NEVER_EVICTED,
};
use smd_core::learner::compute_advantages;
use smd_core::numcore::{Tape, Tensor};
use smd_core::rng::{stream_rng, Stream};
use smd_core::tasks::{make_instance, reward, TaskSpec};

fn logits_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, rows * cols)
}

proptest! {
    // every visible row of a masked softmax is a distribution; masked
    // slots are exact zeros
    #[test]
    fn masked_softmax_rows_normalize(
        t in 2usize..6,
        raw in logits_strategy(6, 6),
        mask_bits in prop::collection::vec(any::<bool>(), 36),
    ) {
        let logits: Vec<f64> = raw[..t * t].to_vec();
        let mut grid = vec![false; t * t];
        for q in 0..t {
            for j in 0..=q {
                // diagonal stays visible so no row degenerates
                grid[q * t + j] = j == q || mask_bits[q * 6 + j];
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![t, t], logits));
        let p = tape.softmax_masked_last(x, &grid).unwrap();
        let probs = tape.data(p);
        for q in 0..t {
            let row = &probs[q * t..(q + 1) * t];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {q} sums to {sum}");
            for j in 0..t {
                if grid[q * t + j] {
                    prop_assert!(row[j] > 0.0);
                } else {
                    prop_assert_eq!(row[j], 0.0, "masked slot must be exactly zero");
                }
            }
        }
    }

    // log_softmax agrees with softmax through exp
    #[test]
    fn log_softmax_exp_consistency(rows in 1usize..4, raw in logits_strategy(4, 5)) {
        let logits: Vec<f64> = raw[..rows * 5].to_vec();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![rows, 5], logits.clone()));
        let ls = tape.log_softmax_last(x);
        let x2 = tape.leaf(Tensor::new(vec![rows, 5], logits));
        let s = tape.softmax_last(x2).unwrap();
        let (ls, s) = (tape.data(ls).to_vec(), tape.data(s).to_vec());
        for (l, p) in ls.iter().zip(&s) {
            prop_assert!((l.exp() - p).abs() < 1e-12);
        }
    }

    // heavy-hitter enforcement meets the budget exactly, never drops the
    // protected recent window, and is idempotent
    #[test]
    fn budget_enforcement_invariants(
        n in 2usize..40,
        budget_frac in 0.1f64..1.0,
        window in 0usize..8,
        scores in prop::collection::vec(0.0f64..10.0, 40),
    ) {
        let budget = ((n as f64 * budget_frac).ceil() as usize).clamp(1, n);
        let mut cache = KVCache::new(1, 1, 2);
        for p in 0..n {
            cache.push(0, 0, vec![0.0; 2], vec![0.0; 2], p);
        }
        cache.budget = budget;
        let policy = EvictionPolicy::HeavyHitter { window };
        let grid = vec![vec![scores[..n].to_vec()]];
        let evicted = enforce_budget(&mut cache, &policy, Some(&grid), n).unwrap();

        let head = &cache.heads[0][0];
        prop_assert_eq!(head.retained_count(), budget.min(n));
        prop_assert_eq!(evicted[0][0].len(), n.saturating_sub(budget));
        let protected = window.min(budget);
        for e in head.entries.iter().rev().take(protected) {
            prop_assert!(e.retained, "recent window position {} was evicted", e.position);
        }
        // evicted + retained partition the original positions
        let mut all: Vec<usize> = evicted[0][0].clone();
        all.extend(head.entries.iter().filter(|e| e.retained).map(|e| e.position));
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());

        let again = enforce_budget(&mut cache, &policy, Some(&grid), n + 1).unwrap();
        prop_assert!(again[0][0].is_empty(), "second enforcement must be a no-op");
    }

    // record round-trip preserves the mask, and evictions obey causality:
    // a key is visible to strictly earlier decode queries only
    #[test]
    fn shadow_mask_roundtrip_and_causality(
        seq in 6usize..20,
        prompt in 2usize..6,
        picks in prop::collection::vec((0usize..20, 1usize..20), 0..12),
    ) {
        let mut mask = ShadowMask::new(1, 2, prompt);
        mask.grow_to(seq);
        for (key, off) in picks {
            let key = key % (seq - 1);
            let step = (key + off).min(seq - 1).max(key + 1);
            if step >= seq || mask.evicted_at[0][0][key] != NEVER_EVICTED {
                continue;
            }
            mask.record_eviction(0, 0, &[key], step).unwrap();
        }
        let rec = ShadowMaskRecord::from(&mask);
        let back = ShadowMask::from(&rec);
        prop_assert_eq!(&mask.evicted_at, &back.evicted_at);
        prop_assert_eq!(mask.prompt_len, back.prompt_len);

        for key in 0..seq {
            let t = mask.evicted_at[0][0][key];
            for q in key..seq {
                let want = q < prompt || t == NEVER_EVICTED || (q as u32) < t;
                prop_assert_eq!(mask.visible(0, 0, q, key), want);
            }
            // untouched head stays fully causal
            prop_assert!(mask.visible(0, 1, seq - 1, key));
        }
    }

    // rewards live in [0,1], the oracle scores 1, and instances are a
    // pure function of the rng stream
    #[test]
    fn reward_bounds_and_instance_determinism(
        seed in 0u64..1000,
        guess in prop::collection::vec(0u16..16, 0..6),
        pairs in 2usize..4,
    ) {
        let spec = TaskSpec { n_pairs: pairs, ..Default::default() };
        let inst = make_instance(&spec, &mut stream_rng(seed, Stream::Task, 0, 0));
        let inst2 = make_instance(&spec, &mut stream_rng(seed, Stream::Task, 0, 0));
        prop_assert_eq!(&inst.prompt, &inst2.prompt);
        prop_assert_eq!(&inst.oracle, &inst2.oracle);
        let r = reward(&inst, &guess);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(reward(&inst, &inst.oracle), 1.0);
    }

    // advantages mean-center exactly and preserve reward order
    #[test]
    fn advantage_centering_and_order(
        rewards in prop::collection::vec(0.0f64..1.0, 2..9),
    ) {
        let adv = compute_advantages(&rewards);
        let mean: f64 = adv.iter().sum::<f64>() / adv.len() as f64;
        prop_assert!(mean.abs() < 1e-9, "advantage mean {mean}");
        for i in 0..rewards.len() {
            for j in 0..rewards.len() {
                if rewards[i] > rewards[j] {
                    prop_assert!(adv[i] > adv[j], "order must be preserved");
                }
            }
        }
    }
}

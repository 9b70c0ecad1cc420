//! KV cache with pluggable eviction, eviction-timestamp shadow masks, and a
//! byte ledger that reproduces the slice-vs-mask allocation spike.
//!
//! Eviction never physically removes entries during a rollout; it clears a
//! `retained` flag. Keeping evicted entries in place (weight exactly 0 in the
//! masked softmax) makes the incremental pass reproduce the batched masked
//! pass float-for-float. Physical compaction exists only for the memory
//! bench, where its allocation spike is the point.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("eviction budget must be at least 1")]
    BudgetTooSmall,
    #[error("heavy-hitter eviction requires attention scores")]
    MissingScores,
    #[error("key {key} in layer {layer} head {head} evicted twice")]
    DoubleEviction { layer: usize, head: usize, key: usize },
}

/// Marks a key that stays visible forever.
pub const NEVER_EVICTED: u32 = u32::MAX;

// ── Eviction policies ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EvictionPolicy {
    /// No eviction; the dense baseline.
    None,
    /// Keep the highest accumulated-attention keys (plus a protected window
    /// of the most recent ones). SnapKV-style scoring.
    HeavyHitter { window: usize },
    /// Keep only the most recent keys.
    Recent,
    /// Keep a uniform random subset that always includes the current token.
    Random { seed: u64 },
}

impl EvictionPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            EvictionPolicy::None => "none",
            EvictionPolicy::HeavyHitter { .. } => "heavy_hitter",
            EvictionPolicy::Recent => "recent",
            EvictionPolicy::Random { .. } => "random",
        }
    }
}

// ── Cache storage ──

#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub position: usize,
    pub retained: bool,
}

#[derive(Debug, Clone, Default)]
pub struct HeadCache {
    pub entries: Vec<CacheEntry>,
}

impl HeadCache {
    pub fn retained_count(&self) -> usize {
        self.entries.iter().filter(|e| e.retained).count()
    }
}

#[derive(Debug, Clone)]
pub struct KVCache {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// Max retained entries per head; `usize::MAX` until a rollout sets it.
    pub budget: usize,
    pub heads: Vec<Vec<HeadCache>>,
}

/// Ledger bytes for one cached entry: key + value vectors of f64.
pub fn entry_bytes(d_head: usize) -> u64 {
    (2 * d_head * 8) as u64
}

impl KVCache {
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize) -> Self {
        KVCache {
            n_layers,
            n_heads,
            d_head,
            budget: usize::MAX,
            heads: vec![vec![HeadCache::default(); n_heads]; n_layers],
        }
    }

    pub fn push(&mut self, layer: usize, head: usize, key: Vec<f64>, value: Vec<f64>, position: usize) {
        debug_assert_eq!(key.len(), self.d_head);
        debug_assert_eq!(value.len(), self.d_head);
        let entries = &mut self.heads[layer][head].entries;
        if let Some(last) = entries.last() {
            debug_assert!(position > last.position, "positions must increase");
        }
        entries.push(CacheEntry { key, value, position, retained: true });
    }

    /// Physical entry count across all layers and heads.
    pub fn total_entries(&self) -> usize {
        self.heads.iter().flatten().map(|h| h.entries.len()).sum()
    }

    pub fn total_retained(&self) -> usize {
        self.heads.iter().flatten().map(|h| h.retained_count()).sum()
    }

    pub fn footprint_bytes(&self) -> u64 {
        self.total_entries() as u64 * entry_bytes(self.d_head)
    }
}

// ── Shadow mask ──

/// Per layer, per head: for every key position, the first query position
/// that can no longer see it (`NEVER_EVICTED` if none). Prompt queries are
/// exempt; they always see the full causal prefix.
#[derive(Debug, Clone)]
pub struct ShadowMask {
    pub n_layers: usize,
    pub n_heads: usize,
    pub prompt_len: usize,
    pub evicted_at: Vec<Vec<Vec<u32>>>,
}

impl ShadowMask {
    pub fn new(n_layers: usize, n_heads: usize, prompt_len: usize) -> Self {
        ShadowMask {
            n_layers,
            n_heads,
            prompt_len,
            evicted_at: vec![vec![Vec::new(); n_heads]; n_layers],
        }
    }

    /// All-visible mask over a fixed sequence length (the dense case).
    pub fn all_visible(n_layers: usize, n_heads: usize, prompt_len: usize, seq_len: usize) -> Self {
        let mut m = ShadowMask::new(n_layers, n_heads, prompt_len);
        m.grow_to(seq_len);
        m
    }

    pub fn seq_len(&self) -> usize {
        self.evicted_at[0][0].len()
    }

    /// Extends every head's timestamp row to cover positions < seq_len.
    pub fn grow_to(&mut self, seq_len: usize) {
        for layer in &mut self.evicted_at {
            for head in layer {
                while head.len() < seq_len {
                    head.push(NEVER_EVICTED);
                }
            }
        }
    }

    pub fn record_eviction(
        &mut self,
        layer: usize,
        head: usize,
        evicted: &[usize],
        step: usize,
    ) -> Result<(), CacheError> {
        for &key in evicted {
            debug_assert!(step > key, "a key must outlive its creation step");
            let slot = &mut self.evicted_at[layer][head][key];
            if *slot != NEVER_EVICTED {
                return Err(CacheError::DoubleEviction { layer, head, key });
            }
            *slot = step as u32;
        }
        Ok(())
    }

    /// Can query position q see key position j in this layer/head?
    pub fn visible(&self, layer: usize, head: usize, q: usize, j: usize) -> bool {
        if j > q {
            return false;
        }
        if q < self.prompt_len {
            return true;
        }
        (q as u32) < self.evicted_at[layer][head][j]
    }

    /// Row-major [T, T] visibility for a batched forward pass.
    pub fn visibility_grid(&self, layer: usize, head: usize, seq_len: usize) -> Vec<bool> {
        let mut grid = vec![false; seq_len * seq_len];
        for q in 0..seq_len {
            for j in 0..seq_len {
                grid[q * seq_len + j] = self.visible(layer, head, q, j);
            }
        }
        grid
    }

    /// Key positions visible to query q (ascending).
    pub fn visible_set(&self, layer: usize, head: usize, q: usize) -> Vec<usize> {
        (0..=q).filter(|&j| self.visible(layer, head, q, j)).collect()
    }
}

/// Trajectory-file form of a mask: only finitely-evicted keys are listed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowMaskRecord {
    pub n_layers: usize,
    pub n_heads: usize,
    pub prompt_len: usize,
    pub seq_len: usize,
    pub evictions: Vec<Vec<Vec<(u32, u32)>>>,
}

impl From<&ShadowMask> for ShadowMaskRecord {
    fn from(m: &ShadowMask) -> Self {
        let evictions = m
            .evicted_at
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|head| {
                        head.iter()
                            .enumerate()
                            .filter(|(_, &s)| s != NEVER_EVICTED)
                            .map(|(j, &s)| (j as u32, s))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        ShadowMaskRecord {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            prompt_len: m.prompt_len,
            seq_len: m.seq_len(),
            evictions,
        }
    }
}

impl From<&ShadowMaskRecord> for ShadowMask {
    fn from(r: &ShadowMaskRecord) -> Self {
        let mut m = ShadowMask::new(r.n_layers, r.n_heads, r.prompt_len);
        m.grow_to(r.seq_len);
        for (l, layer) in r.evictions.iter().enumerate() {
            for (h, head) in layer.iter().enumerate() {
                for &(j, s) in head {
                    m.evicted_at[l][h][j as usize] = s;
                }
            }
        }
        m
    }
}

// ── Heavy-hitter scoring ──

/// Sliding window of the most recent attention rows for one layer/head.
/// Each row is indexed by absolute key position.
#[derive(Debug, Clone)]
pub struct AttentionWindow {
    w: usize,
    rows: VecDeque<Vec<f64>>,
}

impl AttentionWindow {
    pub fn new(w: usize) -> Self {
        AttentionWindow { w: w.max(1), rows: VecDeque::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        if self.rows.len() == self.w {
            self.rows.pop_front();
        }
        self.rows.push_back(row);
    }

    pub fn rows(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.rows.iter()
    }
}

/// score[j] = attention mass key j received from the windowed queries.
/// Rows shorter than j (older than the key) contribute nothing.
pub fn score_heavy_hitters<'a>(
    n_keys: usize,
    recent_rows: impl Iterator<Item = &'a Vec<f64>>,
) -> Vec<f64> {
    let mut scores = vec![0.0; n_keys];
    for row in recent_rows {
        for j in 0..row.len().min(n_keys) {
            scores[j] += row[j];
        }
    }
    scores
}

// ── Budget enforcement ──

/// Per-head heavy-hitter scores, indexed [layer][head][key position].
pub type ScoreGrid = Vec<Vec<Vec<f64>>>;

/// Re-applies the retention budget to every head, returning the evicted key
/// positions per [layer][head]. `current_step` seeds the Random policy;
/// recording the evictions in a mask is the caller's job.
pub fn enforce_budget(
    cache: &mut KVCache,
    policy: &EvictionPolicy,
    scores: Option<&ScoreGrid>,
    current_step: usize,
) -> Result<Vec<Vec<Vec<usize>>>, CacheError> {
    let mut evicted = vec![vec![Vec::new(); cache.n_heads]; cache.n_layers];
    if matches!(policy, EvictionPolicy::None) || cache.budget == usize::MAX {
        return Ok(evicted);
    }
    if cache.budget < 1 {
        return Err(CacheError::BudgetTooSmall);
    }
    for l in 0..cache.n_layers {
        for h in 0..cache.n_heads {
            let head_scores = match (policy, scores) {
                (EvictionPolicy::HeavyHitter { .. }, Some(grid)) => Some(grid[l][h].as_slice()),
                (EvictionPolicy::HeavyHitter { .. }, None) => return Err(CacheError::MissingScores),
                _ => None,
            };
            evicted[l][h] =
                enforce_head(cache, l, h, policy, head_scores, current_step)?;
        }
    }
    Ok(evicted)
}

fn enforce_head(
    cache: &mut KVCache,
    layer: usize,
    head: usize,
    policy: &EvictionPolicy,
    scores: Option<&[f64]>,
    current_step: usize,
) -> Result<Vec<usize>, CacheError> {
    let budget = cache.budget;
    let entries = &mut cache.heads[layer][head].entries;
    let retained: Vec<usize> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.retained)
        .map(|(i, _)| i)
        .collect();
    if retained.len() <= budget {
        return Ok(Vec::new());
    }

    // indices into `entries`, ascending position order by construction
    let keep: Vec<usize> = match policy {
        EvictionPolicy::None => unreachable!("handled by caller"),
        EvictionPolicy::Recent => retained[retained.len() - budget..].to_vec(),
        EvictionPolicy::HeavyHitter { window } => {
            let scores = scores.expect("checked by caller");
            let protected = (*window).min(budget);
            let (older, recent) = retained.split_at(retained.len() - protected);
            let mut ranked: Vec<usize> = older.to_vec();
            // highest score first; ties fall to the lower key position
            ranked.sort_by(|&a, &b| {
                let (sa, sb) = (score_at(scores, entries[a].position), score_at(scores, entries[b].position));
                sb.partial_cmp(&sa)
                    .expect("attention scores are finite")
                    .then(entries[a].position.cmp(&entries[b].position))
            });
            let mut keep: Vec<usize> = ranked[..budget - protected].to_vec();
            keep.extend_from_slice(recent);
            keep.sort_unstable();
            keep
        }
        EvictionPolicy::Random { seed } => {
            let mut rng = stream_rng(
                *seed,
                Stream::Evict,
                current_step as u64,
                (layer * cache.n_heads + head) as u64,
            );
            // current token is pinned; sample the rest without replacement
            let mut pool: Vec<usize> = retained[..retained.len() - 1].to_vec();
            let mut keep = vec![*retained.last().expect("nonempty")];
            for _ in 0..budget - 1 {
                let pick = rand::Rng::gen_range(&mut rng, 0..pool.len());
                keep.push(pool.swap_remove(pick));
            }
            keep.sort_unstable();
            keep
        }
    };

    let keep_set: Vec<bool> = {
        let mut s = vec![false; entries.len()];
        for &i in &keep {
            s[i] = true;
        }
        s
    };
    let mut evicted_positions = Vec::new();
    for &i in &retained {
        if !keep_set[i] {
            entries[i].retained = false;
            evicted_positions.push(entries[i].position);
        }
    }
    Ok(evicted_positions)
}

fn score_at(scores: &[f64], position: usize) -> f64 {
    scores.get(position).copied().unwrap_or(0.0)
}

// ── Memory ledger ──

#[derive(Debug, Clone)]
pub struct LedgerEvent {
    pub label: &'static str,
    /// Positive for alloc, negative for free.
    pub delta_bytes: i64,
}

/// Tracks live and peak bytes for cache-shaped allocations. The starting
/// balance is the cache footprint itself, so ratios read directly as
/// multiples of the original cache size.
#[derive(Debug, Clone)]
pub struct MemoryLedger {
    pub events: Vec<LedgerEvent>,
    live_bytes: u64,
    peak_bytes: u64,
}

impl MemoryLedger {
    pub fn new(baseline_bytes: u64) -> Self {
        MemoryLedger { events: Vec::new(), live_bytes: baseline_bytes, peak_bytes: baseline_bytes }
    }

    pub fn alloc(&mut self, label: &'static str, bytes: u64) {
        self.events.push(LedgerEvent { label, delta_bytes: bytes as i64 });
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    pub fn free(&mut self, label: &'static str, bytes: u64) {
        assert!(bytes <= self.live_bytes, "ledger underflow: freeing {bytes} of {}", self.live_bytes);
        self.events.push(LedgerEvent { label, delta_bytes: -(bytes as i64) });
        self.live_bytes -= bytes;
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }
}

/// Peak bytes as a multiple of the baseline footprint.
pub fn ledger_peak_ratio(ledger: &MemoryLedger, baseline_bytes: u64) -> f64 {
    assert!(baseline_bytes > 0);
    ledger.peak_bytes() as f64 / baseline_bytes as f64
}

/// Compacts every head down to its retained entries the way a tensor slice
/// does it: the new buffer is allocated while the old one is still live.
pub fn physical_slice(cache: &mut KVCache, ledger: &mut MemoryLedger) {
    let eb = entry_bytes(cache.d_head);
    let old_bytes = cache.total_entries() as u64 * eb;
    let new_bytes = cache.total_retained() as u64 * eb;
    ledger.alloc("slice_copy", new_bytes);
    for layer in &mut cache.heads {
        for head in layer {
            head.entries.retain(|e| e.retained);
        }
    }
    ledger.free("slice_old", old_bytes);
}

/// The in-place alternative: entries stay put, eviction lives in the
/// retained flags, and the only new allocation is a 1-bit-per-entry bitmap.
pub fn mask_simulate(cache: &KVCache, ledger: &mut MemoryLedger) {
    let bits = cache.total_entries() as u64;
    ledger.alloc("mask_bitmap", bits.div_ceil(8));
}

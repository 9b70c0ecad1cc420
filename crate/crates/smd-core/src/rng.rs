//! Seed derivation: every random decision in a run draws from its own
//! ChaCha8 stream keyed by (run seed, purpose, two context values), so
//! adding draws in one place never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Task,
    RolloutSample,
    Evict,
    VarLab,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x1,
            Stream::Task => 0x2,
            Stream::RolloutSample => 0x3,
            Stream::Evict => 0x4,
            Stream::VarLab => 0x5,
            Stream::Eval => 0x6,
        }
    }
}

/// Independent RNG for (seed, stream, a, b). SplitMix64 over the packed key
/// fills the 32-byte ChaCha seed.
pub fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.tag().wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(a.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(b.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(&mut state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Standard normal via Box-Muller; uses two uniform draws per sample.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

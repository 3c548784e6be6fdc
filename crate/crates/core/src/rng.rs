//! Deterministic RNG stream derivation.
//!
//! Every source of randomness in the crate is a [`ChaCha8Rng`] derived from a
//! master seed plus a stream tag, so a whole run is reproducible from one
//! 64-bit seed while independent components (environments, evaluation seeds,
//! per-study streams) never share a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step, used to expand (seed, stream) pairs into full ChaCha keys.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG for `(master, stream)`.
pub fn derive_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut state = master ^ stream.wrapping_mul(0xa076_1d64_78bd_642f);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Stable 64-bit FNV-1a hash, used to derive per-study RNG streams from ids.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

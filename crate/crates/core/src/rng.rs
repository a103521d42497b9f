//! Deterministic random streams.
//!
//! All randomness in a run flows from one `u64` seed, split hierarchically
//! into independent ChaCha8 streams: parameter init, per-step data sampling,
//! generation, and corpus synthesis each get their own stream so that, for
//! example, changing the sampling seed never perturbs initialization.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 0x01;
pub const STREAM_DATA: u64 = 0x02;
pub const STREAM_SAMPLE: u64 = 0x03;
pub const STREAM_CORPUS: u64 = 0x04;

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A ChaCha8 stream keyed by `(seed, tags...)`. Distinct tag paths give
/// statistically independent streams; identical paths give identical streams.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x5bf0_3635_dcb2_9e8c;
    let mut mixed = splitmix(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x2545_f491_4f6c_dd1d);
        mixed ^= splitmix(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        mixed = splitmix(&mut state) ^ mixed.rotate_left(17);
        chunk.copy_from_slice(&mixed.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Standard normal via Box-Muller; two uniforms per draw keep the stream
/// consumption rate fixed.
pub fn next_normal(rng: &mut ChaCha8Rng) -> f32 {
    use rand::Rng;
    let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
    let u2: f32 = rng.gen::<f32>();
    let r = libm::sqrtf(-2.0 * libm::logf(u1));
    r * libm::cosf(2.0 * core::f32::consts::PI * u2)
}

/// Fill a slice with `N(0, std)` draws.
pub fn fill_normal(rng: &mut ChaCha8Rng, std: f32, out: &mut [f32]) {
    for v in out.iter_mut() {
        *v = std * next_normal(rng);
    }
}

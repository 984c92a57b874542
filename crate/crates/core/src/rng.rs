//! Counter-based normal variates.
//!
//! Every variate is addressed by `(seed, stream, index)`: the ChaCha8 key is
//! derived from the seed, the ChaCha stream id is the stream, and variate
//! `index` consumes keystream words `[4 index, 4 index + 4)`. Any worker can
//! therefore regenerate any variate without coordination.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS_PER_NORMAL: u128 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes several identifiers (sample index, purpose tag, refinement level)
/// into one stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    let mut h = 0x6A09_E667_F3BC_C908u64;
    for &p in parts {
        h = splitmix(h ^ splitmix(p));
    }
    h
}

/// Stream tags used across the crate so that different consumers of the
/// same sample index never share variates.
pub mod tag {
    pub const BROWNIAN: u64 = 1;
    pub const BRIDGE: u64 = 2;
    pub const DIRECTIONS: u64 = 3;
    pub const SAMPLE: u64 = 4;
}

/// Sequential reader over one `(seed, stream)` pair.
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_mut(8) {
            s = splitmix(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        NormalStream { rng }
    }

    /// Positions the reader so that the next variate has the given index.
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(index as u128 * WORDS_PER_NORMAL);
    }

    pub fn next_normal(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform variate on [0,1) drawn from the same keystream slot layout.
    pub fn next_uniform(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let _ = self.rng.next_u64();
        (a >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// The variate with coordinates `(seed, stream, index)`.
pub fn normal_at(seed: u64, stream: u64, index: u64) -> f64 {
    let mut s = NormalStream::new(seed, stream);
    s.seek(index);
    s.next_normal()
}

/// Fills `out` with variates `start, start+1, ...` of one stream.
pub fn fill_normals(seed: u64, stream: u64, start: u64, out: &mut [f64]) {
    let mut s = NormalStream::new(seed, stream);
    s.seek(start);
    for v in out.iter_mut() {
        *v = s.next_normal();
    }
}

//! Named, independently seeded random streams.
//!
//! A stream is a ChaCha8 generator keyed by `(global seed, name)`. Adding a new
//! stream, or drawing more from one stream, never shifts any other stream.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    h
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        self.substream(name, 0)
    }

    /// Stream `name` specialised by an index, e.g. an example number.
    pub fn substream(&self, name: &str, index: u64) -> StreamRng {
        let mut h = fnv1a(&self.seed.to_le_bytes(), 0xCBF2_9CE4_8422_2325);
        h = fnv1a(name.as_bytes(), h);
        h = fnv1a(&index.to_le_bytes(), h);
        let mut key = [0u8; 32];
        let mut st = h;
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix(&mut st).to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

/// Serializable position of a stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub key: Vec<u8>,
    /// Word position as a decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &StreamRng) -> Self {
        Self {
            key: rng.get_seed().to_vec(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<StreamRng> {
        let key: [u8; 32] = self.key.as_slice().try_into().ok()?;
        let pos: u128 = self.word_pos.parse().ok()?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_word_pos(pos);
        Some(rng)
    }
}

pub fn normal_vec<S: Scalar, R: RngCore>(rng: &mut R, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            S::c(x)
        })
        .collect()
}

/// Uniform draws in `[lo, hi)`; a point mass when `lo == hi`.
pub fn uniform_vec<S: Scalar, R: RngCore>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<S> {
    if lo == hi {
        return vec![S::c(lo); n];
    }
    (0..n).map(|_| S::c(rng.random_range(lo..hi))).collect()
}

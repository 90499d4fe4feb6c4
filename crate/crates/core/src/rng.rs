//! Deterministic randomness.
//!
//! Every randomized operation takes a [`SeedSpec`] and derives its generator
//! from `(master_seed, stream_label, index)`. The derivation packs the three
//! parts into distinct bytes of the ChaCha seed, so distinct indices never
//! share a stream.

use alloc::format;
use alloc::string::String;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_label: String,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_label: impl Into<String>) -> Self {
        Self {
            master_seed,
            stream_label: stream_label.into(),
        }
    }

    /// A sub-stream labelled `"{self}/{label}"`.
    pub fn child(&self, label: &str) -> Self {
        Self {
            master_seed: self.master_seed,
            stream_label: format!("{}/{}", self.stream_label, label),
        }
    }

    /// Sub-stream for repetition (or block, tree, fold) `index`.
    pub fn indexed(&self, label: &str, index: u64) -> Self {
        Self {
            master_seed: self.master_seed,
            stream_label: format!("{}/{}#{}", self.stream_label, label, index),
        }
    }

    /// Generator for `(master_seed, stream_label, index)`.
    pub fn rng_at(&self, index: u64) -> Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.master_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&fnv1a64(self.stream_label.as_bytes()).to_le_bytes());
        seed[16..24].copy_from_slice(&index.to_le_bytes());
        seed[24..].copy_from_slice(&fnv1a64_alt(self.stream_label.as_bytes()).to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    pub fn rng(&self) -> Rng {
        self.rng_at(0)
    }

    /// A 64-bit seed drawn from this stream, for APIs keyed by a plain integer.
    pub fn derive_u64(&self) -> u64 {
        use rand::RngCore;
        self.rng().next_u64()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// Second, independent hash of the label so two labels colliding under FNV
// still land on different seeds.
fn fnv1a64_alt(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0x84222325_cbf29ce4;
    for &b in bytes.iter().rev() {
        h ^= (b as u64).rotate_left(17);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

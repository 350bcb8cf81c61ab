//! Seed derivation. One global seed fans out into independent streams
//! (split shuffling, dropout masks, weight init, augmentation choice) so that
//! changing how much randomness one consumer draws never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams derived from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split,
    Dropout,
    Init,
    Augment,
    Shuffle,
    Synthetic,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Split => "split",
            Stream::Dropout => "dropout",
            Stream::Init => "init",
            Stream::Augment => "augment",
            Stream::Shuffle => "shuffle",
            Stream::Synthetic => "synthetic",
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-seed for `stream`, further keyed by `index` (epoch, batch, ...).
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    // FNV-1a over the stream tag keeps streams stable if variants are reordered.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.tag().bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(index))
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

//! Counter-keyed random streams.
//!
//! Every draw is addressed by `(seed, namespace, counter)`: the ChaCha key is
//! derived from the seed and namespace, the counter selects the ChaCha stream.
//! Two consumers asking for the same address get the same numbers without
//! sharing any state, which is how coupled SGLD chains share their noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gaussian SGLD noise.
pub const NOISE: u64 = 0x6e6f_6973_6500_0001;
/// Minibatch index schedule.
pub const MINIBATCH: u64 = 0x6261_7463_6800_0002;
/// Dataset sampling.
pub const DATASET: u64 = 0x6461_7461_0000_0003;
/// Language generation.
pub const LANGUAGE: u64 = 0x6c61_6e67_0000_0004;
/// Chain initialisation and model fitting.
pub const INIT: u64 = 0x696e_6974_0000_0005;
/// Randomized SVD sketches and Monte Carlo estimates.
pub const SKETCH: u64 = 0x736b_6574_6300_0006;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for the stream at `(seed, namespace, counter)`.
pub fn stream(seed: u64, namespace: u64, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let a = splitmix(seed ^ namespace);
    let b = splitmix(a ^ namespace.rotate_left(17));
    let c = splitmix(b);
    let d = splitmix(c ^ seed);
    for (chunk, word) in key.chunks_mut(8).zip([a, b, c, d]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(counter);
    rng
}

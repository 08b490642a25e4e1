//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream keyed by `(base seed, stream tag, index)`, so results do not depend
//! on call order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tags for independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Trim = 2,
    Mix = 3,
    Mask = 4,
    MaskNoise = 5,
    Dropout = 6,
    Init = 7,
    Quantizer = 8,
    Probe = 9,
    Perturb = 10,
    Synth = 11,
}

pub fn derive_seed(base: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream as u64)).wrapping_add(index))
}

pub fn stream_rng(base: u64, stream: Stream, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, stream, index))
}

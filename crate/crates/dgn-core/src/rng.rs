//! Seeded, platform-stable randomness.
//!
//! Every random decision in the crate is drawn from a ChaCha8 stream
//! (`rand_chacha::ChaCha8Rng`), seeded through `seed_from_u64`. Substreams
//! (per LSH round, per image id, per consumer in the training loop) derive
//! their 64-bit seed with [`derive_seed`], a SplitMix64 mix of the root seed
//! and a label hash, so consumers never share or race a stream.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Scalar;

/// The crate-wide generator. 64-bit seedable, identical output on every
/// platform for a given seed.
pub type DgnRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> DgnRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes.
fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a substream seed from a root seed and a label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a(label))
}

/// Derive a substream seed from a root seed and a numeric salt.
pub fn derive_seed_n(root: u64, salt: u64) -> u64 {
    splitmix64(root ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One standard-normal draw. Sampling happens in f64 so the stream consumed
/// from the generator is identical regardless of the target precision.
pub fn standard_normal<F: Scalar>(rng: &mut DgnRng) -> F {
    let v: f64 = StandardNormal.sample(rng);
    F::of_f64(v)
}

/// Truncated normal: resample anything outside two standard deviations.
pub fn trunc_normal<F: Scalar>(rng: &mut DgnRng, std: f64) -> F {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return F::of_f64(v * std);
        }
    }
}

/// Uniform integer in `[0, upper)`.
pub fn uniform_index(rng: &mut DgnRng, upper: usize) -> usize {
    if upper <= 1 {
        return 0;
    }
    rng.gen_range(0..upper)
}

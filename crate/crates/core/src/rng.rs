//! Named, seeded random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream derived from
//! the root seed and a stream name (`agents`, `selector`, `noise`,
//! `rs-baseline`, ...), so no two consumers ever share a sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const AGENTS: &str = "agents";
pub const SELECTOR: &str = "selector";
pub const NOISE: &str = "noise";
pub const RS_BASELINE: &str = "rs-baseline";
pub const DATA: &str = "data";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the named substream `name` under `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    mix(root ^ mix(fnv1a(name.as_bytes())))
}

/// Generator for `(root, name)`, positioned on counter stream `index`.
pub fn substream(root: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root, name));
    rng.set_stream(index);
    rng
}

//! Named, seeded random streams.
//!
//! Every consumer of randomness (a client's initializer, its mini-batch
//! sampler, the partitioner, the random-selection ablation) draws from its own
//! stream derived from `(run seed, stream name, index)`. Adding a client or
//! enabling an ablation therefore never shifts the draws seen by anyone else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const STREAM_INIT: &str = "init";
pub const STREAM_SAMPLER: &str = "sampler";
pub const STREAM_SPLIT: &str = "split";
pub const STREAM_PARTITION: &str = "partition";
pub const STREAM_SPARSIFY: &str = "sparsify";
pub const STREAM_SELECTION: &str = "random-selection";
pub const STREAM_PEER_GROUP: &str = "peer-group";
pub const STREAM_DATA: &str = "data";

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream for `(seed, name, index)`.
pub fn stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let key = splitmix(seed ^ splitmix(fnv1a(name)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Same as [`stream`] with a two-part index, e.g. `(round, client)`.
pub fn stream2(seed: u64, name: &str, major: u64, minor: u64) -> StreamRng {
    stream(seed, name, splitmix(major).wrapping_add(minor))
}

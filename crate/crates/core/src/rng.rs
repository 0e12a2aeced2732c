//! Named, indexed random streams derived from one master seed.
//!
//! Every consumer of randomness (corpus synthesis, parameter init, epoch
//! shuffles, per-step shadow injection) draws from its own stream, so any of
//! them can be replayed without running the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const CORPUS_TRAIN: &str = "corpus/train";
pub const CORPUS_EVAL: &str = "corpus/eval";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const INJECTION: &str = "injection";
pub const HELD_OUT: &str = "held_out";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        SeedStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for item `index` of the stream `name`.
    pub fn stream(&self, name: &str, index: u64) -> Rng {
        let mut rng = Rng::seed_from_u64(splitmix(self.seed ^ fnv1a(name.as_bytes())));
        rng.set_stream(index);
        rng
    }

    /// Seed value recorded for item `index` of `name`, e.g. in manifests.
    pub fn item_seed(&self, name: &str, index: u64) -> u64 {
        splitmix(splitmix(self.seed ^ fnv1a(name.as_bytes())) ^ index)
    }
}

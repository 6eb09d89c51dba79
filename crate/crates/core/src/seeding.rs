//! Every random stream derives from one seed plus a fixed stream id, so adding
//! a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: u64 = 1;
pub const SHUFFLE: u64 = 2;
pub const NOISE: u64 = 3;
pub const EVAL: u64 = 4;
pub const SPLIT: u64 = 5;
pub const SYNTHETIC: u64 = 6;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

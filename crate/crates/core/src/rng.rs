//! Named, seedable random streams.
//!
//! Every consumer of randomness (init, dropout, sampling, data order)
//! derives its own generator from the run seed and a stream name, so
//! toggling one component never shifts another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn substream(seed: u64, name: &str) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    StreamRng::from_seed(h.finalize().into())
}

//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Well-known substream names.
pub mod stream {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const SHUFFLE: &str = "shuffle";
    pub const BOOTSTRAP: &str = "bootstrap";
    pub const STREAM_ORDER: &str = "stream-order";
    pub const SPLIT: &str = "split";
}

/// Seed of the substream `name` under `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed for item `index` of the substream `name`, e.g. one patient or one
/// bootstrap resample.
pub fn derive_indexed_seed(root: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn substream(root: u64, name: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name))
}

pub fn indexed_substream(root: u64, name: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_indexed_seed(root, name, index))
}

//! Counter-based seed derivation: one master seed, independent ChaCha
//! streams per (component, index).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Component {
    Task = 1,
    Init = 2,
    Shuffle = 3,
    SourceData = 4,
    Holdout = 5,
    Stream = 6,
    Augment = 7,
}

pub fn derive_rng(seed: u64, component: Component, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((component as u64) << 32) | u64::from(index));
    rng
}

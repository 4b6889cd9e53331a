//! Counter-based seeding: every random stream is a pure function of
//! `(seed, object, view, purpose)`, so results do not depend on the order in
//! which views or objects are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for independent random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Scene = 1,
    Center = 2,
    EdgeMap = 3,
    Orientation = 4,
    Policy = 5,
    Bootstrap = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the key components into one 64-bit seed.
pub fn derive_seed(seed: u64, object: u64, view: u64, stream: Stream) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ object.wrapping_mul(0xA24B_AED4_963E_E407));
    h = splitmix64(h ^ view.wrapping_mul(0x9FB2_1C65_1E98_DF25));
    splitmix64(h ^ (stream as u64))
}

pub fn stream_rng(seed: u64, object: u64, view: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, object, view, stream))
}

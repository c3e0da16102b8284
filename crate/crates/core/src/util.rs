//! Small deterministic helpers shared across modules.

use rand::{Rng, RngExt};

/// FNV-1a 64-bit hasher. Used for digests and seed derivation so results do
/// not depend on `std`'s randomized hasher.
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;

    pub fn new() -> Self {
        Fnv1a(Self::OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

/// Derives a child seed from a root seed and a label path. Each distinct
/// label sequence yields an independent deterministic stream.
pub fn derive_seed(root: u64, labels: &[&str]) -> u64 {
    let mut h = Fnv1a::new();
    h.write_u64(root);
    for label in labels {
        h.write(label.as_bytes());
        h.write(&[0x1f]); // separator so ["ab","c"] != ["a","bc"]
    }
    h.finish()
}

/// Standard normal sample via Box-Muller; deterministic given the rng state.
pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

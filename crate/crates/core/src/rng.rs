//! Seeded random streams.
//!
//! All randomness goes through ChaCha8 seeded with a 64-bit master seed. A
//! computation indexed by `i` (a Monte-Carlo sample, a row of a rate study)
//! draws from stream `i` of that generator, so results do not depend on
//! evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::convex::RealVec;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> RealVec {
    RealVec::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

/// Uniformly distributed direction on the unit sphere.
pub fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> RealVec {
    loop {
        let v = gaussian_vector(rng, n, 1.0);
        let norm = v.norm();
        if norm > 0.0 {
            return v / norm;
        }
    }
}

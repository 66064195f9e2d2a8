//! Seeded random samples used by the statistical invariant checks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{normalized, SymMatrix};

/// Default seed for every sampled check.
pub const DEFAULT_SEED: u64 = 0x5EED;

/// Default number of samples for statistical invariant checks.
pub const DEFAULT_SAMPLES: usize = 1000;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Symmetric matrix with independent entries uniform in `[-scale, scale]`.
pub fn random_sym<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> SymMatrix {
    SymMatrix::from_fn(dim, |_, _| rng.gen_range(-scale..=scale))
}

pub fn random_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-scale..=scale)).collect()
}

/// Uniform direction on the sphere (rejection from the cube).
pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v = random_vec(rng, dim, 1.0);
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            return normalized(&v).unwrap();
        }
    }
}

/// Uniform point in the ball of the given radius around `center`.
pub fn random_in_ball<R: Rng>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    let dim = center.len();
    loop {
        let v = random_vec(rng, dim, 1.0);
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 <= 1.0 {
            return center.iter().zip(&v).map(|(c, x)| c + radius * x).collect();
        }
    }
}

/// Point with `|x - center|` uniform in `[r_in, r_out]` and uniform direction.
pub fn random_in_annulus<R: Rng>(rng: &mut R, center: &[f64], r_in: f64, r_out: f64) -> Vec<f64> {
    let dir = random_unit(rng, center.len());
    let s = rng.gen_range(r_in..=r_out);
    center.iter().zip(&dir).map(|(c, u)| c + s * u).collect()
}

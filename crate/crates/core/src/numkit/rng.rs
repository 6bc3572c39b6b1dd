//! Seeded randomness.
//!
//! Generator: ChaCha8 (`rand_chacha`), keyed by a 64-bit seed expanded with
//! SplitMix64 (`SeedableRng::seed_from_u64`) plus a 64-bit stream index.
//! Normal deviates come from `rand_distr::StandardNormal` (ziggurat). All of
//! this is pure integer/float code with pinned crate versions, so a given
//! `(seed, stream)` yields a bit-identical sample sequence on any platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::{Matrix, Vector};

/// An explicitly seeded random stream.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngState { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// One standard normal deviate.
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform index in `0..n`, for minibatch sampling.
    pub fn uniform_index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

/// SplitMix64 mixing step; used to fan a root seed out to per-cell seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-index seed derived from a root seed.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    splitmix64(root ^ splitmix64(index.wrapping_add(1)))
}

/// `rows x cols` matrix with i.i.d. `N(0, sigma^2)` entries, drawn in
/// row-major order. Entries are `sigma * z` with `z` a unit normal, so the
/// unit draws behind a matrix are recoverable by replaying the stream.
pub fn gaussian_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut RngState) -> Matrix {
    assert!(rows >= 1 && cols >= 1, "gaussian_matrix: dims must be >= 1");
    assert!(sigma >= 0.0, "gaussian_matrix: sigma must be >= 0");
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(sigma * rng.standard_normal());
    }
    Matrix::from_vec(rows, cols, data)
}

/// Vector of i.i.d. `N(0, sigma^2)` entries.
pub fn gaussian_vector(dim: usize, sigma: f64, rng: &mut RngState) -> Vector {
    let mut data = Vec::with_capacity(dim);
    for _ in 0..dim {
        data.push(sigma * rng.standard_normal());
    }
    Vector::from(data)
}

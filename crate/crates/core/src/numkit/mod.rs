//! Minimal dense linear algebra, seeded Gaussian sampling, and log-log
//! regression. Everything here is plain `f64` with a fixed operation order,
//! so results are bit-reproducible across runs and platforms.

mod fit;
mod matrix;
mod rng;

pub use fit::{loglog_fit, FitError, ScalingFit};
pub use matrix::{
    accumulate_outer_batch, dot, euclidean_norm, matmat, matvec, outer_product, transpose_matmat,
    transpose_matvec, Matrix, Vector,
};
pub use rng::{derive_seed, gaussian_matrix, gaussian_vector, splitmix64, RngState};

//! Shared random-instance builders for the benchmarks.

use ltdl_core::{DictionaryPair, Matrix, Msi, Tensor3};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn random_tensor(dims: (usize, usize, usize), seed: u64) -> Tensor3 {
    let mut r = rng(seed);
    Tensor3::from_fn(dims, |_, _, _| r.random_range(-1.0..1.0))
}

pub fn random_msi(dims: (usize, usize, usize), seed: u64) -> Msi {
    let mut r = rng(seed);
    Msi::new(Tensor3::from_fn(dims, |_, _, _| r.random_range(0.0..1.0)))
}

pub fn unit_columns(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    let mut m = Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
    for c in 0..cols {
        let norm = m.column(c).norm();
        let col = m.column(c) / norm;
        m.set_column(c, &col);
    }
    m
}

/// Dictionary pair sized like the desk-scale pipeline (7x7 window, 16
/// bands, tau = 1.5).
pub fn desk_pair(seed: u64) -> DictionaryPair {
    DictionaryPair::new(
        unit_columns(49, 74, seed),
        unit_columns(16, 24, seed + 1),
        74.0 / 49.0,
        1.5,
    )
    .expect("valid pair")
}

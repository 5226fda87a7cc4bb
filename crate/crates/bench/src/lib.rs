//! Benchmark helpers shared by the criterion targets.

use rand_chacha::ChaCha8Rng;

use safeanchor_core::rng::{normal, substream};
use safeanchor_core::Matrix;

/// Random dense matrix from a named substream.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng: ChaCha8Rng = substream(seed, "bench");
    Matrix::from_fn(rows, cols, |_, _| normal(&mut rng))
}

/// Random symmetric PSD matrix `G G^T` with inner dimension `rank`.
pub fn random_psd(n: usize, rank: usize, seed: u64) -> Matrix {
    let g = random_matrix(n, rank, seed);
    g.matmul(&g.transpose()).expect("psd build")
}

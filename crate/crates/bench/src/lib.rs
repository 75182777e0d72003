//! Input fixtures shared by the benchmarks.

use crisp_core::{EmbeddingBatch, GeoPoint, PairedBatch};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// `n` aligned pairs of `dim`-dimensional embeddings.
pub fn aligned_batch(n: usize, dim: usize, seed: u64) -> PairedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    PairedBatch::aligned(
        EmbeddingBatch::new(gaussian(&mut rng, n, dim), ids.clone()).unwrap(),
        EmbeddingBatch::new(gaussian(&mut rng, n, dim), ids).unwrap(),
        None,
    )
    .unwrap()
}

/// `n` ground items sharing `n / views` aerial items scattered over a few
/// kilometers, so that some aerial items fall within the co-location radius.
pub fn many_to_one_batch(n: usize, views: usize, dim: usize, seed: u64) -> PairedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_a = n.div_ceil(views);
    let coords: Vec<GeoPoint> = (0..n_a)
        .map(|_| GeoPoint::new(45.0 + rng.random_range(0.0..0.03), 7.0 + rng.random_range(0.0..0.03)).unwrap())
        .collect();
    let pair_index: Vec<usize> = (0..n).map(|i| i / views).collect();
    PairedBatch::new(
        EmbeddingBatch::new(gaussian(&mut rng, n, dim), (0..n).map(|i| i.to_string()).collect()).unwrap(),
        EmbeddingBatch::new(gaussian(&mut rng, n_a, dim), (0..n_a).map(|i| i.to_string()).collect()).unwrap(),
        pair_index,
        Some(coords),
    )
    .unwrap()
}

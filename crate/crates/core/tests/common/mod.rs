#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdconvs::geom::PointSet;
use tdconvs::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` uniform points in the unit cube with `m` features in [-1, 1] and
/// labels in `[0, c)` when `c > 0`.
pub fn random_ps(n: usize, m: usize, c: usize, seed: u64) -> PointSet {
    let mut r = rng(seed);
    let coords = (0..n).map(|_| [r.random(), r.random(), r.random()]).collect();
    let feats = (0..n * m).map(|_| r.random_range(-1.0..1.0)).collect();
    let labels = (c > 0).then(|| (0..n).map(|_| r.random_range(0..c)).collect());
    PointSet::new(coords, Tensor::new(&[n, m], feats).unwrap(), labels).unwrap()
}

/// Same points with trainable features.
pub fn with_param_feats(ps: &PointSet) -> PointSet {
    ps.with_feats(Tensor::param(ps.feats.shape(), ps.feats.to_vec()).unwrap()).unwrap()
}

/// `Σ w ⊙ x` for fixed random `w`, a scalar that exercises every output entry.
pub fn projection(x: &Tensor, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let w: Vec<f64> = (0..x.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    x.dot_const(&w).unwrap()
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

//! Whole-patch inference and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalkit::{confusion, ConfusionMatrix};
use crate::geom::PointSet;
use crate::net::{argmax_rows, forward, Network};

/// Class of every point of a normalized patch, each predicted exactly once.
///
/// The network takes a fixed point count, so the patch is split into chunks
/// of that size in a seeded random order; the last chunk (or a small patch) is
/// filled up with randomly repeated points whose predictions are discarded.
/// Batch normalization uses running statistics.
pub fn predict_patch(net: &Network, ps: &PointSet, seed: u64) -> Result<Vec<usize>> {
    let n = ps.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let net = net.eval_view();
    let n_in = net.cfg.n_input_points;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    if n > n_in {
        order.shuffle(&mut rng);
    }
    let mut pred = vec![0usize; n];
    for chunk in order.chunks(n_in) {
        let mut idx = chunk.to_vec();
        while idx.len() < n_in {
            idx.push(rng.random_range(0..n));
        }
        let out = forward(&ps.subset(&idx)?, &net)?;
        for (&i, c) in chunk.iter().zip(argmax_rows(out.final_logits())) {
            pred[i] = c;
        }
    }
    Ok(pred)
}

/// Confusion matrix over all points of the labeled patches.
pub fn evaluate(net: &Network, patches: &[PointSet], seed: u64) -> Result<ConfusionMatrix> {
    let c = net.cfg.n_classes;
    let mut cm = ConfusionMatrix::new(c);
    for (k, ps) in patches.iter().enumerate() {
        let Some(labels) = &ps.labels else {
            return Err(Error::Data(format!("evaluation patch {k} has no labels")));
        };
        let pred = predict_patch(net, ps, seed.wrapping_add(k as u64))?;
        cm.merge(&confusion(labels, &pred, c)?)?;
    }
    Ok(cm)
}

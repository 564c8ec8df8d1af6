//! Pieces shared by the cylinder and sphere deformable layers.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::geom::PointSet;
use crate::tensor::{linear, LinearParams, Tensor};

/// `[N, 3 + M]` head input: coordinates followed by features.
pub(crate) fn head_input(ps: &PointSet) -> Result<Tensor> {
    let n = ps.len();
    let coords = Tensor::new(&[n, 3], ps.coords.iter().flatten().copied().collect())?;
    Tensor::concat(&[coords, ps.feats.clone()], 1)
}

/// Offsets `[N, K, D]` predicted from coordinates and features.
pub(crate) fn predict_offsets(ps: &PointSet, head: &LinearParams, k: usize, d: usize) -> Result<Tensor> {
    if head.out_dim() != k * d {
        return dim_err(format!("offset head emits {} values, expected {k}×{d}", head.out_dim()));
    }
    linear(&head_input(ps)?, head)?.reshape(&[ps.len(), k, d])
}

/// Raw aggregation weights `[N, K]`, optionally softmax-normalized.
pub(crate) fn predict_weights(ps: &PointSet, head: &LinearParams, softmax: bool) -> Result<Tensor> {
    let w = linear(&head_input(ps)?, head)?;
    Ok(if softmax { w.softmax_last() } else { w })
}

/// Learnable reference offsets `[K, D]`, uniform in `±half_cell[d]`.
pub(crate) fn init_ref_base<R: Rng>(k: usize, half_cell: &[f64], rng: &mut R) -> Tensor {
    let d = half_cell.len();
    let data = (0..k * d).map(|i| rng.random_range(-half_cell[i % d]..=half_cell[i % d])).collect();
    Tensor::param(&[k, d], data).expect("shape")
}

/// Sampling locations `anchor[n] + ref_base[k] + offsets[n, k]`, `[N, K, D]`.
pub(crate) fn sample_locations(anchors: &[Vec<f64>], ref_base: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    let [n, k, d] = *offsets.shape() else {
        return dim_err(format!("offsets must be [N, K, D], got {:?}", offsets.shape()));
    };
    if ref_base.shape() != [k, d] || anchors.len() != n || anchors.iter().any(|a| a.len() != d) {
        return dim_err(format!(
            "sample locations: {} anchors, reference {:?}, offsets {:?}",
            anchors.len(),
            ref_base.shape(),
            offsets.shape()
        ));
    }
    let mut out = offsets.to_vec();
    {
        let r = ref_base.data();
        for i in 0..n {
            for j in 0..k {
                for e in 0..d {
                    out[(i * k + j) * d + e] += anchors[i][e] + r[j * d + e];
                }
            }
        }
    }
    Ok(Tensor::from_op(vec![n, k, d], out, "sample_locations", vec![ref_base.clone(), offsets.clone()], move |g| {
        let mut gr = vec![0.0; k * d];
        for (s, v) in g.iter().enumerate() {
            gr[s % (k * d)] += v;
        }
        vec![Some(gr), Some(g.to_vec())]
    }))
}

//! Cylinder-wise deformable point convolution.
//!
//! Point features are mean-pooled into a bird's-eye cylinder map, then each
//! point reads the map back at `K_c` learned locations around its own planar
//! position. The weighted readings are added to the point's feature and
//! projected, and the result is fused with max-pooled k-NN features at three
//! neighborhood sizes:
//!
//! ```text
//! F_a   = agg_proj(F + Σ_k W_k · sample(M, xy + ref_k + Δ_k))
//! F_out = ReLU(BN(fuse_proj([F_1; F_2; F_3; F_a])))
//! ```

use rand::Rng;

use crate::deform::{init_ref_base, predict_offsets, predict_weights, sample_locations};
use crate::error::{contract_err, dim_err, Result};
use crate::geom::{cylindricize, grid_sample_2d, knn, CylinderMap, GridSpec2D, Neighbors, PointSet};
use crate::tensor::{batch_norm, linear, BatchNormParams, LinearParams, Tensor};

#[derive(Debug, Clone)]
pub struct CyDConvParams {
    /// `3 + M → 2·K_c`, zero-initialized.
    pub offset_head: LinearParams,
    /// `3 + M → K_c`
    pub weight_head: LinearParams,
    /// `M → M`
    pub agg_proj: LinearParams,
    /// `[K_c, 2]`
    pub ref_base: Tensor,
    /// One `3 + M → M_n` projection per neighborhood size.
    pub mfl_projs: Vec<LinearParams>,
    /// `3·M_n + M → M_out`
    pub fuse_proj: LinearParams,
    pub fuse_bn: BatchNormParams,
    pub k_c: usize,
    pub knn_sizes: [usize; 3],
    pub grid: GridSpec2D,
    /// Normalize the aggregation weights with a softmax over the samples.
    pub softmax_weights: bool,
}

impl CyDConvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        in_dim: usize,
        mfl_dim: usize,
        out_dim: usize,
        k_c: usize,
        knn_sizes: [usize; 3],
        grid: GridSpec2D,
        rng: &mut R,
    ) -> Result<Self> {
        if k_c == 0 {
            return contract_err("cydconv: k_c must be at least 1");
        }
        if !(1 <= knn_sizes[0] && knn_sizes[0] < knn_sizes[1] && knn_sizes[1] < knn_sizes[2]) {
            return contract_err(format!("cydconv: neighborhood sizes {knn_sizes:?} must increase strictly"));
        }
        let half = [0.5 / grid.h as f64, 0.5 / grid.w as f64];
        Ok(CyDConvParams {
            offset_head: LinearParams::zeros(3 + in_dim, 2 * k_c),
            weight_head: LinearParams::glorot(3 + in_dim, k_c, rng),
            agg_proj: LinearParams::glorot(in_dim, in_dim, rng),
            ref_base: init_ref_base(k_c, &half, rng),
            mfl_projs: (0..3).map(|_| LinearParams::glorot(3 + in_dim, mfl_dim, rng)).collect(),
            fuse_proj: LinearParams::glorot(3 * mfl_dim + in_dim, out_dim, rng),
            fuse_bn: BatchNormParams::new(out_dim),
            k_c,
            knn_sizes,
            grid,
            softmax_weights: false,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.agg_proj.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.fuse_proj.out_dim()
    }

    /// Every tensor of the layer, BN running statistics included.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut lin = |name: &str, p: &LinearParams| {
            out.push((format!("{prefix}.{name}.weight"), p.weight.clone()));
            out.push((format!("{prefix}.{name}.bias"), p.bias.clone()));
        };
        lin("offset_head", &self.offset_head);
        lin("weight_head", &self.weight_head);
        lin("agg_proj", &self.agg_proj);
        for (i, p) in self.mfl_projs.iter().enumerate() {
            lin(&format!("mfl{i}"), p);
        }
        lin("fuse_proj", &self.fuse_proj);
        out.push((format!("{prefix}.ref_base"), self.ref_base.clone()));
        out.extend(bn_tensors(&format!("{prefix}.fuse_bn"), &self.fuse_bn));
        out
    }
}

pub(crate) fn bn_tensors(prefix: &str, bn: &BatchNormParams) -> Vec<(String, Tensor)> {
    vec![
        (format!("{prefix}.gamma"), bn.gamma.clone()),
        (format!("{prefix}.beta"), bn.beta.clone()),
        (format!("{prefix}.running_mean"), bn.running_mean.clone()),
        (format!("{prefix}.running_var"), bn.running_var.clone()),
    ]
}

/// Planar offsets `[N, K_c, 2]`.
pub fn predict_offsets_2d(ps: &PointSet, p: &CyDConvParams) -> Result<Tensor> {
    predict_offsets(ps, &p.offset_head, p.k_c, 2)
}

/// Raw per-sample weights `[N, K_c]`.
pub fn predict_weights_2d(ps: &PointSet, p: &CyDConvParams) -> Result<Tensor> {
    predict_weights(ps, &p.weight_head, p.softmax_weights)
}

/// Map sampling locations `xy + ref_base + offsets`, `[N, K_c, 2]`.
pub fn sample_points_2d(ps: &PointSet, offsets: &Tensor, p: &CyDConvParams) -> Result<Tensor> {
    let anchors: Vec<Vec<f64>> = ps.coords.iter().map(|c| vec![c[0], c[1]]).collect();
    sample_locations(&anchors, &p.ref_base, offsets)
}

/// `agg_proj(F + Σ_k W_k · F_o,k)`, `[N, M]`.
pub fn aggregate_map_features(ps: &PointSet, map: &CylinderMap, p: &CyDConvParams) -> Result<Tensor> {
    if map.feat_dim() != ps.feat_dim() {
        return dim_err(format!("cylinder map carries {} features but points carry {}", map.feat_dim(), ps.feat_dim()));
    }
    let offsets = predict_offsets_2d(ps, p)?;
    let weights = predict_weights_2d(ps, p)?;
    let locs = sample_points_2d(ps, &offsets, p)?;
    let sampled = grid_sample_2d(map, &locs)?;
    let agg = Tensor::weighted_sum_k(&weights, &sampled)?;
    linear(&ps.feats.add(&agg)?, &p.agg_proj)
}

/// Multi-scale neighborhood features, one `[N, M_n]` tensor per size.
///
/// Neighborhood sizes above N are clamped to N. Each branch projects the
/// grouped `[relative xyz, neighbor feature]` rows and max-pools over the
/// neighbors. Relative coordinates are measured in cells of the layer's map
/// so they enter at a magnitude comparable to standardized features.
pub fn mfl(ps: &PointSet, p: &CyDConvParams) -> Result<Vec<Tensor>> {
    let n = ps.len();
    let sizes = p.knn_sizes.map(|t| t.min(n));
    // Rows are sorted by (distance, index), so smaller neighborhoods are
    // prefixes of the largest one.
    let nb = knn(ps, sizes[2])?;
    sizes.iter().zip(&p.mfl_projs).map(|(&t, proj)| grouped_max(ps, &nb, t, proj, cell_scale(&p.grid))).collect()
}

/// Reciprocal cell size of a map, used as the unit of neighbor offsets.
pub fn cell_scale(grid: &GridSpec2D) -> f64 {
    grid.h.max(grid.w) as f64
}

/// `max_j linear([scale·(xyz_nbr − xyz); F_nbr], proj)` over the first `t`
/// neighbors.
///
/// Equal to `linear(group(..))` with scaled coordinate columns followed by a
/// max over the neighbor axis, but projects each point's features once
/// instead of once per neighbor.
pub(crate) fn grouped_max(ps: &PointSet, nb: &Neighbors, t: usize, proj: &LinearParams, scale: f64) -> Result<Tensor> {
    let n = ps.len();
    let m = ps.feat_dim();
    let c = proj.out_dim();
    if proj.in_dim() != 3 + m {
        return dim_err(format!("neighborhood projection expects {} inputs, points give 3 + {m}", proj.in_dim()));
    }
    if t == 0 || t > nb.k || nb.len() != n {
        return contract_err(format!("neighborhood of {t} from a table of {} per point", nb.k));
    }
    let rel = |i: usize, j: usize| {
        let (a, b) = (ps.coords[i], ps.coords[nb.row(i)[j]]);
        [scale * (b[0] - a[0]), scale * (b[1] - a[1]), scale * (b[2] - a[2])]
    };
    let mut q = vec![0.0; n * c];
    let mut out = vec![f64::NEG_INFINITY; n * c];
    let mut arg = vec![0usize; n * c];
    {
        let (f, w, b) = (ps.feats.data(), proj.weight.data(), proj.bias.data());
        for i in 0..n {
            let qi = &mut q[i * c..(i + 1) * c];
            for e in 0..m {
                let fe = f[i * m + e];
                let we = &w[(3 + e) * c..(4 + e) * c];
                qi.iter_mut().zip(we).for_each(|(q, w)| *q += fe * w);
            }
        }
        let mut row = vec![0.0; c];
        for i in 0..n {
            for j in 0..t {
                let r = rel(i, j);
                let src = nb.row(i)[j];
                for ch in 0..c {
                    row[ch] = r[0] * w[ch] + r[1] * w[c + ch] + r[2] * w[2 * c + ch] + q[src * c + ch] + b[ch];
                }
                for ch in 0..c {
                    if j == 0 || row[ch] > out[i * c + ch] {
                        out[i * c + ch] = row[ch];
                        arg[i * c + ch] = j;
                    }
                }
            }
        }
    }
    let src_of: Vec<usize> = (0..n * c).map(|s| nb.row(s / c)[arg[s]]).collect();
    let rel_of: Vec<[f64; 3]> = (0..n * c).map(|s| rel(s / c, arg[s])).collect();
    let (ft, wt) = (ps.feats.clone(), proj.weight.clone());
    Ok(Tensor::from_op(
        vec![n, c],
        out,
        "mfl_branch",
        vec![ps.feats.clone(), proj.weight.clone(), proj.bias.clone()],
        move |g| {
            let mut gq = vec![0.0; n * c];
            let mut gw = vec![0.0; (3 + m) * c];
            let mut gb = vec![0.0; c];
            for s in 0..n * c {
                let ch = s % c;
                gq[src_of[s] * c + ch] += g[s];
                gb[ch] += g[s];
                for d in 0..3 {
                    gw[d * c + ch] += rel_of[s][d] * g[s];
                }
            }
            let (f, w) = (ft.data(), wt.data());
            for i in 0..n {
                let gqi = &gq[i * c..(i + 1) * c];
                for e in 0..m {
                    let fe = f[i * m + e];
                    gw[(3 + e) * c..(4 + e) * c].iter_mut().zip(gqi).for_each(|(a, g)| *a += fe * g);
                }
            }
            let gf = ft.requires_grad().then(|| {
                let mut gf = vec![0.0; n * m];
                for i in 0..n {
                    let gqi = &gq[i * c..(i + 1) * c];
                    for e in 0..m {
                        let we = &w[(3 + e) * c..(4 + e) * c];
                        gf[i * m + e] = gqi.iter().zip(we).map(|(a, b)| a * b).sum();
                    }
                }
                gf
            });
            vec![gf, Some(gw), Some(gb)]
        },
    ))
}

/// Full layer: `[N, M] → [N, M_out]`.
pub fn cydconv_forward(ps: &PointSet, p: &CyDConvParams) -> Result<Tensor> {
    let map = cylindricize(ps, p.grid);
    let fa = aggregate_map_features(ps, &map, p)?;
    let mut parts = mfl(ps, p)?;
    parts.push(fa);
    let fused = linear(&Tensor::concat(&parts, 1)?, &p.fuse_proj)?;
    Ok(batch_norm(&fused, &p.fuse_bn)?.relu())
}

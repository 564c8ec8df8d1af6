//! Sphere-wise deformable point convolution, used as a skip connection.
//!
//! The decoder stream `F` is mean-pooled into a sphere volume and read back
//! at `K_s` learned 3D locations around every point. The weighted readings are
//! added to `F` without a further projection and fused with the encoder
//! features `F_h`:
//!
//! ```text
//! F_s   = F + Σ_k W_k · sample(V, xyz + ref_k + Δ_k)
//! F_out = ReLU(BN(fuse_proj([F_h; F_s])))
//! ```
//!
//! With the layer disabled the same fusion runs on `[F_h; F]`, which is the
//! plain skip connection used on the lower decoder levels.

use rand::Rng;

use crate::cydconv::bn_tensors;
use crate::deform::{init_ref_base, predict_offsets, predict_weights, sample_locations};
use crate::error::{contract_err, dim_err, Result};
use crate::geom::{grid_sample_3d, spheroidize, GridSpec3D, PointSet, SphereVolume};
use crate::tensor::{batch_norm, linear, BatchNormParams, LinearParams, Tensor};

#[derive(Debug, Clone)]
pub struct SpDConvParams {
    /// `3 + M → 3·K_s`, zero-initialized.
    pub offset_head: LinearParams,
    /// `3 + M → K_s`
    pub weight_head: LinearParams,
    /// `[K_s, 3]`
    pub ref_base: Tensor,
    /// `M_h + M → M_out`
    pub fuse_proj: LinearParams,
    pub fuse_bn: BatchNormParams,
    pub k_s: usize,
    pub grid: GridSpec3D,
    pub enabled: bool,
    pub softmax_weights: bool,
}

impl SpDConvParams {
    pub fn new<R: Rng>(
        enc_dim: usize,
        dec_dim: usize,
        out_dim: usize,
        k_s: usize,
        grid: GridSpec3D,
        enabled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if k_s == 0 {
            return contract_err("spdconv: k_s must be at least 1");
        }
        let half = [0.5 / grid.h as f64, 0.5 / grid.w as f64, 0.5 / grid.z as f64];
        Ok(SpDConvParams {
            offset_head: LinearParams::zeros(3 + dec_dim, 3 * k_s),
            weight_head: LinearParams::glorot(3 + dec_dim, k_s, rng),
            ref_base: init_ref_base(k_s, &half, rng),
            fuse_proj: LinearParams::glorot(enc_dim + dec_dim, out_dim, rng),
            fuse_bn: BatchNormParams::new(out_dim),
            k_s,
            grid,
            enabled,
            softmax_weights: false,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.fuse_proj.out_dim()
    }

    /// Every tensor of the layer. A disabled layer reports only the fusion
    /// tensors, since the sampling heads never see a gradient.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut lin = |name: &str, p: &LinearParams| {
            out.push((format!("{prefix}.{name}.weight"), p.weight.clone()));
            out.push((format!("{prefix}.{name}.bias"), p.bias.clone()));
        };
        if self.enabled {
            lin("offset_head", &self.offset_head);
            lin("weight_head", &self.weight_head);
        }
        lin("fuse_proj", &self.fuse_proj);
        if self.enabled {
            out.push((format!("{prefix}.ref_base"), self.ref_base.clone()));
        }
        out.extend(bn_tensors(&format!("{prefix}.fuse_bn"), &self.fuse_bn));
        out
    }
}

/// 3D offsets `[N, K_s, 3]`.
pub fn predict_offsets_3d(ps: &PointSet, p: &SpDConvParams) -> Result<Tensor> {
    predict_offsets(ps, &p.offset_head, p.k_s, 3)
}

/// Raw per-sample weights `[N, K_s]`.
pub fn predict_weights_3d(ps: &PointSet, p: &SpDConvParams) -> Result<Tensor> {
    predict_weights(ps, &p.weight_head, p.softmax_weights)
}

/// Volume sampling locations `xyz + ref_base + offsets`, `[N, K_s, 3]`.
pub fn sample_points_3d(ps: &PointSet, offsets: &Tensor, p: &SpDConvParams) -> Result<Tensor> {
    let anchors: Vec<Vec<f64>> = ps.coords.iter().map(|c| c.to_vec()).collect();
    sample_locations(&anchors, &p.ref_base, offsets)
}

/// `F + Σ_k W_k · F_o,k`, `[N, M]`.
pub fn aggregate_volume_features(ps: &PointSet, vol: &SphereVolume, p: &SpDConvParams) -> Result<Tensor> {
    if vol.feat_dim() != ps.feat_dim() {
        return dim_err(format!(
            "sphere volume carries {} features but points carry {}",
            vol.feat_dim(),
            ps.feat_dim()
        ));
    }
    let offsets = predict_offsets_3d(ps, p)?;
    let weights = predict_weights_3d(ps, p)?;
    let locs = sample_points_3d(ps, &offsets, p)?;
    let sampled = grid_sample_3d(vol, &locs)?;
    ps.feats.add(&Tensor::weighted_sum_k(&weights, &sampled)?)
}

/// Fuses encoder features `[N, M_h]` with the decoder stream carried by
/// `ps_decoder`, returning `[N, M_out]`.
pub fn spdconv_forward(ps_decoder: &PointSet, feats_encoder: &Tensor, p: &SpDConvParams) -> Result<Tensor> {
    if feats_encoder.rank() != 2 || feats_encoder.shape()[0] != ps_decoder.len() {
        return contract_err(format!(
            "skip fusion: encoder features {:?} for {} decoder points",
            feats_encoder.shape(),
            ps_decoder.len()
        ));
    }
    let stream = if p.enabled {
        let vol = spheroidize(ps_decoder, p.grid);
        aggregate_volume_features(ps_decoder, &vol, p)?
    } else {
        ps_decoder.feats.clone()
    };
    let fused = linear(&Tensor::concat(&[feats_encoder.clone(), stream], 1)?, &p.fuse_proj)?;
    Ok(batch_norm(&fused, &p.fuse_bn)?.relu())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_ps(n: usize, m: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let f = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        PointSet::new(coords, Tensor::param(&[n, m], f).unwrap(), None).unwrap()
    }

    fn layer(enabled: bool) -> SpDConvParams {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        SpDConvParams::new(2, 3, 4, 2, GridSpec3D::new(3, 3, 2), enabled, &mut rng).unwrap()
    }

    #[test]
    fn fresh_offsets_are_zero() {
        let ps = random_ps(7, 3, 2);
        let off = predict_offsets_3d(&ps, &layer(true)).unwrap();
        assert_eq!(off.shape(), &[7, 2, 3]);
        assert!(off.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_keep_the_stream() {
        let ps = random_ps(9, 3, 3);
        let mut p = layer(true);
        p.weight_head = LinearParams::zeros(6, 2);
        let vol = spheroidize(&ps, p.grid);
        assert_eq!(aggregate_volume_features(&ps, &vol, &p).unwrap().to_vec(), ps.feats.to_vec());
    }

    #[test]
    fn both_branches_are_well_formed() {
        let ps = random_ps(9, 3, 4);
        let enc = Tensor::param(&[9, 2], vec![0.3; 18]).unwrap();
        for enabled in [true, false] {
            let out = spdconv_forward(&ps, &enc, &layer(enabled)).unwrap();
            assert_eq!(out.shape(), &[9, 4]);
            assert!(out.to_vec().iter().all(|&v| v >= 0.0));
        }
        let short = Tensor::param(&[8, 2], vec![0.0; 16]).unwrap();
        assert!(matches!(spdconv_forward(&ps, &short, &layer(true)), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn disabled_layer_hides_sampling_heads() {
        let names: Vec<String> = layer(false).named_tensors("s").into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.contains("offset_head") && !n.contains("ref_base")));
    }
}

//! Encoder-decoder segmentation network with deep supervision.
//!
//! The encoder runs a cylinder-wise deformable convolution at four
//! resolutions, each coarser level being a farthest-point subset of the one
//! above it. The decoder climbs back with 3-NN feature propagation and skip
//! fusion; the skip at full resolution goes through the sphere-wise deformable
//! convolution. Every decoder resolution has a linear classification head and
//! a small MLP head sits on top of the full-resolution output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cydconv::{bn_tensors, cydconv_forward, CyDConvParams};
use crate::error::{contract_err, Error, Result};
use crate::geom::{fps, interpolate_3nn, GridSpec2D, GridSpec3D, PointSet};
use crate::spdconv::{spdconv_forward, SpDConvParams};
use crate::tensor::{batch_norm, linear, sigmoid, BatchNormParams, LinearParams, Tensor};

pub const LEVELS: usize = 4;
/// Supervised outputs: four decoder stages and the final head.
pub const OUTPUTS: usize = 5;
const PROB_CLAMP: f64 = 1e-7;
/// Hidden width of the final Linear-BN-ReLU-Linear classifier.
pub const FINAL_HIDDEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub n_input_points: usize,
    pub level_sizes: [usize; LEVELS],
    pub map_specs: [(usize, usize); LEVELS],
    pub volume_spec: (usize, usize, usize),
    /// Multiplier on the default (half-diagonal) cylinder radius.
    pub map_radius_scale: f64,
    /// Multiplier on the default (half-diagonal) sphere radius.
    pub volume_radius_scale: f64,
    pub channel_widths: [usize; LEVELS],
    pub k_c: usize,
    pub k_s: usize,
    pub knn_sizes: [usize; 3],
    pub n_classes: usize,
    pub input_feat_dim: usize,
    /// `[final head, 64-point stage, 256, 1024, 4096]` for the default sizes:
    /// the final head first, then the decoder stages from coarsest to finest.
    pub loss_weights: [f64; OUTPUTS],
    /// Sphere-wise convolution on the full-resolution skip.
    pub spdconv: bool,
    pub softmax_weights: bool,
}

impl NetworkConfig {
    pub fn new(n_classes: usize, input_feat_dim: usize) -> Self {
        NetworkConfig {
            n_input_points: 4096,
            level_sizes: [4096, 1024, 256, 64],
            map_specs: [(40, 40), (20, 20), (10, 10), (5, 5)],
            volume_spec: (40, 40, 5),
            map_radius_scale: 1.0,
            volume_radius_scale: 1.0,
            channel_widths: [64, 128, 256, 512],
            k_c: 4,
            k_s: 8,
            knn_sizes: [16, 32, 64],
            n_classes,
            input_feat_dim,
            loss_weights: [1.0, 2.0, 2.0, 2.0, 2.0],
            spdconv: true,
            softmax_weights: false,
        }
    }

    /// A 32-point network small enough for finite-difference checks.
    pub fn tiny(n_classes: usize, input_feat_dim: usize) -> Self {
        NetworkConfig {
            n_input_points: 32,
            level_sizes: [32, 16, 8, 4],
            map_specs: [(4, 4), (3, 3), (2, 2), (2, 2)],
            volume_spec: (4, 4, 2),
            channel_widths: [8, 8, 8, 8],
            k_c: 2,
            k_s: 2,
            knn_sizes: [2, 4, 8],
            ..NetworkConfig::new(n_classes, input_feat_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("net.{field}: {why}")));
        if self.level_sizes[0] != self.n_input_points {
            return bad(
                "level_sizes",
                format!("first level {} must equal n_input_points {}", self.level_sizes[0], self.n_input_points),
            );
        }
        if self.level_sizes.windows(2).any(|w| w[1] >= w[0]) || self.level_sizes[LEVELS - 1] == 0 {
            return bad("level_sizes", format!("{:?} must be strictly decreasing and positive", self.level_sizes));
        }
        if self.map_specs.iter().any(|&(h, w)| h == 0 || w == 0) {
            return bad("map_specs", "grid sizes must be positive".into());
        }
        let (h, w, z) = self.volume_spec;
        if h == 0 || w == 0 || z == 0 {
            return bad("volume_spec", "grid sizes must be positive".into());
        }
        if self.map_radius_scale.is_nan() || self.map_radius_scale <= 0.0 {
            return bad("map_radius_scale", "must be positive".into());
        }
        if self.volume_radius_scale.is_nan() || self.volume_radius_scale <= 0.0 {
            return bad("volume_radius_scale", "must be positive".into());
        }
        if self.channel_widths.contains(&0) {
            return bad("channel_widths", "widths must be positive".into());
        }
        if self.k_c == 0 {
            return bad("k_c", "must be at least 1".into());
        }
        if self.k_s == 0 {
            return bad("k_s", "must be at least 1".into());
        }
        let t = self.knn_sizes;
        if !(1 <= t[0] && t[0] < t[1] && t[1] < t[2]) {
            return bad("knn_sizes", format!("{t:?} must increase strictly"));
        }
        if self.n_classes < 2 {
            return bad("n_classes", "need at least two classes".into());
        }
        if self.input_feat_dim == 0 {
            return bad("input_feat_dim", "must be positive".into());
        }
        if self.loss_weights.iter().any(|&l| !l.is_finite() || l < 0.0) {
            return bad("loss_weights", "must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn map_grid(&self, level: usize) -> GridSpec2D {
        let (h, w) = self.map_specs[level];
        let g = GridSpec2D::new(h, w);
        g.with_radius(g.radius * self.map_radius_scale)
    }

    pub fn volume_grid(&self) -> GridSpec3D {
        let (h, w, z) = self.volume_spec;
        let g = GridSpec3D::new(h, w, z);
        g.with_radius(g.radius * self.volume_radius_scale)
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub encoder: Vec<CyDConvParams>,
    /// Skip fusions from the coarsest upward; the last one runs at full
    /// resolution and carries the sphere-wise switch.
    pub decoder: Vec<SpDConvParams>,
    /// Linear heads for the decoder stages, coarsest first.
    pub stage_heads: Vec<LinearParams>,
    pub final_hidden: LinearParams,
    pub final_bn: BatchNormParams,
    pub final_out: LinearParams,
}

/// Initializes every parameter from `seed`.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = cfg.channel_widths;
    let mut encoder = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let in_dim = if l == 0 { cfg.input_feat_dim } else { w[l - 1] };
        encoder.push(CyDConvParams::new(in_dim, w[l], w[l], cfg.k_c, cfg.knn_sizes, cfg.map_grid(l), &mut rng)?);
    }
    for e in &mut encoder {
        e.softmax_weights = cfg.softmax_weights;
    }
    let mut decoder = Vec::with_capacity(LEVELS - 1);
    for l in (0..LEVELS - 1).rev() {
        let enabled = l == 0 && cfg.spdconv;
        let mut s = SpDConvParams::new(w[l], w[l + 1], w[l], cfg.k_s, cfg.volume_grid(), enabled, &mut rng)?;
        s.softmax_weights = cfg.softmax_weights;
        decoder.push(s);
    }
    let stage_heads = (0..LEVELS).rev().map(|l| LinearParams::glorot(w[l], cfg.n_classes, &mut rng)).collect();
    Ok(Network {
        cfg: cfg.clone(),
        encoder,
        decoder,
        stage_heads,
        final_hidden: LinearParams::glorot(w[0], FINAL_HIDDEN, &mut rng),
        final_bn: BatchNormParams::new(FINAL_HIDDEN),
        final_out: LinearParams::glorot(FINAL_HIDDEN, cfg.n_classes, &mut rng),
    })
}

impl Network {
    /// Every tensor in a stable order, BN running statistics included.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, e) in self.encoder.iter().enumerate() {
            out.extend(e.named_tensors(&format!("encoder.{i}")));
        }
        for (i, d) in self.decoder.iter().enumerate() {
            out.extend(d.named_tensors(&format!("decoder.{i}")));
        }
        let mut lin = |name: String, p: &LinearParams| {
            out.push((format!("{name}.weight"), p.weight.clone()));
            out.push((format!("{name}.bias"), p.bias.clone()));
        };
        for (i, h) in self.stage_heads.iter().enumerate() {
            lin(format!("head.{i}"), h);
        }
        lin("head.final.hidden".into(), &self.final_hidden);
        lin("head.final.out".into(), &self.final_out);
        out.extend(bn_tensors("head.final.bn", &self.final_bn));
        out
    }

    /// The tensors updated by the optimizer.
    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        self.named_tensors().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.trainable() {
            t.zero_grad();
        }
    }

    /// Switches every batch normalization between batch and running statistics.
    pub fn set_training(&mut self, training: bool) {
        for e in &mut self.encoder {
            e.fuse_bn.training = training;
        }
        for d in &mut self.decoder {
            d.fuse_bn.training = training;
        }
        self.final_bn.training = training;
    }

    /// A view sharing all tensors but using running statistics.
    pub fn eval_view(&self) -> Network {
        let mut n = self.clone();
        n.set_training(false);
        n
    }
}

/// One encoder resolution.
#[derive(Debug, Clone)]
pub struct EncoderLevel {
    /// Points of this level carrying the level's input features.
    pub points: PointSet,
    /// `[N_l, width_l]` convolution output.
    pub feats: Tensor,
    /// Positions of these points in the network input.
    pub indices: Vec<usize>,
}

pub fn encoder_forward(ps: &PointSet, net: &Network) -> Result<Vec<EncoderLevel>> {
    let cfg = &net.cfg;
    if ps.len() != cfg.n_input_points {
        return contract_err(format!(
            "network expects {} points, got {} (sample the patch first)",
            cfg.n_input_points,
            ps.len()
        ));
    }
    let mut levels: Vec<EncoderLevel> = Vec::with_capacity(LEVELS);
    for (l, layer) in net.encoder.iter().enumerate() {
        let (points, indices) = match levels.last() {
            None => (ps.clone(), (0..ps.len()).collect::<Vec<_>>()),
            Some(prev) => {
                let sel = fps(&prev.points, cfg.level_sizes[l])?;
                let coords = sel.iter().map(|&i| prev.points.coords[i]).collect();
                let labels = prev.points.labels.as_ref().map(|lb| sel.iter().map(|&i| lb[i]).collect());
                let feats = prev.feats.gather_rows(&sel)?;
                let idx = sel.iter().map(|&i| prev.indices[i]).collect();
                (PointSet::new(coords, feats, labels)?, idx)
            }
        };
        let feats = cydconv_forward(&points, layer)?;
        levels.push(EncoderLevel { points, feats, indices });
    }
    Ok(levels)
}

/// Logits at every supervised resolution.
#[derive(Debug, Clone)]
pub struct MultiScaleOutput {
    /// `[64, 256, 1024, 4096, final]` points for the default sizes, each `[N_i, C]`.
    pub logits: Vec<Tensor>,
    /// Positions in the network input of each output's points.
    pub point_indices: Vec<Vec<usize>>,
}

impl MultiScaleOutput {
    pub fn final_logits(&self) -> &Tensor {
        &self.logits[OUTPUTS - 1]
    }
}

pub fn decoder_forward(levels: &[EncoderLevel], net: &Network) -> Result<MultiScaleOutput> {
    if levels.len() != LEVELS {
        return contract_err(format!("decoder needs {LEVELS} encoder levels, got {}", levels.len()));
    }
    let mut x = levels[LEVELS - 1].feats.clone();
    let mut logits = vec![linear(&x, &net.stage_heads[0])?];
    let mut point_indices = vec![levels[LEVELS - 1].indices.clone()];
    for (s, fuse) in net.decoder.iter().enumerate() {
        let (coarse, fine) = (&levels[LEVELS - 1 - s], &levels[LEVELS - 2 - s]);
        let src = PointSet::new(coarse.points.coords.clone(), x, None)?;
        let up = interpolate_3nn(&src, &fine.points.coords)?;
        let stream = PointSet::new(fine.points.coords.clone(), up, None)?;
        x = spdconv_forward(&stream, &fine.feats, fuse)?;
        logits.push(linear(&x, &net.stage_heads[s + 1])?);
        point_indices.push(fine.indices.clone());
    }
    let hidden = batch_norm(&linear(&x, &net.final_hidden)?, &net.final_bn)?.relu();
    logits.push(linear(&hidden, &net.final_out)?);
    point_indices.push(levels[0].indices.clone());
    Ok(MultiScaleOutput { logits, point_indices })
}

pub fn forward(ps: &PointSet, net: &Network) -> Result<MultiScaleOutput> {
    decoder_forward(&encoder_forward(ps, net)?, net)
}

/// Mean over points of the per-class binary cross-entropy summed over
/// classes, with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [n, c] = *logits.shape() else {
        return contract_err(format!("loss expects [N, C] logits, got {:?}", logits.shape()));
    };
    if labels.len() != n {
        return contract_err(format!("{} labels for {n} logit rows", labels.len()));
    }
    if let Some(i) = labels.iter().position(|&l| l >= c) {
        return Err(Error::Data(format!("label {} at point {i} is outside [0, {c})", labels[i])));
    }
    let z = logits.data();
    let mut s = vec![0.0; n * c];
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..c {
            let p = sigmoid(z[i * c + k]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            s[i * c + k] = p;
            total -= if labels[i] == k { p.ln() } else { (1.0 - p).ln() };
        }
    }
    drop(z);
    let target: Vec<usize> = labels.to_vec();
    let zt = logits.clone();
    Ok(Tensor::from_op(vec![], vec![total / n as f64], "bce_loss", vec![logits.clone()], move |g| {
        let z = zt.data();
        let mut gz = vec![0.0; n * c];
        for i in 0..n {
            for k in 0..c {
                let raw = sigmoid(z[i * c + k]);
                // the clamp is flat outside its range
                if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&raw) {
                    continue;
                }
                let a = if target[i] == k { 1.0 } else { 0.0 };
                gz[i * c + k] = g[0] * (s[i * c + k] - a) / n as f64;
            }
        }
        vec![Some(gz)]
    }))
}

/// Deep-supervision loss `Σ_i λ_i · L_i`, with the targets of each output
/// gathered from `labels` through its point indices. Also returns each `L_i`.
pub fn seg_loss(out: &MultiScaleOutput, labels: &[usize], lambda: &[f64]) -> Result<(Tensor, Vec<f64>)> {
    if lambda.len() != out.logits.len() || out.point_indices.len() != out.logits.len() {
        return contract_err(format!("{} loss weights for {} outputs", lambda.len(), out.logits.len()));
    }
    // lambda[0] weights the final head, the rest follow the stage order.
    let weight_of = |i: usize| if i == out.logits.len() - 1 { lambda[0] } else { lambda[i + 1] };
    let mut total: Option<Tensor> = None;
    let mut parts = Vec::with_capacity(out.logits.len());
    for (i, (z, idx)) in out.logits.iter().zip(&out.point_indices).enumerate() {
        let mut target = Vec::with_capacity(idx.len());
        for &p in idx {
            match labels.get(p) {
                Some(&l) => target.push(l),
                None => return contract_err(format!("point index {p} outside {} labels", labels.len())),
            }
        }
        let l = bce_loss(z, &target)?;
        parts.push(l.item());
        let term = l.scale(weight_of(i));
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok((total.expect("at least one output"), parts))
}

/// Row-wise argmax of `[N, C]` logits, lowest class on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c.max(1))
        .map(|row| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Class of every input point from the final head, using running statistics.
pub fn predict(ps: &PointSet, net: &Network) -> Result<Vec<usize>> {
    let out = forward(ps, &net.eval_view())?;
    Ok(argmax_rows(out.final_logits()))
}

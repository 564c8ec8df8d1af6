//! Finite-difference verification of every differentiable operation.
//!
//! Each case builds random inputs from a seed and a forward closure over
//! them. The closure output is reduced with a fixed random projection, the
//! analytic gradient comes from `backward`, and the numeric one from central
//! differences with step [`FD_STEP`].

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cydconv::{cydconv_forward, CyDConvParams};
use crate::error::{Error, Result};
use crate::geom::{
    cylindricize, grid_sample_2d, grid_sample_3d, group, interpolate_3nn, knn, spheroidize, GridSpec2D, GridSpec3D,
    PointSet,
};
use crate::net::{build_network, forward, seg_loss, MultiScaleOutput, NetworkConfig};
use crate::spdconv::{spdconv_forward, SpDConvParams};
use crate::tensor::{batch_norm, linear, BatchNormParams, LinearParams, Tensor};

pub const FD_STEP: f64 = 1e-6;
/// Smallest step tried when the default one straddles a kink.
pub const MIN_STEP: f64 = 1e-8;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;

/// Inputs to differentiate against and a forward pass reading them.
pub struct Probe {
    pub inputs: Vec<Tensor>,
    pub forward: Box<dyn Fn() -> Result<Tensor>>,
    /// Upper bound on checked elements per seed; all when `None`.
    pub max_elems: Option<usize>,
}

impl Probe {
    fn new(inputs: Vec<Tensor>, forward: impl Fn() -> Result<Tensor> + 'static) -> Self {
        Probe { inputs, forward: Box::new(forward), max_elems: None }
    }
}

#[derive(Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub build: fn(u64) -> Result<Probe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub kinks: usize,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedCheck {
    pub max_rel_err: f64,
    /// Elements re-checked with a smaller step after straddling a kink.
    pub kinks: usize,
}

/// Largest relative error of one case at one seed.
pub fn check(case: &GradCase, seed: u64) -> Result<SeedCheck> {
    let probe = (case.build)(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let out = (probe.forward)()?;
    let proj: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |t: &Tensor| -> Result<f64> { Ok(t.dot_const(&proj)?.item()) };
    for t in &probe.inputs {
        t.zero_grad();
    }
    out.dot_const(&proj)?.backward()?;

    let slots: Vec<(usize, usize)> =
        probe.inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e))).collect();
    let chosen: Vec<(usize, usize)> = match probe.max_elems {
        Some(m) if m < slots.len() => sample(&mut rng, slots.len(), m).into_iter().map(|s| slots[s]).collect(),
        _ => slots,
    };
    let grads: Vec<Vec<f64>> = probe.inputs.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for (i, e) in chosen {
        let t = &probe.inputs[i];
        let orig = t.data()[e];
        let at = |x: f64| -> Result<f64> {
            t.data_mut()[e] = x;
            let v = (probe.forward)().and_then(|o| loss(&o));
            t.data_mut()[e] = orig;
            v
        };
        let a = grads[i][e];
        let central = |h: f64| -> Result<f64> { Ok((at(orig + h)? - at(orig - h)?) / (2.0 * h)) };
        let mut h = FD_STEP;
        let mut num = central(h)?;
        let mut err = rel_err(a, num);
        // A step that crosses a ReLU, max or clamp boundary gives an estimate
        // that moves when the step shrinks; on a smooth op it stays put.
        while err >= case.tolerance && h > 1.5 * MIN_STEP {
            let fine = central(h / 10.0)?;
            if rel_err(num, fine) < case.tolerance {
                break;
            }
            kinks += 1;
            h /= 10.0;
            num = fine;
            err = rel_err(a, num);
        }
        if !err.is_finite() {
            return Err(Error::Training(format!("{}: non-finite gradient at seed {seed}", case.name)));
        }
        worst = worst.max(err);
    }
    Ok(SeedCheck { max_rel_err: worst, kinks })
}

/// Runs `cases` over seeds `0..seeds`.
pub fn run_suite(cases: &[GradCase], seeds: u64) -> Result<Vec<CheckResult>> {
    cases
        .iter()
        .map(|case| {
            let (mut worst, mut kinks) = (0.0f64, 0);
            for seed in 0..seeds {
                let c = check(case, seed)?;
                worst = worst.max(c.max_rel_err);
                kinks += c.kinks;
            }
            Ok(CheckResult {
                name: case.name,
                tolerance: case.tolerance,
                seeds,
                max_rel_err: worst,
                kinks,
                passed: worst < case.tolerance,
            })
        })
        .collect()
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Vec<f64> {
    (0..shape.iter().product::<usize>()).map(|_| rng.random_range(lo..hi)).collect()
}

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::leaf(shape, uniform(rng, shape, lo, hi), true).expect("shape")
}

fn constant(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::new(shape, uniform(rng, shape, lo, hi)).expect("shape")
}

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
}

/// Random non-zero values for a zero-initialized head so its path is live.
fn randomize(p: &LinearParams, rng: &mut ChaCha8Rng, scale: f64) {
    p.weight.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    p.bias.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
}

fn linear_tensors(p: &LinearParams) -> [Tensor; 2] {
    [p.weight.clone(), p.bias.clone()]
}

fn bn_tensors(p: &BatchNormParams) -> [Tensor; 2] {
    [p.gamma.clone(), p.beta.clone()]
}

fn case_linear(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let x = leaf(&mut rng, &[4, 3], -1.0, 1.0);
    let p = LinearParams::glorot(3, 2, &mut rng);
    randomize(&p, &mut rng, 1.0);
    let inputs = vec![x.clone(), p.weight.clone(), p.bias.clone()];
    Ok(Probe::new(inputs, move || linear(&x, &p)))
}

fn case_batch_norm(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let x = leaf(&mut rng, &[8, 4], -2.0, 2.0);
    let p = BatchNormParams::new(4);
    p.gamma.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
    p.beta.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    let mut inputs = vec![x.clone()];
    inputs.extend(bn_tensors(&p));
    Ok(Probe::new(inputs, move || batch_norm(&x, &p)))
}

fn case_batch_norm_eval(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let x = leaf(&mut rng, &[6, 3], -2.0, 2.0);
    let mut p = BatchNormParams::new(3);
    p.training = false;
    p.running_mean.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    p.running_var.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
    let mut inputs = vec![x.clone()];
    inputs.extend(bn_tensors(&p));
    Ok(Probe::new(inputs, move || batch_norm(&x, &p)))
}

fn case_relu(seed: u64) -> Result<Probe> {
    let x = leaf(&mut rng_for(seed), &[6, 5], -1.0, 1.0);
    Ok(Probe::new(vec![x.clone()], move || Ok(x.relu())))
}

fn case_sigmoid(seed: u64) -> Result<Probe> {
    let x = leaf(&mut rng_for(seed), &[6, 5], -4.0, 4.0);
    Ok(Probe::new(vec![x.clone()], move || Ok(x.sigmoid())))
}

fn case_elementwise(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let a = leaf(&mut rng, &[3, 4], -1.0, 1.0);
    let b = leaf(&mut rng, &[3, 4], -1.0, 1.0);
    let inputs = vec![a.clone(), b.clone()];
    Ok(Probe::new(inputs, move || {
        let s = a.add(&b)?.mul(&a)?.scale(0.7);
        Tensor::concat(&[s.reshape(&[12])?, s.mean().reshape(&[1])?, s.sum().reshape(&[1])?], 0)
    }))
}

fn case_reductions(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let x = leaf(&mut rng, &[5, 3, 4], -1.0, 1.0);
    let w = leaf(&mut rng, &[5, 3], -1.0, 1.0);
    let inputs = vec![x.clone(), w.clone()];
    Ok(Probe::new(inputs, move || {
        let pooled = x.max_axis1()?;
        let weighted = Tensor::weighted_sum_k(&w, &x)?;
        let soft = weighted.softmax_last();
        let rows = Tensor::concat(&[pooled, soft], 1)?.gather_rows(&[4, 0, 0, 2])?;
        Tensor::concat(&[rows.reshape(&[32])?, x.sum().reshape(&[1])?], 0)
    }))
}

fn small_cloud(rng: &mut ChaCha8Rng, n: usize, m: usize) -> PointSet {
    let coords = points(rng, n);
    PointSet::new(coords, leaf(rng, &[n, m], -1.0, 1.0), None).expect("valid point set")
}

/// Interior sampling coordinates `[n, k, d]` away from the clamped border.
fn interior_coords(rng: &mut ChaCha8Rng, n: usize, k: usize, dims: &[usize], grad: bool) -> Tensor {
    let mut v = Vec::with_capacity(n * k * dims.len());
    for _ in 0..n * k {
        for &s in dims {
            let lo = 0.5 / s as f64;
            v.push(rng.random_range(lo..1.0 - lo));
        }
    }
    Tensor::leaf(&[n, k, dims.len()], v, grad).expect("shape")
}

fn case_grid_sample_2d_values(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let ps = small_cloud(&mut rng, 10, 3);
    let mut map = cylindricize(&ps, GridSpec2D::new(5, 5));
    map.values = leaf(&mut rng, &[5, 5, 3], -1.0, 1.0);
    let coords = interior_coords(&mut rng, 6, 2, &[5, 5], false);
    Ok(Probe::new(vec![map.values.clone()], move || grid_sample_2d(&map, &coords)))
}

fn case_grid_sample_2d_coords(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let ps = small_cloud(&mut rng, 10, 3);
    let mut map = cylindricize(&ps, GridSpec2D::new(5, 5));
    map.values = constant(&mut rng, &[5, 5, 3], -1.0, 1.0);
    let coords = interior_coords(&mut rng, 6, 2, &[5, 5], true);
    Ok(Probe::new(vec![coords.clone()], move || grid_sample_2d(&map, &coords)))
}

fn case_grid_sample_3d_values(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let ps = small_cloud(&mut rng, 10, 2);
    let mut vol = spheroidize(&ps, GridSpec3D::new(4, 4, 3));
    vol.values = leaf(&mut rng, &[4, 4, 3, 2], -1.0, 1.0);
    let coords = interior_coords(&mut rng, 5, 2, &[4, 4, 3], false);
    Ok(Probe::new(vec![vol.values.clone()], move || grid_sample_3d(&vol, &coords)))
}

fn case_grid_sample_3d_coords(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let ps = small_cloud(&mut rng, 10, 2);
    let mut vol = spheroidize(&ps, GridSpec3D::new(4, 4, 3));
    vol.values = constant(&mut rng, &[4, 4, 3, 2], -1.0, 1.0);
    let coords = interior_coords(&mut rng, 5, 2, &[4, 4, 3], true);
    Ok(Probe::new(vec![coords.clone()], move || grid_sample_3d(&vol, &coords)))
}

fn case_cylindricize(seed: u64) -> Result<Probe> {
    let ps = small_cloud(&mut rng_for(seed), 12, 3);
    let feats = ps.feats.clone();
    Ok(Probe::new(vec![feats], move || Ok(cylindricize(&ps, GridSpec2D::new(3, 3)).values)))
}

fn case_spheroidize(seed: u64) -> Result<Probe> {
    let ps = small_cloud(&mut rng_for(seed), 12, 3);
    let feats = ps.feats.clone();
    Ok(Probe::new(vec![feats], move || Ok(spheroidize(&ps, GridSpec3D::new(3, 3, 2)).values)))
}

fn case_group(seed: u64) -> Result<Probe> {
    let ps = small_cloud(&mut rng_for(seed), 9, 2);
    let nb = knn(&ps, 4)?;
    let feats = ps.feats.clone();
    Ok(Probe::new(vec![feats], move || group(&ps, &nb)))
}

fn case_interpolate_3nn(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let src = small_cloud(&mut rng, 6, 3);
    let dst = points(&mut rng, 10);
    let feats = src.feats.clone();
    Ok(Probe::new(vec![feats], move || interpolate_3nn(&src, &dst)))
}

fn case_cydconv(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let ps = small_cloud(&mut rng, 8, 4);
    let p = CyDConvParams::new(4, 5, 6, 3, [1, 2, 4], GridSpec2D::new(3, 3), &mut rng)?;
    randomize(&p.offset_head, &mut rng, 0.1);
    randomize(&p.agg_proj, &mut rng, 0.5);
    let mut inputs = vec![ps.feats.clone(), p.ref_base.clone()];
    for l in [&p.offset_head, &p.weight_head, &p.agg_proj, &p.fuse_proj] {
        inputs.extend(linear_tensors(l));
    }
    for l in &p.mfl_projs {
        inputs.extend(linear_tensors(l));
    }
    inputs.extend(bn_tensors(&p.fuse_bn));
    Ok(Probe::new(inputs, move || cydconv_forward(&ps, &p)))
}

fn case_spdconv(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let ps = small_cloud(&mut rng, 8, 4);
    let enc = leaf(&mut rng, &[8, 3], -1.0, 1.0);
    let p = SpDConvParams::new(3, 4, 5, 3, GridSpec3D::new(3, 3, 2), true, &mut rng)?;
    randomize(&p.offset_head, &mut rng, 0.1);
    let mut inputs = vec![ps.feats.clone(), enc.clone(), p.ref_base.clone()];
    for l in [&p.offset_head, &p.weight_head, &p.fuse_proj] {
        inputs.extend(linear_tensors(l));
    }
    inputs.extend(bn_tensors(&p.fuse_bn));
    Ok(Probe::new(inputs, move || spdconv_forward(&ps, &enc, &p)))
}

fn case_seg_loss(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let c = 3;
    let sizes = [2, 4, 6, 8, 8];
    let logits: Vec<Tensor> = sizes.iter().map(|&n| leaf(&mut rng, &[n, c], -3.0, 3.0)).collect();
    let point_indices: Vec<Vec<usize>> = sizes.iter().map(|&n| sample(&mut rng, 8, n).into_vec()).collect();
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..c)).collect();
    let lambda: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..3.0)).collect();
    let out = MultiScaleOutput { logits: logits.clone(), point_indices };
    Ok(Probe::new(logits, move || Ok(seg_loss(&out, &labels, &lambda)?.0)))
}

fn case_network(seed: u64) -> Result<Probe> {
    let mut rng = rng_for(seed);
    let cfg = NetworkConfig::tiny(3, 2);
    let net = build_network(&cfg, seed)?;
    for e in &net.encoder {
        randomize(&e.offset_head, &mut rng, 0.05);
    }
    for d in net.decoder.iter().filter(|d| d.enabled) {
        randomize(&d.offset_head, &mut rng, 0.05);
    }
    let n = cfg.n_input_points;
    let ps = small_cloud(&mut rng, n, cfg.input_feat_dim);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.n_classes)).collect();
    let mut inputs = vec![ps.feats.clone()];
    inputs.extend(net.trainable().into_iter().map(|(_, t)| t));
    let lambda = cfg.loss_weights;
    let mut probe = Probe::new(inputs, move || Ok(seg_loss(&forward(&ps, &net)?, &labels, &lambda)?.0));
    probe.max_elems = Some(200);
    Ok(probe)
}

/// Every registered case, in report order.
pub fn registry() -> Vec<GradCase> {
    let op = |name, build| GradCase { name, tolerance: OP_TOLERANCE, build };
    vec![
        op("linear", case_linear as fn(u64) -> Result<Probe>),
        op("batch_norm", case_batch_norm),
        op("batch_norm_eval", case_batch_norm_eval),
        op("relu", case_relu),
        op("sigmoid", case_sigmoid),
        op("elementwise", case_elementwise),
        op("reductions", case_reductions),
        op("grid_sample_2d.values", case_grid_sample_2d_values),
        op("grid_sample_2d.coords", case_grid_sample_2d_coords),
        op("grid_sample_3d.values", case_grid_sample_3d_values),
        op("grid_sample_3d.coords", case_grid_sample_3d_coords),
        op("cylindricize.feats", case_cylindricize),
        op("spheroidize.feats", case_spheroidize),
        op("group", case_group),
        op("interpolate_3nn", case_interpolate_3nn),
        op("cydconv", case_cydconv),
        op("spdconv", case_spdconv),
        op("seg_loss", case_seg_loss),
        GradCase { name: "network", tolerance: NETWORK_TOLERANCE, build: case_network },
    ]
}

fn case_faulty(seed: u64) -> Result<Probe> {
    let x = leaf(&mut rng_for(seed), &[4, 3], -1.0, 1.0);
    Ok(Probe::new(vec![x.clone()], move || {
        let data: Vec<f64> = x.data().iter().map(|v| v * v).collect();
        let xs = x.to_vec();
        // d(x²)/dx is 2x; the rule below drops the factor 2.
        Ok(Tensor::from_op(x.shape().to_vec(), data, "faulty_square", vec![x.clone()], move |g| {
            vec![Some(g.iter().zip(&xs).map(|(g, v)| g * v).collect())]
        }))
    }))
}

/// A case whose backward rule is deliberately wrong, for testing the harness.
pub fn faulty_case() -> GradCase {
    GradCase { name: "faulty_square", tolerance: OP_TOLERANCE, build: case_faulty }
}

//! Differentiable bilinear / trilinear sampling of grid values.
//!
//! A normalized coordinate `x` along an axis with `s` cells maps to the
//! continuous index `u = x·s − 0.5`, so cell centers sit at integer `u`.
//! Indices are clamped to `[0, s − 1]` (replicate padding). The coordinate
//! gradient is the analytic derivative of the interpolation weights, taken from
//! the cell that `floor(u)` selects, and is zero on clamped axes.

use super::{CylinderMap, SphereVolume};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// Continuous indices this close to an integer are snapped onto it so that
/// node queries reproduce stored values bit-exactly.
const SNAP: f64 = 1e-12;

#[derive(Clone, Copy)]
struct AxisWeights {
    i0: usize,
    i1: usize,
    /// Fractional offset from `i0`.
    t: f64,
    /// `du/dx`, zero when the axis is clamped or has a single cell.
    scale: f64,
}

fn axis_weights(x: f64, s: usize) -> AxisWeights {
    if s == 1 {
        return AxisWeights { i0: 0, i1: 0, t: 0.0, scale: 0.0 };
    }
    let hi = (s - 1) as f64;
    let mut u = x * s as f64 - 0.5;
    let r = u.round();
    if (u - r).abs() <= SNAP {
        u = r;
    }
    let (u, scale) = if u < 0.0 {
        (0.0, 0.0)
    } else if u > hi {
        (hi, 0.0)
    } else {
        (u, s as f64)
    };
    let i0 = (u.floor() as usize).min(s - 2);
    AxisWeights { i0, i1: i0 + 1, t: u - i0 as f64, scale }
}

/// Samples `values` (`[s_0, …, s_{D−1}, M]`) at `coords` (`[N, K, D]`),
/// returning `[N, K, M]`. Differentiable with respect to both inputs.
pub fn grid_sample(values: &Tensor, coords: &Tensor) -> Result<Tensor> {
    match coords.shape().last() {
        Some(2) => sample_impl::<2>(values, coords),
        Some(3) => sample_impl::<3>(values, coords),
        _ => dim_err(format!("grid_sample: coordinates must be [N, K, 2|3], got {:?}", coords.shape())),
    }
}

pub fn grid_sample_2d(map: &CylinderMap, coords: &Tensor) -> Result<Tensor> {
    if coords.rank() != 3 || coords.shape()[2] != 2 {
        return dim_err(format!("grid_sample_2d: coordinates must be [N, K, 2], got {:?}", coords.shape()));
    }
    grid_sample(&map.values, coords)
}

pub fn grid_sample_3d(vol: &SphereVolume, coords: &Tensor) -> Result<Tensor> {
    if coords.rank() != 3 || coords.shape()[2] != 3 {
        return dim_err(format!("grid_sample_3d: coordinates must be [N, K, 3], got {:?}", coords.shape()));
    }
    grid_sample(&vol.values, coords)
}

fn sample_impl<const D: usize>(values: &Tensor, coords: &Tensor) -> Result<Tensor> {
    if values.rank() != D + 1 {
        return dim_err(format!("grid_sample: {D}D coordinates need a rank-{} grid, got {:?}", D + 1, values.shape()));
    }
    let [n, k, _] = *coords.shape() else {
        return dim_err(format!("grid_sample: coordinates must be [N, K, {D}], got {:?}", coords.shape()));
    };
    let mut dims = [0usize; D];
    dims.copy_from_slice(&values.shape()[..D]);
    let m = values.shape()[D];
    let mut strides = [0usize; D];
    let mut acc = m;
    for d in (0..D).rev() {
        strides[d] = acc;
        acc *= dims[d];
    }
    if coords.data().iter().any(|v| v.is_nan()) {
        return contract_err("grid_sample: NaN coordinate");
    }

    let q = n * k;
    let mut axes = Vec::with_capacity(q);
    {
        let c = coords.data();
        for s in 0..q {
            let mut a = [AxisWeights { i0: 0, i1: 0, t: 0.0, scale: 0.0 }; D];
            for d in 0..D {
                a[d] = axis_weights(c[s * D + d], dims[d]);
            }
            axes.push(a);
        }
    }
    let corners = 1usize << D;
    let corner = move |a: &[AxisWeights; D], bits: usize| -> (usize, f64) {
        let mut off = 0;
        let mut w = 1.0;
        for d in 0..D {
            if bits >> d & 1 == 1 {
                off += a[d].i1 * strides[d];
                w *= a[d].t;
            } else {
                off += a[d].i0 * strides[d];
                w *= 1.0 - a[d].t;
            }
        }
        (off, w)
    };

    let mut out = vec![0.0; q * m];
    {
        let v = values.data();
        for (s, a) in axes.iter().enumerate() {
            let o = &mut out[s * m..(s + 1) * m];
            for bits in 0..corners {
                let (off, w) = corner(a, bits);
                if w == 0.0 {
                    continue;
                }
                o.iter_mut().zip(&v[off..off + m]).for_each(|(o, v)| *o += w * v);
            }
        }
    }

    let (vt, ct) = (values.clone(), coords.clone());
    let n_values = values.numel();
    Ok(Tensor::from_op(vec![n, k, m], out, "grid_sample", vec![values.clone(), coords.clone()], move |g| {
        let gv = vt.requires_grad().then(|| {
            let mut gv = vec![0.0; n_values];
            for (s, a) in axes.iter().enumerate() {
                let gs = &g[s * m..(s + 1) * m];
                for bits in 0..corners {
                    let (off, w) = corner(a, bits);
                    if w == 0.0 {
                        continue;
                    }
                    gv[off..off + m].iter_mut().zip(gs).for_each(|(a, g)| *a += w * g);
                }
            }
            gv
        });
        let gc = ct.requires_grad().then(|| {
            let v = vt.data();
            let mut gc = vec![0.0; q * D];
            for (s, a) in axes.iter().enumerate() {
                let gs = &g[s * m..(s + 1) * m];
                for d in 0..D {
                    if a[d].scale == 0.0 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for bits in 0..corners {
                        // weight with axis d replaced by its derivative ±1
                        let mut off = 0;
                        let mut w = 1.0;
                        for e in 0..D {
                            let hi = bits >> e & 1 == 1;
                            off += if hi { a[e].i1 } else { a[e].i0 } * strides[e];
                            w *= match (e == d, hi) {
                                (true, true) => 1.0,
                                (true, false) => -1.0,
                                (false, true) => a[e].t,
                                (false, false) => 1.0 - a[e].t,
                            };
                        }
                        if w == 0.0 {
                            continue;
                        }
                        acc += w * gs.iter().zip(&v[off..off + m]).map(|(g, v)| g * v).sum::<f64>();
                    }
                    gc[s * D + d] = acc * a[d].scale;
                }
            }
            gc
        });
        vec![gv, gc]
    }))
}
